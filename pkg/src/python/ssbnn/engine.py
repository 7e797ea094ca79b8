"""
ssbnn Variational Engine
========================

Evidence lower bound, its stochastic gradients (temperature-relaxed pathwise
and score-function estimators), the doubly stochastic variational inference
step with per-group ADAM learning rates, training loops and post-training.

All gradients are ascent directions of the ELBO estimate.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats
from tqdm import tqdm

from .data.datasets import batches
from .errors import (InfeasibleModelError, InternalInconsistencyError, InvalidParameterError,
                     NumericalFailureError)
from .inference import check_feasibility, threshold_model
from .model import (NetworkArch, PriorConfig, VariationalState, loglik_and_grad, reparam_sigma,
                    sample_masked, sample_relaxed, slab_noise)

logger = logging.getLogger(__name__)

ESTIMATORS = ("relaxed", "score_function")
KL_MODES = ("analytic", "monte_carlo")
POST_TRAIN_MODES = ("sampled_gamma", "median_model")
GROUPS = ("mu", "rho", "omega")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults are the MNIST operating point."""

    batch_size: int = 100
    mc_samples: int = 1
    lr_mu: float = 1e-4
    lr_rho: float = 1e-4
    lr_omega: float = 0.1
    epochs: int = 250
    estimator: str = "relaxed"
    delta: float = 0.1
    baseline_decay: float = 0.99
    seed: int = 0
    kl_mode: str = "analytic"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be positive, got {self.batch_size}")
        if self.mc_samples < 1:
            raise InvalidParameterError(f"mc_samples must be positive, got {self.mc_samples}")
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be non-negative, got {self.epochs}")
        for name in ("lr_mu", "lr_rho", "lr_omega"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidParameterError(f"{name} must be a non-negative number, got {value}")
        if self.estimator not in ESTIMATORS:
            raise InvalidParameterError(f"unknown estimator {self.estimator!r}")
        if self.kl_mode not in KL_MODES:
            raise InvalidParameterError(f"unknown kl_mode {self.kl_mode!r}")
        if not (math.isfinite(self.delta) and self.delta > 0.0):
            raise InvalidParameterError(f"delta must be positive, got {self.delta}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise InvalidParameterError(f"baseline_decay must lie in [0, 1), got {self.baseline_decay}")
        if self.seed < 0:
            raise InvalidParameterError(f"seed must be non-negative, got {self.seed}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def rates(self) -> Dict[str, float]:
        return {"mu": self.lr_mu, "rho": self.lr_rho, "omega": self.lr_omega}


@dataclass
class GradientEstimate:
    d_mu: List[np.ndarray]
    d_rho: List[np.ndarray]
    d_omega: List[np.ndarray]
    objective: float = float("nan")

    def groups(self) -> Dict[str, List[np.ndarray]]:
        return {"mu": self.d_mu, "rho": self.d_rho, "omega": self.d_omega}

    def norms(self) -> Dict[str, float]:
        return {name: float(math.sqrt(sum(float(np.sum(g * g)) for g in arrays)))
                for name, arrays in self.groups().items()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.ravel() for arrays in self.groups().values() for g in arrays])


@dataclass
class BaselineState:
    """Input-independent control variate: an EMA of the scaled log-likelihood"""

    value: float = 0.0
    decay: float = 0.99
    updates: int = 0

    def update(self, observed: float) -> None:
        if self.updates == 0:
            self.value = float(observed)
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(observed)
        self.updates += 1


@dataclass
class AdamState:
    """Per-group first/second moments for ascent with separate learning rates"""

    m: Dict[str, List[np.ndarray]]
    v: Dict[str, List[np.ndarray]]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, state: VariationalState) -> "AdamState":
        groups = state.groups()
        return cls({k: [np.zeros_like(a) for a in groups[k]] for k in GROUPS},
                   {k: [np.zeros_like(a) for a in groups[k]] for k in GROUPS})

    def apply(self, state: VariationalState, grad: GradientEstimate, rates: Dict[str, float],
              masks: Optional[List[np.ndarray]] = None) -> VariationalState:
        """One ADAM ascent step. Groups with a zero rate are left untouched.

        ``masks`` restricts the update of every group to the marked slots.
        """
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        new = state.copy()
        params = new.groups()
        grads = grad.groups()
        for name in GROUPS:
            lr = rates[name]
            if lr == 0.0:
                continue
            for l, g in enumerate(grads[name]):
                m = self.m[name][l]
                v = self.v[name][l]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                step = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
                updated = params[name][l] + step
                if masks is not None:
                    updated = np.where(masks[l], updated, params[name][l])
                params[name][l][...] = updated
        return new


def _kl_slot_terms(state: VariationalState, prior: PriorConfig):
    for mu, rho, omega in state.layers():
        sigma = reparam_sigma(rho)
        gauss = (math.log(prior.sigma_beta) - np.log(sigma)
                 + (sigma * sigma + mu * mu) / (2.0 * prior.sigma_beta_sq) - 0.5)
        yield mu, rho, omega, sigma, gauss


def kl_analytic(state: VariationalState, prior: PriorConfig) -> float:
    """KL(q || prior) summed over slots; zero exactly when q matches the prior."""
    log_psi = math.log(prior.psi)
    log_not_psi = math.log1p(-prior.psi)
    total = 0.0
    for mu, rho, omega, sigma, gauss in _kl_slot_terms(state, prior):
        alpha = special.expit(omega)
        alpha_bar = special.expit(-omega)
        slot = (alpha * (special.log_expit(omega) - log_psi + gauss)
                + alpha_bar * (special.log_expit(-omega) - log_not_psi))
        total += float(np.sum(np.maximum(slot, 0.0)))
    return total


def kl_analytic_grad(state: VariationalState, prior: PriorConfig) -> GradientEstimate:
    """Gradient of ``kl_analytic`` w.r.t. (mu, rho, omega) (descent direction of the KL)."""
    d_mu, d_rho, d_omega = [], [], []
    for mu, rho, omega, sigma, gauss in _kl_slot_terms(state, prior):
        alpha = special.expit(omega)
        d_mu.append(alpha * mu / prior.sigma_beta_sq)
        d_rho.append(alpha * (-1.0 / sigma + sigma / prior.sigma_beta_sq) * special.expit(rho))
        d_omega.append(alpha * special.expit(-omega) * (omega - prior.logit_psi + gauss))
    return GradientEstimate(d_mu, d_rho, d_omega)


def conditional_kl(state: VariationalState, prior: PriorConfig, gamma: Sequence[np.ndarray]) -> float:
    """Gaussian slab KL of the slots marked in ``gamma`` (a selected model)."""
    return float(sum(np.sum(np.where(g, gauss, 0.0))
                     for g, (_, _, _, _, gauss) in zip(gamma, _kl_slot_terms(state, prior))))


def conditional_kl_grad(state: VariationalState, prior: PriorConfig,
                        gamma: Sequence[np.ndarray]) -> GradientEstimate:
    d_mu, d_rho, d_omega = [], [], []
    for g, (mu, rho, omega, sigma, _) in zip(gamma, _kl_slot_terms(state, prior)):
        d_mu.append(np.where(g, mu / prior.sigma_beta_sq, 0.0))
        d_rho.append(np.where(g, (-1.0 / sigma + sigma / prior.sigma_beta_sq) * special.expit(rho), 0.0))
        d_omega.append(np.zeros_like(omega))
    return GradientEstimate(d_mu, d_rho, d_omega)


def kl_mc_term(state: VariationalState, prior: PriorConfig, sample):
    """Single-draw log q(gamma, beta) - log p(gamma, beta); spike densities cancel.

    A sample drawn with ``draws`` gives one term per draw as an array.
    """
    log_psi = math.log(prior.psi)
    log_not_psi = math.log1p(-prior.psi)
    total = 0.0
    for l, ((mu, rho, omega), gamma, beta) in enumerate(zip(state.layers(), sample.gamma, sample.beta)):
        gamma = np.asarray(gamma, dtype=bool)
        impossible = gamma & (special.expit(omega) == 0.0)
        if np.any(impossible):
            slot = tuple(int(i) for i in np.argwhere(impossible)[0][-2:])
            raise InternalInconsistencyError("included slot has zero inclusion probability",
                                             group="gamma", layer=l, slot=slot)
        sigma = reparam_sigma(rho)
        included = (special.log_expit(omega) - log_psi
                    + stats.norm.logpdf(beta, loc=mu, scale=sigma)
                    - stats.norm.logpdf(beta, loc=0.0, scale=prior.sigma_beta))
        excluded = special.log_expit(-omega) - log_not_psi
        total = total + np.sum(np.where(gamma, included, excluded), axis=(-2, -1))
    return float(total) if np.ndim(total) == 0 else total


def _check_batch(batch) -> Tuple[np.ndarray, np.ndarray]:
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0 or len(X) == 0:
        raise InvalidParameterError("minibatch is empty")
    return X, y


def elbo_estimate(state: VariationalState, prior: PriorConfig, arch: NetworkArch, batch,
                  n_total: int, config: TrainConfig, rng: np.random.Generator) -> float:
    """Unbiased ELBO estimate from ``config.mc_samples`` hard draws and a minibatch."""
    X, y = _check_batch(batch)
    scale = n_total / len(y)
    kl_fixed = kl_analytic(state, prior) if config.kl_mode == "analytic" else None
    values = []
    for _ in range(config.mc_samples):
        sample = sample_masked(state, rng)
        loglik, _ = loglik_and_grad(arch, sample.beta, X, y, scale)
        kl = kl_fixed if kl_fixed is not None else kl_mc_term(state, prior, sample)
        values.append(loglik - kl)
    return float(np.mean(values))


def _ensure_finite(grad: GradientEstimate) -> GradientEstimate:
    for name, arrays in grad.groups().items():
        for l, g in enumerate(arrays):
            bad = ~np.isfinite(g)
            if np.any(bad):
                slot = tuple(int(i) for i in np.argwhere(bad)[0])
                logger.error(f"Non-finite gradient in {name}, layer {l}, slot {slot}")
                raise NumericalFailureError("non-finite gradient", group=name, layer=l, slot=slot)
    return grad


def _finish(acc: Dict[str, List[np.ndarray]], count: int, kl_grad: GradientEstimate,
            objective: float) -> GradientEstimate:
    kl = kl_grad.groups()
    out = {name: [a / count - k for a, k in zip(acc[name], kl[name])] for name in GROUPS}
    return _ensure_finite(GradientEstimate(out["mu"], out["rho"], out["omega"], objective))


def _zeros(state: VariationalState) -> Dict[str, List[np.ndarray]]:
    return {name: [np.zeros_like(a) for a in arrays] for name, arrays in state.groups().items()}


def grad_relaxed(state: VariationalState, prior: PriorConfig, arch: NetworkArch, batch, n_total: int,
                 config: TrainConfig, rng: np.random.Generator) -> GradientEstimate:
    """Pathwise gradient of the temperature-``config.delta`` relaxed ELBO.

    The forward pass uses ``gamma_tilde * beta`` and the log-likelihood is
    differentiated through both factors.
    """
    X, y = _check_batch(batch)
    scale = n_total / len(y)
    delta = config.delta
    acc = _zeros(state)
    logliks = []
    for _ in range(config.mc_samples):
        sample = sample_relaxed(state, delta, rng)
        loglik, dW = loglik_and_grad(arch, sample.weights, X, y, scale)
        logliks.append(loglik)
        for l, (g, b, eps, rho) in enumerate(zip(sample.gamma_tilde, sample.beta, sample.epsilon, state.rho)):
            acc["mu"][l] += dW[l] * g
            acc["rho"][l] += dW[l] * g * eps * special.expit(rho)
            acc["omega"][l] += dW[l] * b * g * (1.0 - g) / delta
    objective = float(np.mean(logliks)) - kl_analytic(state, prior)
    return _finish(acc, config.mc_samples, kl_analytic_grad(state, prior), objective)


def grad_score(state: VariationalState, prior: PriorConfig, arch: NetworkArch, batch, n_total: int,
               config: TrainConfig, rng: np.random.Generator,
               baseline: Optional[BaselineState] = None) -> GradientEstimate:
    """Score-function gradient for omega, pathwise for mu and rho on included slots.

    The baseline is read before and updated after the draws of this call.
    """
    X, y = _check_batch(batch)
    if baseline is None:
        baseline = BaselineState(decay=config.baseline_decay)
    scale = n_total / len(y)
    b = baseline.value
    acc = _zeros(state)
    logliks = []
    for _ in range(config.mc_samples):
        sample = sample_masked(state, rng)
        loglik, dW = loglik_and_grad(arch, sample.beta, X, y, scale)
        logliks.append(loglik)
        for l, (gamma, z, rho, omega) in enumerate(zip(sample.gamma, sample.noise, state.rho, state.omega)):
            g = gamma.astype(np.float64)
            acc["mu"][l] += dW[l] * g
            acc["rho"][l] += dW[l] * g * z * special.expit(rho)
            acc["omega"][l] += (loglik - b) * (g - special.expit(omega))
    mean_loglik = float(np.mean(logliks))
    baseline.update(mean_loglik)
    objective = mean_loglik - kl_analytic(state, prior)
    return _finish(acc, config.mc_samples, kl_analytic_grad(state, prior), objective)


def grad_fixed_mask(state: VariationalState, prior: PriorConfig, arch: NetworkArch, batch, n_total: int,
                    config: TrainConfig, rng: np.random.Generator,
                    gamma: Sequence[np.ndarray]) -> GradientEstimate:
    """Gradient for a frozen selected model: slab parameters of included slots only."""
    X, y = _check_batch(batch)
    scale = n_total / len(y)
    acc = _zeros(state)
    logliks = []
    for _ in range(config.mc_samples):
        weights, noises = [], []
        for (mu, rho, _), g in zip(state.layers(), gamma):
            z = slab_noise(rng, mu.shape)
            weights.append(np.where(g, mu + reparam_sigma(rho) * z, 0.0))
            noises.append(z)
        loglik, dW = loglik_and_grad(arch, weights, X, y, scale)
        logliks.append(loglik)
        for l, (g, z, rho) in enumerate(zip(gamma, noises, state.rho)):
            acc["mu"][l] += np.where(g, dW[l], 0.0)
            acc["rho"][l] += np.where(g, dW[l] * z * special.expit(rho), 0.0)
    objective = float(np.mean(logliks)) - conditional_kl(state, prior, gamma)
    return _finish(acc, config.mc_samples, conditional_kl_grad(state, prior, gamma), objective)


def dsvi_step(state: VariationalState, adam: AdamState, prior: PriorConfig, arch: NetworkArch, dataset,
              config: TrainConfig, rng: np.random.Generator, batch_indices: Optional[np.ndarray] = None,
              baseline: Optional[BaselineState] = None,
              frozen_gamma: Optional[Sequence[np.ndarray]] = None) -> Tuple[VariationalState, AdamState, dict]:
    """One doubly stochastic step: minibatch, gradient estimate, ADAM update.

    Without ``batch_indices`` a minibatch of ``config.batch_size`` is drawn
    uniformly without replacement from ``rng``.
    """
    n_total = len(dataset)
    if batch_indices is None:
        if config.batch_size > n_total:
            raise InvalidParameterError(f"batch_size {config.batch_size} exceeds dataset size {n_total}")
        batch_indices = rng.choice(n_total, size=config.batch_size, replace=False)
    batch = (dataset.features[batch_indices], dataset.labels[batch_indices])

    rates = config.rates
    masks = None
    if frozen_gamma is not None:
        grad = grad_fixed_mask(state, prior, arch, batch, n_total, config, rng, frozen_gamma)
        rates = dict(rates, omega=0.0)
        masks = frozen_gamma
    elif config.estimator == "relaxed":
        grad = grad_relaxed(state, prior, arch, batch, n_total, config, rng)
    else:
        grad = grad_score(state, prior, arch, batch, n_total, config, rng, baseline)

    new_state = adam.apply(state, grad, rates, masks)
    diagnostics = {"elbo": grad.objective, "grad_norms": grad.norms(), "batch_size": len(batch_indices)}
    logger.debug(f"step {adam.step}: elbo={grad.objective:.6g}")
    return new_state, adam, diagnostics


def train(state: VariationalState, prior: PriorConfig, arch: NetworkArch, dataset, config: TrainConfig,
          rng: np.random.Generator, callbacks: Sequence[Callable[[dict, VariationalState], None]] = (),
          frozen_gamma: Optional[Sequence[np.ndarray]] = None,
          progress: bool = False) -> Tuple[VariationalState, List[dict]]:
    """Run ``config.epochs`` epochs of ``ceil(n / batch_size)`` steps each.

    Each epoch visits a fresh permutation seeded by ``(config.seed, epoch)``.
    Callbacks receive the epoch record and the current state.
    """
    state.validate(arch)
    if config.batch_size > len(dataset):
        raise InvalidParameterError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    state = state.copy()
    adam = AdamState.zeros_like(state)
    baseline = BaselineState(decay=config.baseline_decay)
    history: List[dict] = []
    for epoch in tqdm(range(config.epochs), desc="epochs", disable=not progress):
        start = time.perf_counter()
        elbos = []
        for indices in batches(len(dataset), config.batch_size, config.seed, epoch):
            state, adam, diag = dsvi_step(state, adam, prior, arch, dataset, config, rng,
                                          batch_indices=indices, baseline=baseline,
                                          frozen_gamma=frozen_gamma)
            elbos.append(diag["elbo"])
        record = {"epoch": epoch + 1, "elbo": float(np.mean(elbos)),
                  "wall_time_s": time.perf_counter() - start}
        logger.info(f"epoch {record['epoch']}: elbo={record['elbo']:.6g} ({record['wall_time_s']:.2f}s)")
        history.append(record)
        for callback in callbacks:
            callback(record, state)
    return state, history


def post_train(state: VariationalState, mode: str, prior: PriorConfig, arch: NetworkArch, dataset,
               config: TrainConfig, rng: np.random.Generator,
               callbacks: Sequence[Callable[[dict, VariationalState], None]] = (),
               threshold: float = 0.5, progress: bool = False) -> Tuple[VariationalState, List[dict]]:
    """Optimize slab parameters with the model-structure distribution fixed.

    ``sampled_gamma`` keeps sampling masks with omega frozen. ``median_model``
    freezes the mask to ``alpha > threshold`` and trains only included slots.
    """
    if mode not in POST_TRAIN_MODES:
        raise InvalidParameterError(f"unknown post-training mode {mode!r}")
    frozen = config.replace(lr_omega=0.0)
    if mode == "sampled_gamma":
        return train(state, prior, arch, dataset, frozen, rng, callbacks, progress=progress)

    model = threshold_model(state, threshold)
    report = check_feasibility(model, arch)
    if not report.feasible:
        logger.error(f"Selected model at threshold {threshold} is infeasible")
        raise InfeasibleModelError(f"model selected at threshold {threshold} has no input-to-output path",
                                   diagnostics=report.diagnostics)
    return train(state, prior, arch, dataset, frozen, rng, callbacks, frozen_gamma=model.gamma_fixed,
                 progress=progress)

"""
ssbnn Exact Oracle
==================

Brute-force ground truth for tiny networks: every inclusion mask is
enumerated (ascending mask index, bit ``k`` is slot ``k`` in flattened
layer-major, row-major order) and the slab weights of each mask are
integrated with tensor-product Gauss-Hermite quadrature. Used to validate
the stochastic estimators of the engine.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special
from scipy.stats import qmc

from .engine import GradientEstimate, kl_analytic
from .errors import CapacityError, InvalidParameterError
from .model import NetworkArch, PriorConfig, VariationalState, batch_log_likelihood, reparam_sigma

logger = logging.getLogger(__name__)

MAX_SLOTS = 12
MAX_POINTS = 32
MIN_QUADRATURE_ORDER = 5
CHUNK = 65536
RELAXED_GRID_MAX_SLOTS = 2


def gauss_hermite(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and log-weights for expectations under a standard normal."""
    knots, weights = np.polynomial.hermite.hermgauss(order)
    return knots * math.sqrt(2.0), np.log(weights) - 0.5 * math.log(math.pi)


@dataclass
class TinyInstance:
    arch: NetworkArch
    features: np.ndarray
    labels: np.ndarray
    prior: PriorConfig = PriorConfig()
    quadrature_order: int = 20
    max_active_dims: int = 6

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.arch.total_slots > MAX_SLOTS:
            raise CapacityError(f"{self.arch.total_slots} weight slots exceed the oracle limit of {MAX_SLOTS}")
        if len(self.labels) > MAX_POINTS:
            raise CapacityError(f"{len(self.labels)} data points exceed the oracle limit of {MAX_POINTS}")
        if len(self.labels) != len(self.features):
            raise InvalidParameterError("features and labels differ in length")
        if self.quadrature_order < MIN_QUADRATURE_ORDER:
            raise InvalidParameterError(f"quadrature order must be at least {MIN_QUADRATURE_ORDER}")

    @property
    def n_slots(self) -> int:
        return self.arch.total_slots

    def unflatten_weights(self, flat: np.ndarray) -> List[np.ndarray]:
        """Split ``(B, q)`` flat slot values into per-layer ``(B, rows, cols)`` weights."""
        weights, offset = [], 0
        for (rows, cols), size in zip(self.arch.weight_shapes, self.arch.slot_counts):
            weights.append(flat[:, offset:offset + size].reshape(len(flat), rows, cols))
            offset += size
        return weights

    def total_loglik(self, flat: np.ndarray) -> np.ndarray:
        """Sum over data of the clamped log-likelihood, one value per row of ``flat``."""
        return batch_log_likelihood(self.arch, self.unflatten_weights(flat), self.features,
                                    self.labels).sum(axis=-1)


def _flat_params(state: VariationalState):
    mu = np.concatenate([m.ravel() for m in state.mu])
    sigma = np.concatenate([np.ravel(reparam_sigma(r)) for r in state.rho])
    omega = np.concatenate([o.ravel() for o in state.omega])
    return mu, sigma, omega


def _tensor_chunks(axes: Sequence[Tuple[np.ndarray, np.ndarray]],
                   chunk: int = CHUNK) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Tensor-product rule over ``axes`` of (nodes, log-weights), streamed in chunks."""
    if not axes:
        yield np.zeros((1, 0)), np.zeros(1)
        return
    shape = tuple(len(nodes) for nodes, _ in axes)
    total = int(np.prod(shape))
    for start in range(0, total, chunk):
        digits = np.unravel_index(np.arange(start, min(start + chunk, total)), shape)
        values = np.stack([axes[d][0][digits[d]] for d in range(len(axes))], axis=1)
        log_w = sum(axes[d][1][digits[d]] for d in range(len(axes)))
        yield values, log_w


def _masks(q: int) -> Iterator[np.ndarray]:
    for index in range(2 ** q):
        yield np.array([(index >> k) & 1 for k in range(q)], dtype=bool)


def _gaussian_chunks(instance: TinyInstance, loc: np.ndarray, scale: np.ndarray,
                     gamma: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(log-weights, total log-likelihood) over quadrature nodes for active slabs."""
    active = np.flatnonzero(gamma)
    if len(active) > instance.max_active_dims:
        raise CapacityError(f"mask with {len(active)} active slots exceeds the quadrature limit of "
                            f"{instance.max_active_dims}")
    nodes, log_w = gauss_hermite(instance.quadrature_order)
    for values, lw in _tensor_chunks([(nodes, log_w)] * len(active)):
        flat = np.zeros((len(values), instance.n_slots))
        flat[:, active] = loc[active] + scale[active] * values
        yield lw, instance.total_loglik(flat)


def _mask_log_weight(gamma: np.ndarray, omega: np.ndarray) -> Optional[float]:
    if np.any(gamma & (special.expit(omega) == 0.0)) or np.any(~gamma & (special.expit(-omega) == 0.0)):
        return None
    return float(np.sum(np.where(gamma, special.log_expit(omega), special.log_expit(-omega))))


def exact_expected_loglik(instance: TinyInstance, state: VariationalState) -> float:
    """E_q[log p(D | gamma, beta)] by enumeration and quadrature."""
    state.validate(instance.arch)
    mu, sigma, omega = _flat_params(state)
    total = 0.0
    for gamma in _masks(instance.n_slots):
        log_q = _mask_log_weight(gamma, omega)
        if log_q is None:
            continue
        expectation = sum(float(np.dot(np.exp(lw), ll)) for lw, ll in _gaussian_chunks(instance, mu, sigma, gamma))
        total += math.exp(log_q) * expectation
    return total


def exact_elbo(instance: TinyInstance, state: VariationalState, kl_mode: str = "analytic") -> float:
    """Exact ELBO. Both KL modes share the analytic KL, the exact mean of the sampled one."""
    if kl_mode not in ("analytic", "monte_carlo"):
        raise InvalidParameterError(f"unknown kl_mode {kl_mode!r}")
    return exact_expected_loglik(instance, state) - kl_analytic(state, instance.prior)


def _log_marginal_likelihoods(instance: TinyInstance) -> Tuple[List[np.ndarray], np.ndarray]:
    q = instance.n_slots
    zeros = np.zeros(q)
    scale = np.full(q, instance.prior.sigma_beta)
    log_psi = math.log(instance.prior.psi)
    log_not_psi = math.log1p(-instance.prior.psi)
    masks, log_joint = [], []
    for gamma in _masks(q):
        parts = [special.logsumexp(lw + ll) for lw, ll in _gaussian_chunks(instance, zeros, scale, gamma)]
        k = int(gamma.sum())
        log_joint.append(k * log_psi + (q - k) * log_not_psi + special.logsumexp(parts))
        masks.append(gamma)
    return masks, np.array(log_joint)


def exact_log_evidence(instance: TinyInstance) -> float:
    """log p(D) under the spike-and-slab prior."""
    _, log_joint = _log_marginal_likelihoods(instance)
    return float(special.logsumexp(log_joint))


def exact_mask_posterior(instance: TinyInstance) -> Tuple[List[np.ndarray], np.ndarray]:
    """All masks with their exact posterior probabilities p(gamma | D)."""
    masks, log_joint = _log_marginal_likelihoods(instance)
    return masks, np.exp(log_joint - special.logsumexp(log_joint))


def exact_marginal_inclusion(instance: TinyInstance) -> List[np.ndarray]:
    """Posterior inclusion probability of every slot, shaped like the layers."""
    masks, probs = exact_mask_posterior(instance)
    flat = np.sum([p * m for p, m in zip(probs, masks)], axis=0)
    return [w[0] for w in instance.unflatten_weights(flat[np.newaxis, :])]


def _relaxed_points(q: int, order: int, mc_over_nu: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(values, log-weights) over (nu, epsilon); the first ``q`` columns are nu."""
    if q <= RELAXED_GRID_MAX_SLOTS:
        per_slot = max(1, int(round(mc_over_nu ** (1.0 / q))))
        grid = (np.arange(per_slot) + 0.5) / per_slot
        nu_axis = (grid, np.full(per_slot, -math.log(per_slot)))
        yield from _tensor_chunks([nu_axis] * q + [gauss_hermite(order)] * q)
        return
    sobol = qmc.Sobol(d=2 * q, scramble=True, seed=0)
    u = np.clip(sobol.random(mc_over_nu), np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    values = np.concatenate([u[:, :q], special.ndtri(u[:, q:])], axis=1)
    log_w = np.full(mc_over_nu, -math.log(mc_over_nu))
    for start in range(0, mc_over_nu, CHUNK):
        yield values[start:start + CHUNK], log_w[start:start + CHUNK]


def exact_relaxed_elbo(instance: TinyInstance, state: VariationalState, delta: float,
                       mc_over_nu: int = 10000) -> float:
    """ELBO of the temperature-``delta`` relaxation.

    A midpoint grid in nu times Gauss-Hermite in epsilon for one or two
    slots, otherwise a fixed scrambled Sobol rule of ``mc_over_nu`` points.
    The same points are used on every call.
    """
    if not (math.isfinite(delta) and delta > 0.0):
        raise InvalidParameterError(f"relaxation temperature must be positive, got {delta}")
    if mc_over_nu < 1:
        raise InvalidParameterError("mc_over_nu must be positive")
    state.validate(instance.arch)
    mu, sigma, omega = _flat_params(state)
    q = instance.n_slots
    expectation = 0.0
    for values, log_w in _relaxed_points(q, instance.quadrature_order, mc_over_nu):
        nu, eps = values[:, :q], values[:, q:]
        gate = special.expit((omega - special.logit(nu)) / delta)
        expectation += float(np.dot(np.exp(log_w), instance.total_loglik(gate * (mu + sigma * eps))))
    return expectation - kl_analytic(state, instance.prior)


@dataclass
class FiniteDiffGradient(GradientEstimate):
    """Central-difference gradient plus the gap to the estimate at half the step"""

    richardson_gap: float = 0.0


def _central(f: Callable[[VariationalState], float], state: VariationalState, x: np.ndarray,
             eps: float) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(len(x)):
        up = x.copy()
        down = x.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (f(state.unflatten(up)) - f(state.unflatten(down))) / (2.0 * eps)
    return grad


def finite_diff_grad(f: Callable[[VariationalState], float], state: VariationalState,
                     eps: float = 1e-4) -> FiniteDiffGradient:
    """Central differences of ``f`` in every (mu, rho, omega) coordinate."""
    if not eps > 0.0:
        raise InvalidParameterError(f"finite-difference step must be positive, got {eps}")
    x = state.flatten()
    full = _central(f, state, x, eps)
    half = _central(f, state, x, eps / 2.0)
    gap = float(np.max(np.abs(full - half))) if len(x) else 0.0
    parts = state.unflatten(full)
    logger.debug(f"finite differences over {len(x)} coordinates, Richardson gap {gap:.3g}")
    return FiniteDiffGradient(parts.mu, parts.rho, parts.omega, richardson_gap=gap)

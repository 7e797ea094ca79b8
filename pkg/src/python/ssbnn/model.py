"""
ssbnn Core Model
================

Network architecture, spike-and-slab prior, the factorized variational
family over (inclusion indicator, weight) pairs, sampling from it, and the
forward pass / categorical likelihood under one fixed draw.

Every layer ``l`` owns a weight matrix of shape ``(p_l + 1, p_{l+1})`` whose
row 0 holds the bias slots. Each slot has its own inclusion indicator.
"""

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .errors import InvalidParameterError, LabelIndexError, ShapeError
from .rng import open_uniform

TINY = np.finfo(np.float64).tiny
ALPHA_MAX = float(np.nextafter(1.0, 0.0))
LOG_PROB_FLOOR = math.log(1e-300)
# Saturated inclusion logit used for dense (always included) slots
DENSE_OMEGA = 1e9

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_LINKS = ("softmax_categorical",)


@dataclass(frozen=True)
class NetworkArch:
    """Layer widths ``p_1 (input) ... p_{L+1} (classes)`` plus link choices"""

    layer_widths: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_link: str = "softmax_categorical"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise InvalidParameterError("an architecture needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise InvalidParameterError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidParameterError(f"unsupported hidden activation: {self.hidden_activation}")
        if self.output_link not in OUTPUT_LINKS:
            raise InvalidParameterError(f"unsupported output link: {self.output_link}")
        object.__setattr__(self, "layer_widths", widths)

    @classmethod
    def parse(cls, text: str) -> "NetworkArch":
        """Build from a comma-separated width list such as ``784,128,10``."""
        try:
            widths = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise InvalidParameterError(f"invalid architecture string: {text!r}")
        return cls(tuple(widths))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def class_count(self) -> int:
        return self.layer_widths[-1]

    @property
    def weight_shapes(self) -> List[Tuple[int, int]]:
        w = self.layer_widths
        return [(w[l] + 1, w[l + 1]) for l in range(self.n_layers)]

    @property
    def slot_counts(self) -> List[int]:
        return [rows * cols for rows, cols in self.weight_shapes]

    @property
    def total_slots(self) -> int:
        return sum(self.slot_counts)

    def __str__(self) -> str:
        return ",".join(str(w) for w in self.layer_widths)


@dataclass(frozen=True)
class PriorConfig:
    """Bernoulli(psi) inclusion prior and N(0, sigma_beta_sq) slab prior"""

    psi: float = math.exp(-2.0)
    sigma_beta_sq: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.psi) and 0.0 < self.psi < 1.0):
            raise InvalidParameterError(f"psi must lie in (0, 1), got {self.psi}")
        if not (math.isfinite(self.sigma_beta_sq) and self.sigma_beta_sq > 0.0):
            raise InvalidParameterError(f"sigma_beta_sq must be positive, got {self.sigma_beta_sq}")

    @classmethod
    def aic(cls, sigma_beta_sq: float = 1.0) -> "PriorConfig":
        """AIC-type complexity penalty, psi = exp(-2)."""
        return cls(math.exp(-2.0), sigma_beta_sq)

    @classmethod
    def bic(cls, n: int, sigma_beta_sq: float = 1.0) -> "PriorConfig":
        """BIC-type complexity penalty, psi = exp(-2 log n)."""
        if n < 2:
            raise InvalidParameterError(f"BIC-type prior needs a sample size of at least 2, got {n}")
        return cls(math.exp(-2.0 * math.log(n)), sigma_beta_sq)

    @property
    def sigma_beta(self) -> float:
        return math.sqrt(self.sigma_beta_sq)

    @property
    def logit_psi(self) -> float:
        return math.log(self.psi) - math.log1p(-self.psi)


def _finite(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} must be finite")
    return arr


def _scalar_or_array(arr: np.ndarray):
    return float(arr) if arr.ndim == 0 else arr


def reparam_alpha(omega):
    """Inclusion probability sigmoid(omega), kept inside the open unit interval."""
    arr = _finite(omega, "omega")
    return _scalar_or_array(np.clip(special.expit(arr), TINY, ALPHA_MAX))


def softplus(rho: np.ndarray) -> np.ndarray:
    return np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho)))


def reparam_sigma(rho):
    """Slab standard deviation log(1 + exp(rho)), floored at the smallest normal double."""
    arr = _finite(rho, "rho")
    return _scalar_or_array(np.maximum(softplus(arr), TINY))


def inverse_softplus(sigma):
    arr = np.asarray(sigma, dtype=np.float64)
    if np.any(arr <= 0):
        raise InvalidParameterError("sigma must be positive")
    return _scalar_or_array(arr + np.log(-np.expm1(-arr)))


def logit(alpha):
    arr = np.asarray(alpha, dtype=np.float64)
    if np.any((arr <= 0) | (arr >= 1)):
        raise InvalidParameterError("alpha must lie in (0, 1)")
    return _scalar_or_array(special.logit(arr))


@dataclass
class VariationalState:
    """Slab means ``mu``, pre-softplus scales ``rho`` and inclusion logits ``omega``"""

    mu: List[np.ndarray]
    rho: List[np.ndarray]
    omega: List[np.ndarray]

    def __post_init__(self):
        self.mu = [np.array(m, dtype=np.float64) for m in self.mu]
        self.rho = [np.array(r, dtype=np.float64) for r in self.rho]
        self.omega = [np.array(o, dtype=np.float64) for o in self.omega]
        if not (len(self.mu) == len(self.rho) == len(self.omega)):
            raise ShapeError("mu, rho and omega must have the same number of layers")
        for l, (m, r, o) in enumerate(zip(self.mu, self.rho, self.omega)):
            if m.ndim != 2 or m.shape != r.shape or m.shape != o.shape:
                raise ShapeError(f"layer {l}: mu, rho and omega must be matrices of one shape")

    @classmethod
    def initialize(cls, arch: NetworkArch, prior: PriorConfig, rng: np.random.Generator,
                   rho0: float = -3.0) -> "VariationalState":
        """mu ~ N(0, 1/fan_in), rho = rho0, omega = logit(psi)."""
        mu, rho, omega = [], [], []
        for rows, cols in arch.weight_shapes:
            fan_in = rows - 1
            mu.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(rows, cols)))
            rho.append(np.full((rows, cols), rho0))
            omega.append(np.full((rows, cols), prior.logit_psi))
        return cls(mu, rho, omega)

    @classmethod
    def constant(cls, arch: NetworkArch, mu: float = 0.0, rho: float = 0.0,
                 omega: float = 0.0) -> "VariationalState":
        shapes = arch.weight_shapes
        return cls([np.full(s, mu) for s in shapes],
                   [np.full(s, rho) for s in shapes],
                   [np.full(s, omega) for s in shapes])

    @classmethod
    def frozen_dense(cls, mu: Sequence[np.ndarray], sigma: Sequence[np.ndarray]) -> "VariationalState":
        """Always-included slots: the dense Gaussian BNN special case."""
        rho = [np.asarray(inverse_softplus(np.asarray(s, dtype=np.float64))) for s in sigma]
        omega = [np.full(np.shape(m), DENSE_OMEGA) for m in mu]
        return cls(list(mu), rho, omega)

    @property
    def n_layers(self) -> int:
        return len(self.mu)

    def validate(self, arch: NetworkArch) -> None:
        if self.n_layers != arch.n_layers:
            raise ShapeError(f"state has {self.n_layers} layers, architecture {arch} has {arch.n_layers}")
        for l, shape in enumerate(arch.weight_shapes):
            if self.mu[l].shape != shape:
                raise ShapeError(f"layer {l}: expected shape {shape}, got {self.mu[l].shape}")

    def layers(self) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return zip(self.mu, self.rho, self.omega)

    def alpha(self) -> List[np.ndarray]:
        return [reparam_alpha(o) for o in self.omega]

    def sigma(self) -> List[np.ndarray]:
        return [reparam_sigma(r) for r in self.rho]

    def copy(self) -> "VariationalState":
        return VariationalState([m.copy() for m in self.mu], [r.copy() for r in self.rho],
                                [o.copy() for o in self.omega])

    def groups(self) -> dict:
        return {"mu": self.mu, "rho": self.rho, "omega": self.omega}

    def flatten(self) -> np.ndarray:
        """Concatenate mu, rho, omega (group-major, then layer, then row-major)."""
        parts = [a.ravel() for group in (self.mu, self.rho, self.omega) for a in group]
        return np.concatenate(parts)

    def unflatten(self, vector: np.ndarray) -> "VariationalState":
        vector = np.asarray(vector, dtype=np.float64)
        size = sum(a.size for group in (self.mu, self.rho, self.omega) for a in group)
        if vector.size != size:
            raise ShapeError(f"vector of length {vector.size} does not match state of size {size}")
        groups, offset = [], 0
        for group in (self.mu, self.rho, self.omega):
            arrays = []
            for a in group:
                arrays.append(vector[offset:offset + a.size].reshape(a.shape).copy())
                offset += a.size
            groups.append(arrays)
        return VariationalState(*groups)

    def equals(self, other: "VariationalState") -> bool:
        """Bitwise equality of every parameter."""
        return all(np.array_equal(a, b) for ga, gb in zip(self.groups().values(), other.groups().values())
                   for a, b in zip(ga, gb))


@dataclass
class MaskedSample:
    """One hard draw (gamma, beta); beta is exactly zero where gamma is zero"""

    gamma: List[np.ndarray]
    beta: List[np.ndarray]
    noise: Optional[List[np.ndarray]] = None

    @property
    def weights(self) -> List[np.ndarray]:
        return self.beta


@dataclass
class RelaxedSample:
    """One continuously relaxed draw with the uniforms and normals behind it"""

    gamma_tilde: List[np.ndarray]
    beta: List[np.ndarray]
    nu: List[np.ndarray]
    epsilon: List[np.ndarray]

    @property
    def weights(self) -> List[np.ndarray]:
        return [g * b for g, b in zip(self.gamma_tilde, self.beta)]


def _slot_uniforms(rng: np.random.Generator, shape) -> Tuple[np.ndarray, np.ndarray]:
    # one (gate, slab) pair per slot, row-major, gate first
    u = open_uniform(rng, tuple(shape) + (2,))
    return u[..., 0], u[..., 1]


def slab_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals consumed exactly as ``sample_masked`` consumes them.

    The gate uniform of each slot pair is drawn and discarded, so a fixed
    mask and a sampled mask see the same slab noise from equal streams.
    """
    _, u_slab = _slot_uniforms(rng, shape)
    return special.ndtri(u_slab)


def sample_masked(state: VariationalState, rng: np.random.Generator,
                  draws: Optional[int] = None) -> MaskedSample:
    """Draw (gamma, beta) ~ q.

    Per slot: a uniform ``u`` gives ``gamma = I(u < alpha)``; a second uniform
    is mapped through the normal inverse CDF to ``z`` and
    ``beta = (mu + sigma z) gamma``.

    With ``draws`` every array gains a leading axis of that length.
    """
    gammas, betas, noises = [], [], []
    for mu, rho, omega in state.layers():
        shape = mu.shape if draws is None else (draws,) + mu.shape
        u_gate, u_slab = _slot_uniforms(rng, shape)
        gamma = u_gate < special.expit(omega)
        z = special.ndtri(u_slab)
        betas.append(np.where(gamma, mu + reparam_sigma(rho) * z, 0.0))
        gammas.append(gamma)
        noises.append(z)
    return MaskedSample(gammas, betas, noises)


def relax_gate(omega, nu, delta: float):
    """sigmoid((logit(alpha) - logit(nu)) / delta) with logit(alpha) = omega."""
    if not (math.isfinite(delta) and delta > 0.0):
        raise InvalidParameterError(f"relaxation temperature must be positive, got {delta}")
    return special.expit((np.asarray(omega, dtype=np.float64) - special.logit(nu)) / delta)


def sample_relaxed(state: VariationalState, delta: float, rng: np.random.Generator) -> RelaxedSample:
    """Draw the temperature-``delta`` relaxation of (gamma, beta)."""
    if not (math.isfinite(delta) and delta > 0.0):
        raise InvalidParameterError(f"relaxation temperature must be positive, got {delta}")
    gates, betas, nus, epsilons = [], [], [], []
    for mu, rho, omega in state.layers():
        nu, u_slab = _slot_uniforms(rng, mu.shape)
        eps = special.ndtri(u_slab)
        gates.append(relax_gate(omega, nu, delta))
        betas.append(mu + reparam_sigma(rho) * eps)
        nus.append(nu)
        epsilons.append(eps)
    return RelaxedSample(gates, betas, nus, epsilons)


def _as_batch(arch: NetworkArch, x) -> Tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[np.newaxis, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ShapeError(f"expected inputs of dimension {arch.input_dim}, got shape {np.shape(x)}")
    return X, single


def check_weights(arch: NetworkArch, weights: Sequence[np.ndarray]) -> None:
    if len(weights) != arch.n_layers:
        raise ShapeError(f"expected {arch.n_layers} weight matrices, got {len(weights)}")
    for l, (w, shape) in enumerate(zip(weights, arch.weight_shapes)):
        if np.shape(w)[-2:] != shape:
            raise ShapeError(f"layer {l}: expected weights of shape {shape}, got {np.shape(w)}")


def forward_cache(weights: Sequence[np.ndarray], X: np.ndarray) -> Tuple[np.ndarray, list]:
    """Logits plus the (input, pre-activation) pairs needed for backprop.

    Weights may carry leading batch dimensions; ``X`` broadcasts against them.
    """
    cache = []
    a = X
    last = len(weights) - 1
    for l, W in enumerate(weights):
        z = a @ W[..., 1:, :] + W[..., 0:1, :]
        cache.append((a, z))
        a = z if l == last else np.maximum(z, 0.0)
    return a, cache


def backward(weights: Sequence[np.ndarray], cache: list, d_logits: np.ndarray) -> List[np.ndarray]:
    """Gradients of a scalar objective w.r.t. the effective weights, given d objective / d logits."""
    grads: List[np.ndarray] = [None] * len(weights)
    dz = d_logits
    for l in range(len(weights) - 1, -1, -1):
        a, _ = cache[l]
        W = weights[l]
        dW = np.empty(W.shape)
        dW[0] = dz.sum(axis=0)
        dW[1:] = a.T @ dz
        grads[l] = dW
        if l > 0:
            da = dz @ W[1:].T
            dz = da * (cache[l - 1][1] > 0.0)
    return grads


def forward(arch: NetworkArch, weights: Sequence[np.ndarray], x) -> np.ndarray:
    """Class probabilities for one input vector or a matrix of rows."""
    X, single = _as_batch(arch, x)
    check_weights(arch, weights)
    logits, _ = forward_cache(weights, X)
    probs = special.softmax(logits, axis=-1)
    return probs[0] if single else probs


def log_likelihood(probs, label: int) -> float:
    """log probs[label], clamped below at log(1e-300)."""
    probs = np.asarray(probs, dtype=np.float64)
    label = int(label)
    if not 0 <= label < probs.shape[-1]:
        raise LabelIndexError(f"label {label} outside 0..{probs.shape[-1] - 1}")
    return float(np.log(np.maximum(probs[label], 1e-300)))


def check_labels(arch: NetworkArch, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= arch.class_count):
        raise LabelIndexError(f"labels must lie in 0..{arch.class_count - 1}")
    return y


def batch_log_likelihood(arch: NetworkArch, weights: Sequence[np.ndarray], X: np.ndarray, y) -> np.ndarray:
    """Clamped per-example log-likelihoods; leading weight batch dims are kept."""
    X, _ = _as_batch(arch, X)
    y = check_labels(arch, y)
    logits, _ = forward_cache(weights, X)
    log_probs = special.log_softmax(logits, axis=-1)
    picked = np.take_along_axis(log_probs, np.broadcast_to(y[:, None], log_probs.shape[:-1] + (1,)), axis=-1)
    return np.maximum(picked[..., 0], LOG_PROB_FLOOR)


def loglik_and_grad(arch: NetworkArch, weights: Sequence[np.ndarray], X: np.ndarray, y,
                    scale: float = 1.0) -> Tuple[float, List[np.ndarray]]:
    """``scale * sum_i log p(y_i | x_i, W)`` and its gradient w.r.t. the effective weights."""
    X, _ = _as_batch(arch, X)
    y = check_labels(arch, y)
    logits, cache = forward_cache(weights, X)
    log_probs = special.log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(len(y)), y]
    live = picked > LOG_PROB_FLOOR
    value = scale * float(np.maximum(picked, LOG_PROB_FLOOR).sum())
    d_logits = -np.exp(log_probs)
    d_logits[np.arange(len(y)), y] += 1.0
    d_logits *= (scale * live)[:, None]
    return value, backward(weights, cache, d_logits)

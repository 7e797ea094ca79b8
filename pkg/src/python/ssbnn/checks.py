"""
ssbnn Oracle Checks
===================

Cross-module validation battery: stochastic estimators of the engine are
compared against exact enumeration / quadrature on tiny fixed instances.
Each check reports the observed estimator mean, the exact target, the
standard error and the tolerance used.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import stats
from tqdm import tqdm

from .data.datasets import LabeledDataset
from .engine import (BaselineState, TrainConfig, elbo_estimate, grad_relaxed, grad_score, kl_analytic,
                     kl_mc_term, train)
from .model import NetworkArch, PriorConfig, VariationalState, sample_masked
from .oracle import TinyInstance, exact_elbo, exact_marginal_inclusion, exact_relaxed_elbo, finite_diff_grad
from .rng import ORACLE, make_stream

logger = logging.getLogger(__name__)


@dataclass
class OracleSuiteConfig:
    draws: int = 10000
    kl_draws: int = 100000
    kl_states: int = 20
    z: float = 3.0
    quadrature_order: int = 7
    relaxed_points: int = 2 ** 16
    deltas: tuple = (1.0, 0.1)
    train_epochs: int = 400
    seed: int = 0
    inject_bias: float = 0.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: List[float]
    expected: List[float]
    standard_error: List[float]
    tolerance: List[float]
    details: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _SuiteData:
    """Fixed data sets of the battery"""

    features = np.array([[0.1, 0.9], [0.8, 0.2], [0.7, 0.6], [0.3, 0.4]])
    labels = np.array([1, 0, 0, 1])


def tiny_instance(order: int = 7) -> TinyInstance:
    """Two inputs, two classes, no hidden layer: six slots, four points."""
    return TinyInstance(NetworkArch((2, 2)), _SuiteData.features, _SuiteData.labels, PriorConfig(),
                        quadrature_order=order)


def relaxed_instance(order: int = 7) -> TinyInstance:
    return TinyInstance(NetworkArch((1, 2)), _SuiteData.features[:, :1], _SuiteData.labels, PriorConfig(),
                        quadrature_order=order)


def ordering_instance(order: int = 7) -> TinyInstance:
    """First input decides the class, second input is identically zero."""
    x1 = np.tile([0.0, 1.0], 16)
    features = np.stack([x1, np.zeros_like(x1)], axis=1)
    return TinyInstance(NetworkArch((2, 2)), features, x1.astype(np.int64), PriorConfig(), quadrature_order=order)


def reference_state(arch: NetworkArch, seed: int) -> VariationalState:
    rng = make_stream(seed, ORACLE)
    shapes = arch.weight_shapes
    return VariationalState([0.8 * rng.standard_normal(s) for s in shapes],
                            [np.full(s, -1.0) for s in shapes],
                            [rng.standard_normal(s) for s in shapes])


def _instance_dataset(instance: TinyInstance):
    return LabeledDataset(instance.features, instance.labels, instance.arch.class_count, "synthetic")


def _compare(name: str, samples: np.ndarray, expected: np.ndarray, z: float, bias: float,
             slack: float = 0.0, details: Optional[dict] = None) -> CheckResult:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64).T).T
    expected = np.atleast_1d(np.asarray(expected, dtype=np.float64))
    observed = samples.mean(axis=0) + bias
    se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
    tolerance = z * se + slack + 1e-9 * (1.0 + np.abs(expected))
    passed = bool(np.all(np.abs(observed - expected) <= tolerance))
    result = CheckResult(name, passed, observed.tolist(), expected.tolist(), se.tolist(), tolerance.tolist(),
                         details or {})
    logger.info(f"{name}: {'pass' if passed else 'FAIL'} (max |error| / tolerance = "
                f"{float(np.max(np.abs(observed - expected) / tolerance)):.3g})")
    return result


def check_elbo_unbiased(cfg: OracleSuiteConfig) -> CheckResult:
    instance = tiny_instance(cfg.quadrature_order)
    state = reference_state(instance.arch, cfg.seed)
    config = TrainConfig(batch_size=len(instance.labels), seed=cfg.seed)
    rng = make_stream(cfg.seed, "check-elbo")
    batch = (instance.features, instance.labels)
    samples = [elbo_estimate(state, instance.prior, instance.arch, batch, len(instance.labels), config, rng)
               for _ in range(cfg.draws)]
    return _compare("elbo_unbiased", samples, exact_elbo(instance, state), cfg.z, cfg.inject_bias)


def _chunks(total: int, size: int = 10000) -> List[int]:
    return [min(size, total - start) for start in range(0, total, size)]


def check_kl_equivalence(cfg: OracleSuiteConfig) -> CheckResult:
    arch = NetworkArch((2, 2))
    prior = PriorConfig()
    observed, expected = [], []
    means, ses = [], []
    for k in range(cfg.kl_states):
        state = reference_state(arch, cfg.seed + 1 + k)
        rng = make_stream(cfg.seed + k, "check-kl")
        draws = np.concatenate([kl_mc_term(state, prior, sample_masked(state, rng, draws=size))
                                for size in _chunks(cfg.kl_draws)])
        means.append(draws.mean())
        ses.append(draws.std(ddof=1) / math.sqrt(len(draws)))
        expected.append(kl_analytic(state, prior))
    means = np.array(means)
    ses = np.array(ses)
    expected = np.array(expected)
    tolerance = cfg.z * ses + 1e-9
    passed = bool(np.all(np.abs(means - expected) <= tolerance)) and bool(np.all(expected >= 0.0))
    logger.info(f"kl_equivalence: {'pass' if passed else 'FAIL'}")
    return CheckResult("kl_equivalence", passed, means.tolist(), expected.tolist(), ses.tolist(),
                       tolerance.tolist())


def _gradient_samples(draw: Callable[[], np.ndarray], count: int) -> np.ndarray:
    return np.stack([draw() for _ in range(count)])


def check_score_gradient(cfg: OracleSuiteConfig) -> CheckResult:
    instance = tiny_instance(cfg.quadrature_order)
    state = reference_state(instance.arch, cfg.seed)
    n = len(instance.labels)
    config = TrainConfig(batch_size=n, estimator="score_function", seed=cfg.seed)
    rng = make_stream(cfg.seed, "check-score")
    baseline = BaselineState(decay=config.baseline_decay)
    batch = (instance.features, instance.labels)
    samples = _gradient_samples(
        lambda: grad_score(state, instance.prior, instance.arch, batch, n, config, rng, baseline).flatten(),
        cfg.draws)
    fd = finite_diff_grad(lambda s: exact_elbo(instance, s), state)
    return _compare("score_gradient", samples, fd.flatten(), cfg.z, cfg.inject_bias, fd.richardson_gap,
                    {"richardson_gap": fd.richardson_gap})


def check_relaxed_gradient(cfg: OracleSuiteConfig, delta: float) -> CheckResult:
    instance = relaxed_instance(cfg.quadrature_order)
    state = reference_state(instance.arch, cfg.seed)
    n = len(instance.labels)
    config = TrainConfig(batch_size=n, estimator="relaxed", delta=delta, seed=cfg.seed)
    rng = make_stream(cfg.seed, f"check-relaxed-{delta}")
    batch = (instance.features, instance.labels)
    samples = _gradient_samples(
        lambda: grad_relaxed(state, instance.prior, instance.arch, batch, n, config, rng).flatten(), cfg.draws)
    fd = finite_diff_grad(lambda s: exact_relaxed_elbo(instance, s, delta, cfg.relaxed_points), state)
    return _compare(f"relaxed_gradient[delta={delta}]", samples, fd.flatten(), cfg.z, cfg.inject_bias,
                    fd.richardson_gap, {"delta": delta, "richardson_gap": fd.richardson_gap})


def check_baseline_bias_free(cfg: OracleSuiteConfig) -> CheckResult:
    instance = tiny_instance(cfg.quadrature_order)
    state = reference_state(instance.arch, cfg.seed)
    n = len(instance.labels)
    config = TrainConfig(batch_size=n, estimator="score_function", seed=cfg.seed)
    batch = (instance.features, instance.labels)
    means, variances = [], []
    for b in (0.0, 100.0):
        rng = make_stream(cfg.seed, f"check-baseline-{b}")
        samples = _gradient_samples(
            lambda: grad_score(state, instance.prior, instance.arch, batch, n, config, rng,
                               BaselineState(value=b, updates=1)).d_omega[0].ravel(), cfg.draws)
        means.append(samples.mean(axis=0))
        variances.append(samples.var(axis=0, ddof=1) / len(samples))
    se = np.sqrt(variances[0] + variances[1])
    difference = means[1] - means[0] + cfg.inject_bias
    tolerance = cfg.z * se + 1e-9
    passed = bool(np.all(np.abs(difference) <= tolerance))
    logger.info(f"baseline_bias_free: {'pass' if passed else 'FAIL'}")
    return CheckResult("baseline_bias_free", passed, difference.tolist(), np.zeros_like(difference).tolist(),
                       se.tolist(), tolerance.tolist(), {"baselines": [0.0, 100.0]})


def check_alpha_ordering(cfg: OracleSuiteConfig) -> CheckResult:
    """Trained inclusion probabilities rank like the exact posterior marginals."""
    instance = ordering_instance(cfg.quadrature_order)
    arch = instance.arch
    exact = np.concatenate([m.ravel() for m in exact_marginal_inclusion(instance)])
    config = TrainConfig(batch_size=len(instance.labels), epochs=cfg.train_epochs, lr_mu=0.01, lr_rho=0.01,
                         lr_omega=0.1, seed=cfg.seed)
    state = VariationalState.initialize(arch, instance.prior, make_stream(cfg.seed, "check-init"))
    state, _ = train(state, instance.prior, arch, _instance_dataset(instance), config,
                     make_stream(cfg.seed, "check-train"))
    learned = np.concatenate([a.ravel() for a in state.alpha()])
    informative = slice(2, 4)
    dead = slice(4, 6)
    rho = stats.spearmanr(learned, exact).correlation
    ordered = (learned[informative].mean() > learned[dead].mean()
               and exact[informative].mean() > exact[dead].mean())
    passed = bool(ordered and np.isfinite(rho) and rho > 0.0)
    logger.info(f"alpha_ordering: {'pass' if passed else 'FAIL'} (spearman {rho:.3f})")
    return CheckResult("alpha_ordering", passed, learned.tolist(), exact.tolist(), [], [],
                       {"spearman": float(rho), "ordered": bool(ordered)})


def run_oracle_suite(cfg: Optional[OracleSuiteConfig] = None, progress: bool = False) -> List[CheckResult]:
    cfg = cfg or OracleSuiteConfig()
    checks = [check_elbo_unbiased, check_kl_equivalence, check_score_gradient]
    checks += [lambda c, d=d: check_relaxed_gradient(c, d) for d in cfg.deltas]
    checks += [check_baseline_bias_free, check_alpha_ordering]
    return [check(cfg) for check in tqdm(checks, desc="oracle checks", disable=not progress)]

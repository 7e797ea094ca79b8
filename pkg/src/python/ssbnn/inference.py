"""
ssbnn Model Inference
=====================

Prediction by Bayesian model averaging, point-model selections (median
probability, lambda threshold, posterior mean), feasibility of a selected
structure, doubt-thresholded classification, predictive entropies and the
sparsity / accuracy metrics reported for a trained state.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy import special

from .errors import InfeasibleModelError, InvalidParameterError
from .model import (NetworkArch, VariationalState, forward, reparam_alpha, reparam_sigma, sample_masked,
                    slab_noise)

logger = logging.getLogger(__name__)

DOUBT = -1
HISTOGRAM_BINS = 20
WEIGHT_RULES = ("sample_beta", "expected_beta")
EVAL_MODES = ("avg", "single", "median", "threshold", "postmean")
RULE_ALIASES = {"sample": "sample_beta", "expected": "expected_beta",
                "sample_beta": "sample_beta", "expected_beta": "expected_beta"}


@dataclass
class PointModel:
    """A fixed structure selected from the state, with a rule for its weights"""

    state: VariationalState
    gamma_fixed: List[np.ndarray]
    weight_rule: str = "expected_beta"
    kind: str = "median"
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.weight_rule not in WEIGHT_RULES:
            raise InvalidParameterError(f"unknown weight rule {self.weight_rule!r}")

    def with_rule(self, weight_rule: str) -> "PointModel":
        return PointModel(self.state, self.gamma_fixed, RULE_ALIASES.get(weight_rule, weight_rule),
                          self.kind, self.threshold)

    @property
    def density(self) -> float:
        total = sum(g.size for g in self.gamma_fixed)
        return float(sum(int(g.sum()) for g in self.gamma_fixed)) / total

    def effective_weights(self, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
        """Weights of one network drawn (or averaged) under this point model.

        The posterior mean model uses ``alpha * mu``. A selected structure
        (median, most probable, threshold) with the expected rule uses the
        slab mean given inclusion, ``I(alpha > lambda) * mu``, even when every
        slot passes the threshold. The sampling rule draws slab noise the way
        ``sample_masked`` does.
        """
        if self.kind == "postmean":
            return [special.expit(o) * m for m, o in zip(self.state.mu, self.state.omega)]
        if self.weight_rule == "expected_beta":
            return [np.where(g, m, 0.0) for g, m in zip(self.gamma_fixed, self.state.mu)]
        if rng is None:
            raise InvalidParameterError("sampling weights needs a random stream")
        weights = []
        for g, m, r in zip(self.gamma_fixed, self.state.mu, self.state.rho):
            z = slab_noise(rng, m.shape)
            weights.append(np.where(g, m + reparam_sigma(r) * z, 0.0))
        return weights

    @property
    def stochastic(self) -> bool:
        return self.kind != "postmean" and self.weight_rule == "sample_beta"


@dataclass
class FeasibilityReport:
    feasible: bool
    diagnostics: dict = field(default_factory=dict)


@dataclass
class PredictiveSummary:
    """Per-example averaged class probabilities and the decisions drawn from them"""

    probs: np.ndarray
    entropy: np.ndarray
    decision: np.ndarray
    doubt_decision: np.ndarray
    votes: np.ndarray
    active: List[np.ndarray]
    draws: int
    doubt_threshold: float

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def density(self) -> float:
        total = sum(a.size for a in self.active)
        return float(sum(int(a.sum()) for a in self.active)) / total


@dataclass
class SparsityReport:
    rho_per_layer: List[float]
    density: Optional[float]
    histograms: List[List[int]]
    bin_edges: List[float]

    def to_dict(self) -> dict:
        return {"rho_per_layer": self.rho_per_layer, "density": self.density,
                "histograms": self.histograms, "bin_edges": self.bin_edges}


def entropy(probs) -> Union[float, np.ndarray]:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    values = special.entr(np.asarray(probs, dtype=np.float64)).sum(axis=-1)
    return float(values) if np.ndim(values) == 0 else values


def classify_with_doubt(probs, threshold: float) -> Union[int, np.ndarray]:
    """Argmax class when its probability exceeds ``threshold`` strictly, else ``DOUBT``.

    Ties go to the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    decision = np.argmax(probs, axis=-1)
    confident = probs.max(axis=-1) > threshold
    result = np.where(confident, decision, DOUBT)
    return int(result) if result.ndim == 0 else result


def _summarize(prob_sum: np.ndarray, vote_counts: np.ndarray, active: List[np.ndarray], draws: int,
               doubt_threshold: float) -> PredictiveSummary:
    probs = prob_sum / draws
    return PredictiveSummary(probs=probs, entropy=entropy(probs), decision=np.argmax(probs, axis=-1),
                             doubt_decision=classify_with_doubt(probs, doubt_threshold),
                             votes=vote_counts / draws, active=active, draws=draws,
                             doubt_threshold=doubt_threshold)


def _accumulate(arch: NetworkArch, weights, X, prob_sum, vote_counts):
    p = forward(arch, weights, X)
    prob_sum += p
    vote_counts[np.arange(len(p)), np.argmax(p, axis=-1)] += 1.0


def predict_averaged(state: VariationalState, arch: NetworkArch, x, R: int, rng: np.random.Generator,
                     doubt_threshold: float = 0.95) -> PredictiveSummary:
    """Average the class probabilities of ``R`` networks drawn from the state.

    Each draw is shared by all rows of ``x``.
    """
    if R < 1:
        raise InvalidParameterError(f"number of prediction draws must be positive, got {R}")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    prob_sum = np.zeros((len(X), arch.class_count))
    vote_counts = np.zeros_like(prob_sum)
    active = [np.zeros(m.shape, dtype=bool) for m in state.mu]
    for _ in range(R):
        sample = sample_masked(state, rng)
        _accumulate(arch, sample.beta, X, prob_sum, vote_counts)
        for union, gamma in zip(active, sample.gamma):
            union |= gamma
    return _summarize(prob_sum, vote_counts, active, R, doubt_threshold)


def predict_point(model: PointModel, arch: NetworkArch, x, rng: Optional[np.random.Generator] = None,
                  R: int = 1, doubt_threshold: float = 0.95) -> PredictiveSummary:
    """Predict with a point model; ``R`` weight draws when its rule samples."""
    if R < 1:
        raise InvalidParameterError(f"number of prediction draws must be positive, got {R}")
    draws = R if model.stochastic else 1
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    prob_sum = np.zeros((len(X), arch.class_count))
    vote_counts = np.zeros_like(prob_sum)
    for _ in range(draws):
        _accumulate(arch, model.effective_weights(rng), X, prob_sum, vote_counts)
    active = [np.array(g, dtype=bool) for g in model.gamma_fixed]
    return _summarize(prob_sum, vote_counts, active, draws, doubt_threshold)


def threshold_model(state: VariationalState, lam: float, weight_rule: str = "expected_beta") -> PointModel:
    """Include exactly the slots with ``alpha > lam``."""
    if not 0.0 < lam < 1.0:
        raise InvalidParameterError(f"threshold must lie in (0, 1), got {lam}")
    gamma = [reparam_alpha(o) > lam for o in state.omega]
    kind = "median" if lam == 0.5 else "threshold"
    return PointModel(state, gamma, RULE_ALIASES.get(weight_rule, weight_rule), kind, lam)


def median_model(state: VariationalState, weight_rule: str = "expected_beta") -> PointModel:
    """Median probability model, ``alpha > 0.5`` (a tie at 0.5 is excluded)."""
    return threshold_model(state, 0.5, weight_rule)


def most_probable_model(state: VariationalState, weight_rule: str = "expected_beta") -> PointModel:
    """Mode of the factorized q(gamma), which is the median probability model."""
    model = median_model(state, weight_rule)
    model.kind = "most_probable"
    return model


def posterior_mean_model(state: VariationalState) -> PointModel:
    """Dense network with the posterior mean weights ``alpha * mu``."""
    gamma = [np.ones(m.shape, dtype=bool) for m in state.mu]
    return PointModel(state, gamma, "expected_beta", "postmean")


def check_feasibility(model: PointModel, arch: NetworkArch) -> FeasibilityReport:
    """Check that some input reaches some output through active non-bias slots."""
    graph = nx.DiGraph()
    source = ("source",)
    graph.add_node(source)
    for j in range(arch.input_dim):
        graph.add_edge(source, (0, j))
    empty_layer = None
    for l, gamma in enumerate(model.gamma_fixed):
        rows, cols = np.nonzero(np.asarray(gamma, dtype=bool)[1:])
        if len(rows) == 0 and empty_layer is None:
            empty_layer = l
        graph.add_edges_from(((l, int(i)), (l + 1, int(k))) for i, k in zip(rows, cols))

    reached = nx.descendants(graph, source)
    reachable = [sum(1 for j in range(width) if (l, j) in reached)
                 for l, width in enumerate(arch.layer_widths)]
    feasible = reachable[-1] > 0
    diagnostics = {"reachable_units_per_layer": reachable}
    if not feasible:
        if empty_layer is not None:
            diagnostics["first_empty_layer"] = empty_layer
        diagnostics["first_disconnected_layer"] = next(l for l, count in enumerate(reachable) if count == 0) - 1
        logger.info(f"Point model is infeasible: {diagnostics}")
    return FeasibilityReport(feasible, diagnostics)


def entropy_cdf(summaries: Iterable) -> List[Tuple[float, float]]:
    """Empirical CDF of predictive entropies as sorted ``(entropy, i/n)`` pairs."""
    values = []
    for item in summaries:
        if isinstance(item, PredictiveSummary):
            values.extend(np.ravel(item.entropy).tolist())
        else:
            values.append(float(item))
    if not values:
        raise InvalidParameterError("entropy CDF needs at least one prediction")
    values.sort()
    n = len(values)
    return [(e, (i + 1) / n) for i, e in enumerate(values)]


def sparsity_report(state: VariationalState, prediction_draws: Optional[Sequence[np.ndarray]] = None,
                    model: Optional[PointModel] = None) -> SparsityReport:
    """Per-layer mean inclusion, alpha histograms and the density of used slots.

    The density comes from the union of active slots over prediction draws or
    from a point model's mask; it is ``None`` when neither is given.
    """
    alphas = state.alpha()
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    histograms = [np.histogram(a, bins=edges)[0].astype(int).tolist() for a in alphas]
    density = None
    if prediction_draws is not None:
        total = sum(np.size(a) for a in prediction_draws)
        density = float(sum(int(np.sum(a)) for a in prediction_draws)) / total
    elif model is not None:
        density = model.density
    return SparsityReport([float(np.mean(a)) for a in alphas], density, histograms, edges.tolist())


def misclassification_report(summary: PredictiveSummary, labels, level: float = 0.95) -> Dict[str, float]:
    """Misclassified count and how often the truth stays inside the draw-vote credible set.

    The truth is credible when no wrong class gathers ``level`` of the votes
    and the true class gathers more than ``1 - level``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    wrong = summary.decision != labels
    count = int(wrong.sum())
    if count == 0:
        return {"num_misclassified": 0, "misclassified_truth_credible": None}
    votes = summary.votes[wrong]
    truth = labels[wrong]
    truth_votes = votes[np.arange(count), truth]
    other = votes.copy()
    other[np.arange(count), truth] = -1.0
    credible = (other.max(axis=-1) < level) & (truth_votes > 1.0 - level)
    return {"num_misclassified": count, "misclassified_truth_credible": float(credible.mean())}


def _accuracies(summary: PredictiveSummary, labels: np.ndarray) -> Tuple[float, Optional[float], int]:
    accuracy_all = float(np.mean(summary.decision == labels))
    classified = summary.doubt_decision != DOUBT
    num_classified = int(classified.sum())
    accuracy_doubt = (float(np.mean(summary.doubt_decision[classified] == labels[classified]))
                      if num_classified else None)
    return accuracy_all, accuracy_doubt, num_classified


def select_point_model(state: VariationalState, arch: NetworkArch, mode: str, rule: str = "expected",
                       lam: float = 0.5) -> PointModel:
    """Point model for ``mode`` with its feasibility enforced."""
    if mode == "postmean":
        return posterior_mean_model(state)
    model = median_model(state, rule) if mode == "median" else threshold_model(state, lam, rule)
    report = check_feasibility(model, arch)
    if not report.feasible:
        raise InfeasibleModelError(f"{mode} model has no input-to-output path", diagnostics=report.diagnostics)
    return model


def evaluate(state: VariationalState, arch: NetworkArch, dataset, mode: str = "avg", R: int = 10,
             rule: str = "expected", doubt_threshold: float = 0.95,
             rng: Optional[np.random.Generator] = None, lam: float = 0.5,
             seed: Optional[int] = None) -> dict:
    """Evaluate one inference mode on a labelled dataset and return a metrics record."""
    if mode not in EVAL_MODES:
        raise InvalidParameterError(f"unknown evaluation mode {mode!r}")
    if rule not in RULE_ALIASES:
        raise InvalidParameterError(f"unknown weight rule {rule!r}")
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if mode in ("avg", "single"):
        draws = R if mode == "avg" else 1
        summary = predict_averaged(state, arch, dataset.features, draws, rng, doubt_threshold)
        density = summary.density
    else:
        model = select_point_model(state, arch, mode, rule, lam)
        summary = predict_point(model, arch, dataset.features, rng, R, doubt_threshold)
        draws = summary.draws
        density = model.density

    accuracy_all, accuracy_doubt, num_classified = _accuracies(summary, labels)
    record = {
        "mode": mode,
        "R": draws,
        "accuracy_all": accuracy_all,
        "accuracy_doubt": accuracy_doubt,
        "num_classified": num_classified,
        "density": density,
        "rho_per_layer": sparsity_report(state).rho_per_layer,
        "seed": seed,
    }
    if mode in ("median", "threshold"):
        record["rule"] = RULE_ALIASES[rule]
    if mode == "threshold":
        record["lambda"] = lam
    if mode in ("avg", "single") or (mode != "postmean" and RULE_ALIASES[rule] == "sample_beta"):
        record.update(misclassification_report(summary, labels))
    logger.info(f"{mode}: accuracy={accuracy_all:.4f}, classified={num_classified}/{len(labels)}")
    return record


def accuracy_curve(state: VariationalState, arch: NetworkArch, dataset, R_values: Sequence[int],
                   rng: np.random.Generator, doubt_threshold: float = 0.95) -> List[dict]:
    labels = np.asarray(dataset.labels, dtype=np.int64)
    curve = []
    for R in R_values:
        summary = predict_averaged(state, arch, dataset.features, int(R), rng, doubt_threshold)
        accuracy_all, accuracy_doubt, num_classified = _accuracies(summary, labels)
        curve.append({"R": int(R), "accuracy_all": accuracy_all, "accuracy_doubt": accuracy_doubt,
                      "num_classified": num_classified, "density": summary.density})
    return curve

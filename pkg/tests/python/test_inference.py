import math

import numpy as np
import pytest

from ssbnn.data.validators import validate_metrics_record
from ssbnn.errors import InfeasibleModelError, InvalidParameterError
from ssbnn.inference import (DOUBT, HISTOGRAM_BINS, PointModel, accuracy_curve, check_feasibility,
                             classify_with_doubt, entropy, entropy_cdf, evaluate, median_model,
                             misclassification_report, most_probable_model, posterior_mean_model, predict_averaged,
                             predict_point, select_point_model, sparsity_report, threshold_model)
from ssbnn.model import NetworkArch, VariationalState, forward, sample_masked
from ssbnn.rng import make_stream


def _mask_model(arch, gammas):
    state = VariationalState.constant(arch)
    return PointModel(state, [np.asarray(g, dtype=bool) for g in gammas])


def test_entropy_in_nats():
    assert entropy([0.25, 0.25, 0.25, 0.25]) == pytest.approx(math.log(4))
    assert entropy([1.0, 0.0]) == 0.0
    assert np.allclose(entropy(np.array([[0.5, 0.5], [1.0, 0.0]])), [math.log(2), 0.0])


def test_doubt_threshold_is_strict():
    assert classify_with_doubt([0.96, 0.04], 0.95) == 0
    assert classify_with_doubt([0.05, 0.95], 0.95) == DOUBT
    assert classify_with_doubt([0.5, 0.5], 0.4) == 0, "Ties go to the lowest index"
    assert list(classify_with_doubt(np.array([[0.1, 0.9], [0.6, 0.4]]), 0.8)) == [1, DOUBT]


def test_median_model_excludes_exact_half(small_arch):
    state = VariationalState.constant(small_arch, omega=0.0)
    state.omega[1][0, 0] = 1e-3
    model = median_model(state)
    assert model.gamma_fixed[0].sum() == 0
    assert model.gamma_fixed[1].sum() == 1
    assert most_probable_model(state).kind == "most_probable"
    assert np.array_equal(most_probable_model(state).gamma_fixed[1], model.gamma_fixed[1])


def test_threshold_model_domain(random_state):
    loose = threshold_model(random_state, 0.2)
    tight = threshold_model(random_state, 0.8)
    assert loose.density >= tight.density
    assert loose.kind == "threshold" and loose.threshold == 0.2
    with pytest.raises(InvalidParameterError):
        threshold_model(random_state, 1.0)


def test_expected_rule_weights_are_masked_means(random_state):
    model = threshold_model(random_state, 0.5)
    for w, g, m in zip(model.effective_weights(), model.gamma_fixed, random_state.mu):
        assert np.array_equal(w, np.where(g, m, 0.0))
    with pytest.raises(InvalidParameterError):
        model.with_rule("sample").effective_weights()


def test_posterior_mean_of_dense_state_is_mu(separating_state):
    model = posterior_mean_model(separating_state)
    assert np.array_equal(model.effective_weights()[0], separating_state.mu[0])
    assert model.density == 1.0
    assert not model.stochastic


def test_feasibility_of_full_and_empty_masks(small_arch):
    full = _mask_model(small_arch, [np.ones(s) for s in small_arch.weight_shapes])
    report = check_feasibility(full, small_arch)
    assert report.feasible
    assert report.diagnostics["reachable_units_per_layer"] == [2, 3, 2]

    bias_only = [np.zeros((3, 3)), np.ones((4, 2))]
    bias_only[0][0, :] = 1
    report = check_feasibility(_mask_model(small_arch, bias_only), small_arch)
    assert not report.feasible
    assert report.diagnostics["first_empty_layer"] == 0


def test_feasibility_detects_disconnected_path(small_arch):
    layer0 = np.zeros((3, 3))
    layer0[1, 0] = 1
    layer1 = np.zeros((4, 2))
    layer1[2, 1] = 1
    report = check_feasibility(_mask_model(small_arch, [layer0, layer1]), small_arch)
    assert not report.feasible
    assert report.diagnostics["reachable_units_per_layer"] == [2, 1, 0]
    assert report.diagnostics["first_disconnected_layer"] == 1
    assert "first_empty_layer" not in report.diagnostics


def test_averaged_prediction_of_dense_state(separating_state):
    arch = NetworkArch((2, 2))
    X = np.array([[0.1, 0.2], [0.9, 0.8]])
    summary = predict_averaged(separating_state, arch, X, 5, make_stream(0, "predict"))
    expected = forward(arch, separating_state.mu, X)
    assert np.allclose(summary.probs, expected, atol=1e-9)
    assert list(summary.decision) == [0, 1]
    assert summary.density == 1.0
    assert np.allclose(summary.votes.sum(axis=1), 1.0)
    with pytest.raises(InvalidParameterError):
        predict_averaged(separating_state, arch, X, 0, make_stream(0, "predict"))


def test_more_draws_use_more_slots(random_state, small_arch):
    X = np.random.default_rng(0).uniform(0.0, 1.0, (50, 2))
    single = predict_averaged(random_state, small_arch, X, 1, make_stream(0, "predict"))
    many = predict_averaged(random_state, small_arch, X, 200, make_stream(0, "predict"))
    assert many.density >= single.density
    assert np.allclose(many.probs.sum(axis=1), 1.0)
    assert np.all(many.entropy <= math.log(2) + 1e-12)


def test_point_prediction_sampling_rule(random_state, small_arch):
    model = threshold_model(random_state, 0.3, "sample")
    summary = predict_point(model, small_arch, [[0.2, 0.4]], make_stream(0, "predict"), R=4)
    assert summary.draws == 4
    assert summary.density == pytest.approx(model.density)
    deterministic = predict_point(model.with_rule("expected"), small_arch, [[0.2, 0.4]], R=4)
    assert deterministic.draws == 1


def test_entropy_cdf_is_sorted_and_ends_at_one():
    cdf = entropy_cdf([0.3, 0.1, 0.2, 0.1])
    assert [e for e, _ in cdf] == [0.1, 0.1, 0.2, 0.3]
    assert cdf[-1][1] == 1.0
    assert cdf[0][1] == 0.25
    with pytest.raises(InvalidParameterError):
        entropy_cdf([])


def test_sparsity_report(random_state):
    report = sparsity_report(random_state)
    assert report.density is None
    assert len(report.bin_edges) == HISTOGRAM_BINS + 1
    for hist, alpha, rho in zip(report.histograms, random_state.alpha(), report.rho_per_layer):
        assert sum(hist) == alpha.size
        assert rho == pytest.approx(float(np.mean(alpha)))
    masks = [np.zeros(m.shape, dtype=bool) for m in random_state.mu]
    masks[0][0, 0] = True
    total = sum(m.size for m in masks)
    assert sparsity_report(random_state, prediction_draws=masks).density == pytest.approx(1.0 / total)


def test_misclassification_report_uses_votes(separating_state):
    arch = NetworkArch((2, 2))
    summary = predict_averaged(separating_state, arch, np.array([[0.1, 0.1], [0.9, 0.9]]), 3,
                               make_stream(0, "predict"))
    assert misclassification_report(summary, [0, 1]) == {"num_misclassified": 0,
                                                         "misclassified_truth_credible": None}
    report = misclassification_report(summary, [1, 1])
    assert report["num_misclassified"] == 1
    assert report["misclassified_truth_credible"] == 0.0


@pytest.mark.parametrize("mode", ["avg", "single", "median", "threshold", "postmean"])
def test_evaluate_separable_blobs(separating_state, blobs, mode):
    arch = NetworkArch((2, 2))
    record = evaluate(separating_state, arch, blobs, mode=mode, R=3, rng=make_stream(0, "predict"), lam=0.3,
                      seed=0)
    validate_metrics_record(record)
    assert record["accuracy_all"] == 1.0
    assert 0 < record["num_classified"] <= len(blobs)
    assert record["density"] == 1.0
    if mode == "threshold":
        assert record["lambda"] == 0.3 and record["rule"] == "expected_beta"
    if mode in ("avg", "single"):
        assert record["num_misclassified"] == 0
    assert record["R"] == (3 if mode == "avg" else 1)


def test_evaluate_rejects_infeasible_model(small_arch, blobs):
    state = VariationalState.constant(small_arch, omega=-4.0)
    with pytest.raises(InfeasibleModelError):
        evaluate(state, small_arch, blobs, mode="median")
    with pytest.raises(InfeasibleModelError):
        select_point_model(state, small_arch, "threshold", lam=0.1)
    assert select_point_model(state, small_arch, "postmean").kind == "postmean"
    with pytest.raises(InvalidParameterError):
        evaluate(state, small_arch, blobs, mode="mode")


def test_accuracy_curve_points(separating_state, blobs):
    curve = accuracy_curve(separating_state, NetworkArch((2, 2)), blobs, [1, 2, 5], make_stream(0, "predict"))
    assert [p["R"] for p in curve] == [1, 2, 5]
    assert all(p["accuracy_all"] == 1.0 for p in curve)


def test_median_model_is_most_probable_mask():
    arch = NetworkArch((2, 2))
    rng = make_stream(13, "test")
    state = VariationalState([np.zeros((3, 2))], [np.zeros((3, 2))], [rng.standard_normal((3, 2))])
    alpha = state.alpha()[0].ravel()
    best, best_log_q = None, -np.inf
    for index in range(2 ** alpha.size):
        mask = np.array([(index >> k) & 1 for k in range(alpha.size)], dtype=bool)
        log_q = float(np.sum(np.where(mask, np.log(alpha), np.log1p(-alpha))))
        if log_q > best_log_q:
            best, best_log_q = mask, log_q
    assert np.array_equal(median_model(state).gamma_fixed[0].ravel(), best)
    assert np.array_equal(most_probable_model(state).gamma_fixed[0].ravel(), best)


def test_selected_structure_keeps_slab_means_when_every_slot_passes(small_arch):
    state = VariationalState.constant(small_arch, mu=2.0, omega=3.0)
    model = median_model(state)
    assert model.density == 1.0
    assert all(np.array_equal(w, m) for w, m in zip(model.effective_weights(), state.mu))


def test_posterior_mean_weights_shrink_by_alpha(small_arch):
    state = VariationalState.constant(small_arch, mu=2.0, omega=-math.log(3.0))
    weights = posterior_mean_model(state).effective_weights()
    assert all(np.allclose(w, 0.5) for w in weights)


def test_sampled_weights_of_dense_structure_match_masked_draw():
    mu = [np.array([[0.4, -0.2], [1.0, 0.3], [-0.7, 0.9]])]
    state = VariationalState.frozen_dense(mu, [np.full((3, 2), 0.3)])
    weights = median_model(state, "sample").effective_weights(make_stream(3, "test"))
    sample = sample_masked(state, make_stream(3, "test"))
    assert np.array_equal(weights[0], sample.beta[0])


def test_single_draw_average_is_one_posterior_draw(random_state, small_arch):
    X = np.random.default_rng(1).uniform(0.0, 1.0, (8, 2))
    summary = predict_averaged(random_state, small_arch, X, 1, make_stream(4, "predict"))
    sample = sample_masked(random_state, make_stream(4, "predict"))
    assert np.array_equal(summary.probs, forward(small_arch, sample.beta, X))
    assert all(np.array_equal(a, g) for a, g in zip(summary.active, sample.gamma))


def test_prediction_spread_shrinks_with_draws(random_state, small_arch):
    x = [[0.3, 0.6]]
    rng = make_stream(5, "predict")
    single = [predict_averaged(random_state, small_arch, x, 1, rng).probs[0, 0] for _ in range(300)]
    averaged = [predict_averaged(random_state, small_arch, x, 100, rng).probs[0, 0] for _ in range(300)]
    ratio = np.std(single, ddof=1) / np.std(averaged, ddof=1)
    assert 10.0 / 1.5 < ratio < 10.0 * 1.5


def test_threshold_density_is_nonincreasing(random_state):
    densities = [threshold_model(random_state, lam).density for lam in np.linspace(0.05, 0.95, 19)]
    assert all(b <= a for a, b in zip(densities, densities[1:]))
    assert densities[0] > densities[-1]

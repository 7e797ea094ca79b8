import math

import numpy as np
import pytest

from ssbnn.data.datasets import synthetic_blobs
from ssbnn.engine import (AdamState, BaselineState, GradientEstimate, TrainConfig, _ensure_finite, dsvi_step,
                          elbo_estimate, grad_relaxed, grad_score, kl_analytic, kl_analytic_grad, kl_mc_term,
                          post_train, train)
from ssbnn.errors import (InfeasibleModelError, InternalInconsistencyError, InvalidParameterError,
                          NumericalFailureError)
from ssbnn.model import (DENSE_OMEGA, MaskedSample, NetworkArch, PriorConfig, VariationalState, inverse_softplus,
                         loglik_and_grad, reparam_sigma, sample_masked, slab_noise)
from ssbnn.oracle import finite_diff_grad
from ssbnn.rng import make_stream


def _prior_matching_state(arch, prior):
    return VariationalState.constant(arch, mu=0.0, rho=inverse_softplus(prior.sigma_beta),
                                     omega=prior.logit_psi)


def test_train_config_defaults_and_domain():
    config = TrainConfig()
    assert (config.batch_size, config.mc_samples, config.epochs) == (100, 1, 250)
    assert config.rates == {"mu": 1e-4, "rho": 1e-4, "omega": 0.1}
    assert config.estimator == "relaxed" and config.delta == 0.1
    with pytest.raises(InvalidParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(estimator="reinforce")
    with pytest.raises(InvalidParameterError):
        TrainConfig(delta=0.0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(lr_mu=-1.0)


def test_kl_is_zero_at_prior(small_arch, prior):
    state = _prior_matching_state(small_arch, prior)
    assert abs(kl_analytic(state, prior)) < 1e-10


def test_kl_is_positive_elsewhere(random_state, prior):
    assert kl_analytic(random_state, prior) > 0.0


def test_kl_gradient_matches_finite_differences(random_state, prior):
    analytic = kl_analytic_grad(random_state, prior).flatten()
    numeric = finite_diff_grad(lambda s: kl_analytic(s, prior), random_state).flatten()
    assert np.allclose(analytic, numeric, atol=1e-6), "Analytic KL gradient should match central differences"


def test_sampled_kl_is_unbiased(random_state, prior):
    draws = kl_mc_term(random_state, prior, sample_masked(random_state, make_stream(2, "test"), draws=100000))
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - kl_analytic(random_state, prior)) < 3 * se


def test_kl_term_rejects_impossible_sample(small_arch, prior):
    state = VariationalState.constant(small_arch, omega=-1e9)
    sample = MaskedSample([np.ones(s, dtype=bool) for s in small_arch.weight_shapes],
                          [np.zeros(s) for s in small_arch.weight_shapes])
    with pytest.raises(InternalInconsistencyError) as info:
        kl_mc_term(state, prior, sample)
    assert info.value.layer == 0


def test_elbo_estimate_modes(random_state, prior, small_arch):
    X = np.array([[0.1, 0.2], [0.9, 0.8]])
    y = np.array([0, 1])
    for mode in ("analytic", "monte_carlo"):
        config = TrainConfig(kl_mode=mode, mc_samples=3)
        value = elbo_estimate(random_state, prior, small_arch, (X, y), 10, config, make_stream(0, "test"))
        assert math.isfinite(value)
    with pytest.raises(InvalidParameterError):
        elbo_estimate(random_state, prior, small_arch, (X[:0], y[:0]), 10, TrainConfig(), make_stream(0, "test"))


def test_baseline_starts_at_first_value():
    baseline = BaselineState(decay=0.5)
    baseline.update(10.0)
    assert baseline.value == 10.0
    baseline.update(20.0)
    assert baseline.value == 15.0
    assert baseline.updates == 2


def test_score_gradient_updates_baseline_after_use(random_state, prior, small_arch):
    X = np.array([[0.1, 0.2], [0.9, 0.8]])
    y = np.array([0, 1])
    baseline = BaselineState()
    grad = grad_score(random_state, prior, small_arch, (X, y), 2, TrainConfig(estimator="score_function"),
                      make_stream(0, "test"), baseline)
    assert baseline.updates == 1
    assert baseline.value == pytest.approx(grad.objective + kl_analytic(random_state, prior))


def test_relaxed_gradient_shapes(random_state, prior, small_arch):
    X = np.array([[0.1, 0.2], [0.9, 0.8], [0.5, 0.5]])
    y = np.array([0, 1, 1])
    grad = grad_relaxed(random_state, prior, small_arch, (X, y), 30, TrainConfig(mc_samples=2),
                        make_stream(0, "test"))
    for name, arrays in grad.groups().items():
        assert [a.shape for a in arrays] == small_arch.weight_shapes, f"{name} gradient shape"
        assert all(np.all(np.isfinite(a)) for a in arrays)
    assert set(grad.norms()) == {"mu", "rho", "omega"}


def test_non_finite_gradient_names_its_slot():
    grad = GradientEstimate([np.zeros((2, 2))], [np.array([[0.0, 0.0], [0.0, np.nan]])], [np.zeros((2, 2))])
    with pytest.raises(NumericalFailureError) as info:
        _ensure_finite(grad)
    assert (info.value.group, info.value.layer, info.value.slot) == ("rho", 0, (1, 1))


def test_adam_first_step_and_frozen_groups(random_state):
    grad = GradientEstimate([np.full(m.shape, 2.0) for m in random_state.mu],
                            [np.full(m.shape, -3.0) for m in random_state.mu],
                            [np.ones(m.shape) for m in random_state.mu])
    adam = AdamState.zeros_like(random_state)
    new = adam.apply(random_state, grad, {"mu": 0.01, "rho": 0.01, "omega": 0.0})
    assert adam.step == 1
    assert np.allclose(new.mu[0] - random_state.mu[0], 0.01)
    assert np.allclose(new.rho[0] - random_state.rho[0], -0.01)
    assert new.omega[0] is not random_state.omega[0]
    assert np.array_equal(new.omega[0], random_state.omega[0])


def test_adam_masks_restrict_update(random_state):
    grad = GradientEstimate([np.ones(m.shape) for m in random_state.mu],
                            [np.ones(m.shape) for m in random_state.mu],
                            [np.ones(m.shape) for m in random_state.mu])
    masks = [np.zeros(m.shape, dtype=bool) for m in random_state.mu]
    masks[0][0, 0] = True
    new = AdamState.zeros_like(random_state).apply(random_state, grad, {"mu": 0.1, "rho": 0.1, "omega": 0.1},
                                                   masks)
    changed = new.mu[0] != random_state.mu[0]
    assert changed[0, 0] and changed.sum() == 1
    assert np.array_equal(new.mu[1], random_state.mu[1])


def test_dsvi_step_is_deterministic(blobs, prior):
    arch = NetworkArch((2, 4, 2))
    state = VariationalState.initialize(arch, prior, make_stream(0, "init"))
    config = TrainConfig(batch_size=20, lr_mu=0.01, lr_rho=0.01)
    results = []
    for _ in range(2):
        new, _, diag = dsvi_step(state, AdamState.zeros_like(state), prior, arch, blobs, config,
                                 make_stream(0, "train"))
        results.append(new)
        assert diag["batch_size"] == 20
        assert math.isfinite(diag["elbo"])
    assert results[0].equals(results[1])
    assert not results[0].equals(state)
    with pytest.raises(InvalidParameterError):
        dsvi_step(state, AdamState.zeros_like(state), prior, arch, blobs.head(10), config, make_stream(0, "train"))


def test_train_reports_every_epoch(blobs, prior):
    arch = NetworkArch((2, 4, 2))
    state = VariationalState.initialize(arch, prior, make_stream(0, "init"))
    seen = []
    config = TrainConfig(batch_size=50, epochs=3, lr_mu=0.01, lr_rho=0.01)
    trained, history = train(state, prior, arch, blobs, config, make_stream(0, "train"),
                             callbacks=[lambda record, s: seen.append(record["epoch"])])
    assert [r["epoch"] for r in history] == [1, 2, 3]
    assert seen == [1, 2, 3]
    assert all(r["wall_time_s"] >= 0.0 and math.isfinite(r["elbo"]) for r in history)
    again, _ = train(state, prior, arch, blobs, config, make_stream(0, "train"))
    assert trained.equals(again), "Same seed should give a bit-identical state"


def test_zero_epochs_leaves_state(blobs, prior):
    arch = NetworkArch((2, 4, 2))
    state = VariationalState.initialize(arch, prior, make_stream(0, "init"))
    trained, history = train(state, prior, arch, blobs, TrainConfig(batch_size=50, epochs=0),
                             make_stream(0, "train"))
    assert history == []
    assert trained.equals(state)


@pytest.mark.slow
@pytest.mark.parametrize("estimator", ["relaxed", "score_function"])
def test_training_raises_elbo(prior, estimator):
    data = synthetic_blobs(200, seed=3)
    arch = NetworkArch((2, 4, 2))
    state = VariationalState.initialize(arch, prior, make_stream(3, "init"))
    config = TrainConfig(batch_size=50, epochs=60, lr_mu=0.02, lr_rho=0.02, lr_omega=0.1, estimator=estimator,
                         seed=3)
    _, history = train(state, prior, arch, data, config, make_stream(3, "train"))
    first = np.mean([r["elbo"] for r in history[:5]])
    last = np.mean([r["elbo"] for r in history[-5:]])
    assert last > first, f"ELBO should improve ({first:.2f} -> {last:.2f})"


def test_post_train_sampled_keeps_omega(blobs, prior):
    arch = NetworkArch((2, 2))
    state = VariationalState.initialize(arch, prior, make_stream(0, "init"))
    config = TrainConfig(batch_size=50, epochs=2, lr_mu=0.01, lr_rho=0.01, lr_omega=0.5)
    new, history = post_train(state, "sampled_gamma", prior, arch, blobs, config, make_stream(0, "train"))
    assert len(history) == 2
    assert all(np.array_equal(a, b) for a, b in zip(new.omega, state.omega))
    assert not all(np.array_equal(a, b) for a, b in zip(new.mu, state.mu))


def test_post_train_median_only_moves_included_slots(blobs, prior):
    arch = NetworkArch((2, 2))
    state = VariationalState.constant(arch, mu=0.1, rho=-2.0, omega=3.0)
    state.omega[0][2, :] = -3.0
    config = TrainConfig(batch_size=50, epochs=2, lr_mu=0.01, lr_rho=0.01)
    new, _ = post_train(state, "median_model", prior, arch, blobs, config, make_stream(0, "train"))
    assert np.array_equal(new.omega[0], state.omega[0])
    assert np.array_equal(new.mu[0][2], state.mu[0][2])
    assert np.array_equal(new.rho[0][2], state.rho[0][2])
    assert not np.array_equal(new.mu[0][:2], state.mu[0][:2])


def test_post_train_rejects_infeasible_selection(blobs, prior):
    arch = NetworkArch((2, 2))
    state = VariationalState.constant(arch, omega=-5.0)
    with pytest.raises(InfeasibleModelError) as info:
        post_train(state, "median_model", prior, arch, blobs, TrainConfig(batch_size=50, epochs=1),
                   make_stream(0, "train"))
    assert info.value.diagnostics["reachable_units_per_layer"] == [2, 0]
    assert info.value.exit_code == 3
    with pytest.raises(InvalidParameterError):
        post_train(state, "dense", prior, arch, blobs, TrainConfig(), make_stream(0, "train"))


@pytest.mark.parametrize("estimator", ["relaxed", "score_function"])
def test_zero_learning_rates_leave_state_bitwise(blobs, prior, estimator):
    arch = NetworkArch((2, 4, 2))
    state = VariationalState.initialize(arch, prior, make_stream(0, "init"))
    config = TrainConfig(batch_size=20, lr_mu=0.0, lr_rho=0.0, lr_omega=0.0, estimator=estimator)
    new, _, _ = dsvi_step(state, AdamState.zeros_like(state), prior, arch, blobs, config, make_stream(0, "train"))
    assert new.equals(state)


@pytest.mark.parametrize("estimator", ["relaxed", "score_function"])
def test_dead_input_slot_follows_kl_gradient(prior, estimator):
    arch = NetworkArch((2, 2))
    X = np.array([[0.2, 0.0], [0.9, 0.0], [0.5, 0.0]])
    y = np.array([0, 1, 1])
    rng = make_stream(6, "fixture")
    state = VariationalState([rng.standard_normal((3, 2))], [np.full((3, 2), -1.0)], [rng.standard_normal((3, 2))])
    config = TrainConfig(mc_samples=2, estimator=estimator)
    if estimator == "relaxed":
        grad = grad_relaxed(state, prior, arch, (X, y), 3, config, make_stream(0, "test"))
    else:
        grad = grad_score(state, prior, arch, (X, y), 3, config, make_stream(0, "test"))
    kl = kl_analytic_grad(state, prior)
    assert np.array_equal(grad.d_mu[0][2], -kl.d_mu[0][2])


def test_always_included_slots_give_dense_pathwise_gradient(random_state, prior, small_arch):
    state = VariationalState(random_state.mu, random_state.rho,
                             [np.full(o.shape, DENSE_OMEGA) for o in random_state.omega])
    X = np.array([[0.1, 0.2], [0.9, 0.8], [0.5, 0.5]])
    y = np.array([0, 1, 1])
    grad = grad_relaxed(state, prior, small_arch, (X, y), 30, TrainConfig(), make_stream(0, "test"))

    rng = make_stream(0, "test")
    weights = [m + reparam_sigma(r) * slab_noise(rng, m.shape) for m, r in zip(state.mu, state.rho)]
    _, dW = loglik_and_grad(small_arch, weights, X, y, 10.0)
    for d, g, m in zip(grad.d_mu, dW, state.mu):
        assert np.allclose(d, g - m / prior.sigma_beta_sq, rtol=1e-12, atol=1e-12)
    assert all(np.array_equal(d, np.zeros_like(d)) for d in grad.d_omega)


def test_score_gradient_without_likelihood_signal_follows_kl(prior):
    arch = NetworkArch((2, 2))
    X = np.zeros((4, 2))
    y = np.array([0, 1, 0, 1])
    state = VariationalState.constant(arch, mu=0.7, rho=-1.0, omega=-1e9)
    state.omega[0][1, 0] = 0.0
    config = TrainConfig(estimator="score_function")
    target = -kl_analytic_grad(state, prior).d_omega[0]

    rng = make_stream(8, "test")
    draws = np.array([grad_score(state, prior, arch, (X, y), 4, config, rng, BaselineState()).d_omega[0][1, 0]
                      for _ in range(4000)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - target[1, 0]) < 3 * se

    baseline = BaselineState()
    grad_score(state, prior, arch, (X, y), 4, config, rng, baseline)
    settled = grad_score(state, prior, arch, (X, y), 4, config, rng, baseline)
    assert np.array_equal(settled.d_omega[0], target)

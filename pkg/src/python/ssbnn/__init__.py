"""
ssbnn
=====

Bayesian neural networks with joint structure and parameter uncertainty:
a spike-and-slab variational family over every weight, trained by doubly
stochastic variational inference, with model-averaged and selected-model
prediction.
"""

__version__ = "0.1.0"

from .engine import (AdamState, BaselineState, GradientEstimate, TrainConfig, dsvi_step, elbo_estimate,
                     grad_relaxed, grad_score, kl_analytic, kl_mc_term, post_train, train)
from .errors import SSBNNError
from .inference import (DOUBT, PointModel, PredictiveSummary, SparsityReport, check_feasibility,
                        classify_with_doubt, entropy, entropy_cdf, evaluate, median_model,
                        posterior_mean_model, predict_averaged, sparsity_report, threshold_model)
from .model import (MaskedSample, NetworkArch, PriorConfig, RelaxedSample, VariationalState, forward,
                    log_likelihood, reparam_alpha, reparam_sigma, sample_masked, sample_relaxed)
from .rng import make_stream

__all__ = [
    'AdamState',
    'BaselineState',
    'GradientEstimate',
    'TrainConfig',
    'dsvi_step',
    'elbo_estimate',
    'grad_relaxed',
    'grad_score',
    'kl_analytic',
    'kl_mc_term',
    'post_train',
    'train',
    'SSBNNError',
    'DOUBT',
    'PointModel',
    'PredictiveSummary',
    'SparsityReport',
    'check_feasibility',
    'classify_with_doubt',
    'entropy',
    'entropy_cdf',
    'evaluate',
    'median_model',
    'posterior_mean_model',
    'predict_averaged',
    'sparsity_report',
    'threshold_model',
    'MaskedSample',
    'NetworkArch',
    'PriorConfig',
    'RelaxedSample',
    'VariationalState',
    'forward',
    'log_likelihood',
    'reparam_alpha',
    'reparam_sigma',
    'sample_masked',
    'sample_relaxed',
    'make_stream',
]

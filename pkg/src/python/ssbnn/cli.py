"""
ssbnn Command Line
==================

Reproducible experiments over the library: training, post-training,
evaluation, sparsity and out-of-domain reports, accuracy-vs-draws curves
and the oracle self-check battery.

stdout carries JSON (one object per line); diagnostics go to stderr.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure,
4 oracle-check failure.
"""

import json
import logging
import math
import sys
import time
from typing import Optional, Sequence

import click
import numpy as np

from . import __version__
from .checks import OracleSuiteConfig, run_oracle_suite
from .config import load_run_spec, setup_logging, to_default_map
from .data.datasets import LabeledDataset, load_idx, load_standard, synthetic_blobs
from .data.serializers import Checkpoint, load_checkpoint, save_checkpoint, write_metrics
from .engine import ESTIMATORS, KL_MODES, TrainConfig, post_train, train
from .errors import InfeasibleModelError, NumericalFailureError, OracleCheckFailure, ShapeError, SSBNNError
from .inference import (EVAL_MODES, accuracy_curve, entropy_cdf, evaluate, median_model, posterior_mean_model,
                        predict_averaged, select_point_model, sparsity_report, threshold_model)
from .model import NetworkArch, PriorConfig, VariationalState, sample_masked
from .rng import INIT, PREDICT, TRAIN, make_stream

logger = logging.getLogger(__name__)

ORACLE_TIME_BUDGET_S = 600.0
SYNTHETIC_SIZE = 200


def _emit(record: dict) -> None:
    click.echo(json.dumps(record, sort_keys=True, allow_nan=False))


def _progress(ctx: click.Context) -> bool:
    return not (ctx.obj or {}).get("quiet", False)


def dataset_options(split_default: str):
    def decorator(f):
        f = click.option("--data-dir", type=click.Path(file_okay=False),
                         help="Dataset root (defaults to $SSBNN_DATA_DIR)")(f)
        f = click.option("--labels", "labels_path", type=click.Path(dir_okay=False),
                         help="IDX labels file (with --images)")(f)
        f = click.option("--images", "images_path", type=click.Path(dir_okay=False),
                         help="IDX images file (overrides --dataset)")(f)
        f = click.option("--limit", type=click.IntRange(min=1), help="Use only the first N examples")(f)
        f = click.option("--split", type=click.Choice(["train", "test"]), default=split_default,
                         show_default=True)(f)
        f = click.option("--dataset", type=click.Choice(["mnist", "fmnist", "synthetic"]), default="mnist",
                         show_default=True)(f)
        return f
    return decorator


def optimizer_options(epochs_default: int):
    def decorator(f):
        f = click.option("--kl-mode", type=click.Choice(KL_MODES), default="analytic", show_default=True)(f)
        f = click.option("--baseline-decay", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.99,
                         show_default=True)(f)
        f = click.option("--delta", type=click.FloatRange(0.0, min_open=True), default=None,
                         help="Relaxation temperature [default: 0.1]")(f)
        f = click.option("--estimator", type=click.Choice(ESTIMATORS), default=None,
                         help="Gradient estimator [default: relaxed]")(f)
        f = click.option("--mc-samples", type=click.IntRange(min=1), default=1, show_default=True)(f)
        f = click.option("--lr-rho", type=click.FloatRange(0.0), default=1e-4, show_default=True)(f)
        f = click.option("--lr-mu", type=click.FloatRange(0.0), default=1e-4, show_default=True)(f)
        f = click.option("--batch", "batch_size", type=click.IntRange(min=1), default=100, show_default=True)(f)
        f = click.option("--epochs", type=click.IntRange(min=0), default=epochs_default, show_default=True)(f)
        return f
    return decorator


def _load_dataset(dataset: str, split: str, limit: Optional[int], images_path: Optional[str],
                  labels_path: Optional[str], data_dir: Optional[str], seed: int) -> LabeledDataset:
    if images_path or labels_path:
        if not (images_path and labels_path):
            raise click.UsageError("--images and --labels must be given together")
        data = load_idx(images_path, labels_path)
    elif dataset == "synthetic":
        data = synthetic_blobs(limit or SYNTHETIC_SIZE, seed + (0 if split == "train" else 1))
    else:
        data = load_standard(dataset, split, data_dir)
    return data.head(limit) if limit else data


def _check_input_dim(arch: NetworkArch, data: LabeledDataset) -> None:
    if arch.input_dim != data.dim:
        raise ShapeError(f"architecture {arch} expects {arch.input_dim} inputs, dataset has {data.dim}")
    if data.class_count > arch.class_count:
        raise ShapeError(f"architecture {arch} has {arch.class_count} outputs, dataset has "
                         f"{data.class_count} classes")


def _epoch_writer(metrics: Optional[str], timing: bool, phase: str):
    def callback(record: dict, state: VariationalState) -> None:
        out = {"epoch": record["epoch"], "elbo": record["elbo"], "phase": phase}
        if timing:
            out["wall_time_s"] = record["wall_time_s"]
        if not math.isfinite(out["elbo"]):
            raise NumericalFailureError(f"non-finite ELBO estimate in epoch {record['epoch']}")
        _emit(out)
        if metrics:
            write_metrics(out, metrics)
    return callback


@click.group()
@click.version_option(__version__, prog_name="ssbnn")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="YAML or JSON run specification supplying option defaults")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None, help="Override the package log level")
@click.option("--log-config", type=click.Path(exists=True, dir_okay=False),
              help="logging.config YAML replacing the packaged one")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker cap; computations run sequentially for determinism")
@click.option("--quiet", is_flag=True, help="Hide progress bars")
@click.pass_context
def cli(ctx: click.Context, config_file, log_level, log_config, threads, quiet):
    """Spike-and-slab Bayesian neural networks."""
    setup_logging(log_level, log_config)
    ctx.obj = {"threads": threads, "quiet": quiet}
    if config_file:
        spec = load_run_spec(config_file)
        ctx.default_map = to_default_map(spec, cli.commands)
        logger.info(f"Run specification loaded from {config_file}")


@cli.command("train")
@click.option("--arch", default="784,128,10", show_default=True, help="Comma-separated layer widths")
@click.option("--psi", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=math.exp(-2.0),
              show_default=True, help="Prior inclusion probability")
@click.option("--prior-penalty", type=click.Choice(["aic", "bic"]), default=None,
              help="Set psi from a complexity penalty instead of --psi")
@click.option("--sigma-beta-sq", type=click.FloatRange(0.0, min_open=True), default=1.0, show_default=True)
@optimizer_options(epochs_default=250)
@click.option("--lr-omega", type=click.FloatRange(0.0), default=0.1, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@dataset_options("train")
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False), required=True,
              help="Checkpoint to write")
@click.option("--metrics", type=click.Path(dir_okay=False), help="Append per-epoch records here")
@click.option("--timing/--no-timing", default=True, help="Include wall time in epoch records")
@click.pass_context
def cmd_train(ctx, arch, psi, prior_penalty, sigma_beta_sq, epochs, batch_size, lr_mu, lr_rho, mc_samples,
              estimator, delta, baseline_decay, kl_mode, lr_omega, seed, dataset, split, limit, images_path,
              labels_path, data_dir, out_path, metrics, timing):
    """Train a variational state and write a checkpoint."""
    network = NetworkArch.parse(arch)
    config = TrainConfig(batch_size=batch_size, mc_samples=mc_samples, lr_mu=lr_mu, lr_rho=lr_rho,
                         lr_omega=lr_omega, epochs=epochs, estimator=estimator or "relaxed",
                         delta=0.1 if delta is None else delta, baseline_decay=baseline_decay, seed=seed,
                         kl_mode=kl_mode)
    data = _load_dataset(dataset, split, limit, images_path, labels_path, data_dir, seed)
    _check_input_dim(network, data)
    if prior_penalty == "aic":
        prior = PriorConfig.aic(sigma_beta_sq)
    elif prior_penalty == "bic":
        prior = PriorConfig.bic(len(data), sigma_beta_sq)
    else:
        prior = PriorConfig(psi, sigma_beta_sq)

    state = VariationalState.initialize(network, prior, make_stream(seed, INIT))
    state, _ = train(state, prior, network, data, config, make_stream(seed, TRAIN),
                     callbacks=[_epoch_writer(metrics, timing, "train")], progress=_progress(ctx))
    save_checkpoint(Checkpoint(network, prior, state, seed, epochs, config.estimator, config.delta), out_path)


@cli.command("posttrain")
@click.option("--checkpoint", "-c", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--mode", type=click.Choice(["sampled", "median"]), default="sampled", show_default=True)
@click.option("--lambda", "lam", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=0.5,
              show_default=True, help="Inclusion threshold of the selected model (median mode)")
@optimizer_options(epochs_default=50)
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Defaults to the checkpoint seed")
@dataset_options("train")
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--metrics", type=click.Path(dir_okay=False))
@click.option("--timing/--no-timing", default=True)
@click.pass_context
def cmd_posttrain(ctx, checkpoint_path, mode, lam, epochs, batch_size, lr_mu, lr_rho, mc_samples, estimator,
                  delta, baseline_decay, kl_mode, seed, dataset, split, limit, images_path, labels_path,
                  data_dir, out_path, metrics, timing):
    """Optimize slab parameters with inclusion logits frozen."""
    ckpt = load_checkpoint(checkpoint_path)
    seed = ckpt.seed if seed is None else seed
    config = TrainConfig(batch_size=batch_size, mc_samples=mc_samples, lr_mu=lr_mu, lr_rho=lr_rho, lr_omega=0.0,
                         epochs=epochs, estimator=estimator or ckpt.estimator,
                         delta=ckpt.delta if delta is None else delta, baseline_decay=baseline_decay, seed=seed,
                         kl_mode=kl_mode)
    data = _load_dataset(dataset, split, limit, images_path, labels_path, data_dir, seed)
    _check_input_dim(ckpt.arch, data)
    engine_mode = "sampled_gamma" if mode == "sampled" else "median_model"
    state, _ = post_train(ckpt.state, engine_mode, ckpt.prior, ckpt.arch, data, config, make_stream(seed, TRAIN),
                          callbacks=[_epoch_writer(metrics, timing, "posttrain")], threshold=lam,
                          progress=_progress(ctx))
    save_checkpoint(Checkpoint(ckpt.arch, ckpt.prior, state, ckpt.seed, ckpt.epochs + epochs, ckpt.estimator,
                               ckpt.delta), out_path)


@cli.command("eval")
@click.option("--checkpoint", "-c", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--mode", type=click.Choice(EVAL_MODES), default="avg", show_default=True)
@click.option("--rule", type=click.Choice(["sample", "expected"]), default="expected", show_default=True,
              help="Weights of a selected model: sampled slabs or slab means")
@click.option("--R", "R", type=click.IntRange(min=1), default=10, show_default=True, help="Prediction draws")
@click.option("--doubt-threshold", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.95,
              show_default=True)
@click.option("--lambda", "lam", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=0.5,
              show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@dataset_options("test")
@click.option("--metrics", type=click.Path(dir_okay=False), help="Append the record here")
def cmd_eval(checkpoint_path, mode, rule, R, doubt_threshold, lam, seed, dataset, split, limit, images_path,
             labels_path, data_dir, metrics):
    """Evaluate one inference mode and print its metrics record."""
    ckpt = load_checkpoint(checkpoint_path)
    data = _load_dataset(dataset, split, limit, images_path, labels_path, data_dir, ckpt.seed)
    _check_input_dim(ckpt.arch, data)
    deterministic = mode == "postmean" or (mode in ("median", "threshold") and rule == "expected")
    record = evaluate(ckpt.state, ckpt.arch, data, mode=mode, R=R, rule=rule, doubt_threshold=doubt_threshold,
                      rng=make_stream(seed, PREDICT), lam=lam, seed=None if deterministic else seed)
    _emit(record)
    if metrics:
        write_metrics(record, metrics)


@cli.command("sparsity")
@click.option("--checkpoint", "-c", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--mode", type=click.Choice(EVAL_MODES), default="median", show_default=True)
@click.option("--R", "R", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--lambda", "lam", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=0.5,
              show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
def cmd_sparsity(checkpoint_path, mode, R, lam, seed):
    """Per-layer mean inclusion, inclusion histograms and density."""
    ckpt = load_checkpoint(checkpoint_path)
    state = ckpt.state
    if mode in ("avg", "single"):
        rng = make_stream(seed, PREDICT)
        union = [np.zeros(m.shape, dtype=bool) for m in state.mu]
        for _ in range(R if mode == "avg" else 1):
            for u, gamma in zip(union, sample_masked(state, rng).gamma):
                u |= gamma
        report = sparsity_report(state, prediction_draws=union)
    elif mode == "postmean":
        report = sparsity_report(state, model=posterior_mean_model(state))
    else:
        try:
            model = select_point_model(state, ckpt.arch, mode, lam=lam)
        except InfeasibleModelError as e:
            logger.warning(f"{e}; density reported for the infeasible mask")
            model = median_model(state) if mode == "median" else threshold_model(state, lam)
        report = sparsity_report(state, model=model)
    _emit({"mode": mode, **report.to_dict()})


@cli.command("ood")
@click.option("--checkpoint", "-c", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--R", "R", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@dataset_options("test")
@click.option("--ood-dataset", type=click.Choice(["mnist", "fmnist", "synthetic"]), default="fmnist",
              show_default=True)
@click.option("--ood-images", type=click.Path(dir_okay=False))
@click.option("--ood-labels", type=click.Path(dir_okay=False))
def cmd_ood(checkpoint_path, R, seed, dataset, split, limit, images_path, labels_path, data_dir, ood_dataset,
            ood_images, ood_labels):
    """Entropy CDFs of model-averaged predictions in and out of the training domain."""
    ckpt = load_checkpoint(checkpoint_path)
    series = [
        ("in_domain", dataset, _load_dataset(dataset, split, limit, images_path, labels_path, data_dir, ckpt.seed)),
        ("out_of_domain", ood_dataset,
         _load_dataset(ood_dataset, split, limit, ood_images, ood_labels, data_dir, ckpt.seed + 1)),
    ]
    rng = make_stream(seed, PREDICT)
    for tag, name, data in series:
        _check_input_dim(ckpt.arch, data)
        summary = predict_averaged(ckpt.state, ckpt.arch, data.features, R, rng)
        cdf = entropy_cdf([summary])
        _emit({"series": tag, "dataset": name, "unit": "nats", "R": R, "n": len(data),
               "mean_entropy": float(np.mean(summary.entropy)), "cdf": [list(point) for point in cdf]})


@cli.command("accuracy-curve")
@click.option("--checkpoint", "-c", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--R-values", "R_values", default="1,2,5,10", show_default=True)
@click.option("--doubt-threshold", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.95,
              show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@dataset_options("test")
def cmd_accuracy_curve(checkpoint_path, R_values, doubt_threshold, seed, dataset, split, limit, images_path,
                       labels_path, data_dir):
    """Model-averaged accuracy as a function of the number of draws."""
    try:
        values = [int(v) for v in R_values.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"not a list of integers: {R_values}", param_hint="--R-values")
    if not values or min(values) < 1:
        raise click.BadParameter("draw counts must be positive", param_hint="--R-values")
    ckpt = load_checkpoint(checkpoint_path)
    data = _load_dataset(dataset, split, limit, images_path, labels_path, data_dir, ckpt.seed)
    _check_input_dim(ckpt.arch, data)
    for point in accuracy_curve(ckpt.state, ckpt.arch, data, values, make_stream(seed, PREDICT), doubt_threshold):
        _emit(point)


@cli.command("oracle-check")
@click.option("--draws", type=click.IntRange(min=2), default=10000, show_default=True)
@click.option("--kl-draws", type=click.IntRange(min=2), default=100000, show_default=True)
@click.option("--kl-states", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--z", type=click.FloatRange(0.0, min_open=True), default=3.0, show_default=True,
              help="Tolerance in standard errors")
@click.option("--quadrature-order", type=click.IntRange(min=5), default=7, show_default=True)
@click.option("--relaxed-points", type=click.IntRange(min=16), default=2 ** 16, show_default=True)
@click.option("--train-epochs", type=click.IntRange(min=0), default=400, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--inject-bias", type=float, default=0.0, help="Shift estimator means to exercise the harness")
@click.pass_context
def cmd_oracle_check(ctx, draws, kl_draws, kl_states, z, quadrature_order, relaxed_points, train_epochs, seed,
                     inject_bias):
    """Compare the stochastic estimators with exact enumeration on tiny networks."""
    cfg = OracleSuiteConfig(draws=draws, kl_draws=kl_draws, kl_states=kl_states, z=z,
                            quadrature_order=quadrature_order, relaxed_points=relaxed_points,
                            train_epochs=train_epochs, seed=seed, inject_bias=inject_bias)
    start = time.perf_counter()
    results = run_oracle_suite(cfg, progress=_progress(ctx))
    elapsed = time.perf_counter() - start
    for result in results:
        _emit(result.to_dict())
    if elapsed > ORACLE_TIME_BUDGET_S:
        logger.warning(f"oracle checks took {elapsed:.0f}s, over the {ORACLE_TIME_BUDGET_S:.0f}s budget")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise OracleCheckFailure(f"oracle checks failed: {', '.join(failed)}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="ssbnn", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except InfeasibleModelError as e:
        click.echo(f"error: {e}; diagnostics: {json.dumps(e.diagnostics)}; try a lower --lambda "
                   f"(for example 0.4, 0.3, 0.2)", err=True)
        return e.exit_code
    except SSBNNError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

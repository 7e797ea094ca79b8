#!/usr/bin/env python3
"""
ssbnn Scaled MNIST Reproduction
===============================

Desk-scale acceptance run: trains a 784,128,10 spike-and-slab network for 10
epochs on the first 10 000 MNIST training images, post-trains the median
probability model, and checks model averaging, point-model, doubt-subset,
sparsity and out-of-domain entropy criteria. Writes a JSON summary plus the
checkpoints and metrics files needed for byte-level determinism checks.

Requires MNIST and Fashion-MNIST IDX files under ``$SSBNN_DATA_DIR``.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict

import numpy as np

# Add ssbnn to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "python"))

from ssbnn.config import load_run_spec, setup_logging
from ssbnn.data.datasets import load_standard
from ssbnn.data.serializers import Checkpoint, save_checkpoint, write_metrics
from ssbnn.engine import TrainConfig, post_train, train
from ssbnn.errors import SSBNNError
from ssbnn.inference import evaluate, predict_averaged, sparsity_report
from ssbnn.model import NetworkArch, PriorConfig, VariationalState
from ssbnn.rng import INIT, PREDICT, TRAIN, make_stream

logger = logging.getLogger("ssbnn.scripts.reproduction")

DEFAULT_SPEC = Path(__file__).parent.parent / "config" / "mnist_scaled.yaml"
OOD_EXAMPLES = 2000


class ReproductionRunner:
    """Scaled MNIST acceptance experiment"""

    def __init__(self, spec: Dict[str, Any], output_dir: str = "output", data_dir: str = None):
        self.spec = spec
        self.data_dir = data_dir
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.results: Dict[str, Any] = {}

    def _config(self, command: str) -> Dict[str, Any]:
        shared = {k: v for k, v in self.spec.items() if k != "commands"}
        return {**shared, **self.spec.get("commands", {}).get(command, {})}

    def _train_config(self, settings: Dict[str, Any], **overrides) -> TrainConfig:
        fields = ("batch_size", "mc_samples", "lr_mu", "lr_rho", "lr_omega", "epochs", "estimator", "delta",
                  "baseline_decay", "seed", "kl_mode")
        values = {k: settings[k] for k in fields if k in settings}
        values.update(overrides)
        return TrainConfig(**values)

    def save_results(self, filename: str = "reproduction_summary.json") -> Path:
        output_file = self.output_dir / filename
        with open(output_file, "w") as f:
            json.dump(self.results, f, indent=2, sort_keys=True)
        logger.info(f"Results saved to: {output_file}")
        return output_file

    def run(self) -> bool:
        start = time.perf_counter()
        train_settings = self._config("train")
        post_settings = self._config("posttrain")
        eval_settings = self._config("eval")
        seed = int(train_settings.get("seed", 0))
        R = int(eval_settings.get("R", 10))
        doubt = float(eval_settings.get("doubt_threshold", 0.95))

        arch = NetworkArch.parse(train_settings["arch"])
        prior = PriorConfig(train_settings.get("psi", PriorConfig().psi),
                            train_settings.get("sigma_beta_sq", 1.0))
        train_data = load_standard("mnist", "train", self.data_dir).head(int(train_settings.get("limit", 10000)))
        test_data = load_standard("mnist", "test", self.data_dir)
        ood_data = load_standard("fmnist", "test", self.data_dir).head(OOD_EXAMPLES)
        logger.info(f"Training {arch} on {len(train_data)} images")

        metrics_path = self.output_dir / "metrics.jsonl"
        if metrics_path.exists():
            metrics_path.unlink()

        def record_epoch(phase):
            def callback(record, state):
                write_metrics({"epoch": record["epoch"], "elbo": record["elbo"], "phase": phase}, metrics_path)
            return callback

        config = self._train_config(train_settings)
        state = VariationalState.initialize(arch, prior, make_stream(seed, INIT))
        state, _ = train(state, prior, arch, train_data, config, make_stream(seed, TRAIN),
                         callbacks=[record_epoch("train")], progress=True)
        save_checkpoint(Checkpoint(arch, prior, state, seed, config.epochs, config.estimator, config.delta),
                        self.output_dir / "trained.ckpt")

        averaged = evaluate(state, arch, test_data, mode="avg", R=R, doubt_threshold=doubt,
                            rng=make_stream(seed, PREDICT), seed=seed)
        single = evaluate(state, arch, test_data, mode="single", doubt_threshold=doubt,
                          rng=make_stream(seed, PREDICT), seed=seed)
        layer_inclusion = sparsity_report(state).rho_per_layer

        post_config = self._train_config(post_settings, seed=seed)
        post_state, _ = post_train(state, "median_model", prior, arch, train_data, post_config,
                                   make_stream(seed, TRAIN), callbacks=[record_epoch("posttrain")], progress=True)
        save_checkpoint(Checkpoint(arch, prior, post_state, seed, config.epochs + post_config.epochs,
                                   config.estimator, config.delta), self.output_dir / "posttrained.ckpt")
        median = evaluate(post_state, arch, test_data, mode="median", rule="expected", doubt_threshold=doubt,
                          rng=make_stream(seed, PREDICT))
        for record in (averaged, single, median):
            write_metrics(record, metrics_path)

        rng = make_stream(seed, PREDICT)
        in_domain = predict_averaged(state, arch, test_data.features[:OOD_EXAMPLES], R, rng)
        out_of_domain = predict_averaged(state, arch, ood_data.features, R, rng)
        entropy_in = float(np.mean(in_domain.entropy))
        entropy_out = float(np.mean(out_of_domain.entropy))

        criteria = {
            "averaged_accuracy_at_least_0.90": averaged["accuracy_all"] >= 0.90,
            "averaging_beats_single_draw": averaged["accuracy_all"] >= single["accuracy_all"],
            "median_within_0.03_of_averaging": abs(median["accuracy_all"] - averaged["accuracy_all"]) <= 0.03,
            "doubt_subset_at_least_as_accurate": (averaged["accuracy_doubt"] is not None
                                                  and averaged["accuracy_doubt"] >= averaged["accuracy_all"]),
            "first_layer_inclusion_below_prior": layer_inclusion[0] < prior.psi,
            "ood_entropy_exceeds_in_domain": entropy_out > entropy_in,
        }
        self.results = {
            "arch": str(arch),
            "seed": seed,
            "averaged": averaged,
            "single": single,
            "median_posttrained": median,
            "rho_per_layer": layer_inclusion,
            "psi": prior.psi,
            "mean_entropy": {"mnist": entropy_in, "fmnist": entropy_out},
            "criteria": criteria,
            "passed": all(criteria.values()),
            "wall_time_s": time.perf_counter() - start,
        }
        for name, passed in criteria.items():
            logger.info(f"{name}: {'pass' if passed else 'FAIL'}")
        return self.results["passed"]


def main():
    parser = argparse.ArgumentParser(description="ssbnn scaled MNIST reproduction")
    parser.add_argument("--config", default=str(DEFAULT_SPEC), help="Run specification (YAML or JSON)")
    parser.add_argument("--output", "-o", default="output/reproduction", help="Output directory")
    parser.add_argument("--data-dir", default=None, help="Dataset root (defaults to $SSBNN_DATA_DIR)")
    parser.add_argument("--log-level", default=None, help="Logging level")
    args = parser.parse_args()

    setup_logging(args.log_level)
    try:
        runner = ReproductionRunner(load_run_spec(args.config), args.output, args.data_dir)
        passed = runner.run()
        runner.save_results()
    except SSBNNError as e:
        logger.error(f"Reproduction failed: {e}")
        sys.exit(e.exit_code)
    sys.exit(0 if passed else 1)


if __name__ == "__main__":
    main()

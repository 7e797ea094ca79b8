"""
ssbnn Validators
================

JSON schemas for metrics records, per-epoch training records and run
specification files, with validation helpers that raise ``ValidationError``.
"""

from typing import Any, Dict

from jsonschema import ValidationError as JsonSchemaError
from jsonschema import validate

from ..errors import SSBNNError


class ValidationError(SSBNNError):
    """Custom validation error"""
    pass


_NULLABLE_FRACTION = {"type": ["number", "null"], "minimum": 0.0, "maximum": 1.0}

METRICS_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "mode": {
            "type": "string",
            "enum": ["avg", "single", "median", "threshold", "postmean"],
            "description": "Inference mode",
        },
        "R": {"type": "integer", "minimum": 1, "description": "Number of prediction draws"},
        "accuracy_all": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "accuracy_doubt": _NULLABLE_FRACTION,
        "num_classified": {"type": "integer", "minimum": 0},
        "density": _NULLABLE_FRACTION,
        "rho_per_layer": {
            "type": "array",
            "items": {"type": "number", "minimum": 0.0, "maximum": 1.0},
            "minItems": 1,
        },
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "rule": {"type": "string", "enum": ["sample_beta", "expected_beta"]},
        "lambda": {"type": "number", "exclusiveMinimum": 0.0, "exclusiveMaximum": 1.0},
        "num_misclassified": {"type": "integer", "minimum": 0},
        "misclassified_truth_credible": _NULLABLE_FRACTION,
    },
    "required": ["mode", "R", "accuracy_all", "accuracy_doubt", "num_classified", "density",
                 "rho_per_layer", "seed"],
    "additionalProperties": True,
}

EPOCH_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "epoch": {"type": "integer", "minimum": 1},
        "elbo": {"type": "number"},
        "wall_time_s": {"type": "number", "minimum": 0.0},
        "phase": {"type": "string", "enum": ["train", "posttrain"]},
    },
    "required": ["epoch", "elbo"],
    "additionalProperties": False,
}

RUN_SPEC_SCHEMA = {
    "type": "object",
    "properties": {
        "arch": {"type": "string", "pattern": "^[0-9]+(,[0-9]+)+$"},
        "dataset": {"type": "string", "enum": ["mnist", "fmnist", "synthetic"]},
        "data_dir": {"type": "string", "minLength": 1},
        "limit": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "mc_samples": {"type": "integer", "minimum": 1},
        "lr_mu": {"type": "number", "minimum": 0.0},
        "lr_rho": {"type": "number", "minimum": 0.0},
        "lr_omega": {"type": "number", "minimum": 0.0},
        "estimator": {"type": "string", "enum": ["relaxed", "score_function"]},
        "delta": {"type": "number", "exclusiveMinimum": 0.0},
        "baseline_decay": {"type": "number", "minimum": 0.0, "exclusiveMaximum": 1.0},
        "kl_mode": {"type": "string", "enum": ["analytic", "monte_carlo"]},
        "psi": {"type": "number", "exclusiveMinimum": 0.0, "exclusiveMaximum": 1.0},
        "sigma_beta_sq": {"type": "number", "exclusiveMinimum": 0.0},
        "seed": {"type": "integer", "minimum": 0},
        "R": {"type": "integer", "minimum": 1},
        "doubt_threshold": {"type": "number", "minimum": 0.0, "exclusiveMaximum": 1.0},
        "commands": {
            "type": "object",
            "description": "Per-subcommand option defaults",
            "additionalProperties": {"type": "object"},
        },
    },
    "additionalProperties": False,
}


def validate_metrics_record(record: Dict[str, Any]) -> None:
    """Validate an evaluation metrics record"""
    try:
        validate(instance=record, schema=METRICS_RECORD_SCHEMA)
    except JsonSchemaError as e:
        raise ValidationError(f"Invalid metrics record: {e.message}")
    if record["accuracy_doubt"] is not None and record["num_classified"] == 0:
        raise ValidationError("Doubt-subset accuracy given for an empty classified subset")


def validate_epoch_record(record: Dict[str, Any]) -> None:
    try:
        validate(instance=record, schema=EPOCH_RECORD_SCHEMA)
    except JsonSchemaError as e:
        raise ValidationError(f"Invalid training record: {e.message}")


def validate_record(record: Dict[str, Any]) -> None:
    """Validate a JSON-lines record of either kind"""
    if not isinstance(record, dict) or not record:
        raise ValidationError("Record must be a non-empty object")
    if "epoch" in record:
        validate_epoch_record(record)
    else:
        validate_metrics_record(record)


def validate_run_spec(spec: Dict[str, Any]) -> None:
    """Validate a run specification loaded from YAML or JSON"""
    try:
        validate(instance=spec, schema=RUN_SPEC_SCHEMA)
    except JsonSchemaError as e:
        raise ValidationError(f"Invalid run specification: {e.message}")


def validate_file_path(file_path: str) -> None:
    """Validate an output file path"""
    if not file_path or not str(file_path).strip():
        raise ValidationError("File path cannot be empty")
    if "\x00" in str(file_path):
        raise ValidationError(f"File path contains invalid characters: {file_path!r}")

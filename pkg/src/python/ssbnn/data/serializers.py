"""
ssbnn Serializers
=================

Checkpoint persistence in the fixed little-endian "SSBN" binary format and
JSON-lines metrics records.

Checkpoint layout (version 1)::

    b"SSBN"
    u32     version
    u32     number of layer widths (L + 1)
    u32[]   layer widths
    i64     seed
    u32     epochs completed
    u8      estimator (0 relaxed, 1 score_function)
    f64     delta
    f64     psi
    f64     sigma_beta_sq
    then per layer: mu, rho, omega as f64, row-major
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..errors import (CheckpointError, CheckpointMagicError, CheckpointSizeError, CheckpointVersionError,
                      InvalidParameterError)
from ..model import NetworkArch, PriorConfig, VariationalState
from .validators import validate_file_path, validate_record

logger = logging.getLogger(__name__)

MAGIC = b"SSBN"
VERSION = 1
ESTIMATOR_CODES = {"relaxed": 0, "score_function": 1}
ESTIMATOR_NAMES = {code: name for name, code in ESTIMATOR_CODES.items()}
_METADATA = struct.Struct("<qIBddd")


@dataclass
class Checkpoint:
    arch: NetworkArch
    prior: PriorConfig
    state: VariationalState
    seed: int = 0
    epochs: int = 0
    estimator: str = "relaxed"
    delta: float = 0.1
    version: int = VERSION


class CheckpointSerializer:
    """Serializer for trained variational states"""

    @classmethod
    def serialize(cls, ckpt: Checkpoint) -> bytes:
        ckpt.state.validate(ckpt.arch)
        if ckpt.estimator not in ESTIMATOR_CODES:
            raise InvalidParameterError(f"unknown estimator {ckpt.estimator!r}")
        widths = ckpt.arch.layer_widths
        parts = [MAGIC, struct.pack("<II", VERSION, len(widths)), struct.pack(f"<{len(widths)}I", *widths),
                 _METADATA.pack(ckpt.seed, ckpt.epochs, ESTIMATOR_CODES[ckpt.estimator], ckpt.delta,
                                ckpt.prior.psi, ckpt.prior.sigma_beta_sq)]
        for mu, rho, omega in ckpt.state.layers():
            for array in (mu, rho, omega):
                parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes) -> Checkpoint:
        if data[:4] != MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {data[:4]!r} at offset 0")
        if len(data) < 12:
            raise CheckpointSizeError(f"checkpoint header truncated at offset {len(data)}")
        version, n_widths = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version} at offset 4")
        offset = 12
        header_end = offset + 4 * n_widths + _METADATA.size
        if n_widths < 2 or len(data) < header_end:
            raise CheckpointSizeError(f"checkpoint header truncated at offset {len(data)}")
        widths = struct.unpack_from(f"<{n_widths}I", data, offset)
        offset += 4 * n_widths
        seed, epochs, code, delta, psi, sigma_beta_sq = _METADATA.unpack_from(data, offset)
        offset += _METADATA.size
        if code not in ESTIMATOR_NAMES:
            raise CheckpointError(f"unknown estimator code {code} at offset {offset - 25}")

        try:
            arch = NetworkArch(widths)
            prior = PriorConfig(psi, sigma_beta_sq)
        except InvalidParameterError as e:
            raise CheckpointError(f"invalid checkpoint header: {e}")
        expected = offset + 3 * 8 * arch.total_slots
        if len(data) != expected:
            raise CheckpointSizeError(f"checkpoint has {len(data)} bytes, layout needs {expected}")

        groups = {"mu": [], "rho": [], "omega": []}
        for shape in arch.weight_shapes:
            count = shape[0] * shape[1]
            for name in ("mu", "rho", "omega"):
                array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
                groups[name].append(array.reshape(shape).astype(np.float64))
                offset += 8 * count
        state = VariationalState(groups["mu"], groups["rho"], groups["omega"])
        return Checkpoint(arch, prior, state, seed, epochs, ESTIMATOR_NAMES[code], delta, version)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    validate_file_path(str(path))
    data = CheckpointSerializer.serialize(ckpt)
    with open(path, "wb") as f:
        f.write(data)
    logger.info(f"Checkpoint saved: {path} ({len(data)} bytes)")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    try:
        ckpt = CheckpointSerializer.deserialize(data)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}")
    logger.info(f"Checkpoint loaded: {path}")
    return ckpt


class MetricsSerializer:
    """Serializer for JSON-lines records"""

    @classmethod
    def serialize(cls, record: Dict[str, Any]) -> str:
        validate_record(record)
        return json.dumps(record, allow_nan=False, sort_keys=True)

    @classmethod
    def deserialize(cls, line: str) -> Dict[str, Any]:
        return json.loads(line)


def write_metrics(record: Dict[str, Any], path: Union[str, Path]) -> None:
    """Append one validated record as a UTF-8 JSON line."""
    validate_file_path(str(path))
    line = MetricsSerializer.serialize(record)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def read_metrics(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [MetricsSerializer.deserialize(line) for line in f if line.strip()]

"""Plain-text (JSON) checkpoints: architecture, scaler, flat parameters, metadata."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Scaler
from .errors import CheckpointError
from .net import Architecture, ModelParams

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParams
    scaler: Scaler
    metadata: dict = field(default_factory=dict)

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    def predict(self, raw_x) -> np.ndarray:
        """Predict (T, R, A) for unscaled design features of shape (B, 8)."""
        from .net import predict_batch

        return predict_batch(self.params, self.scaler.transform(np.atleast_2d(raw_x)))


def _floats(values) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def dumps(ckpt: Checkpoint) -> str:
    # the parameter array is spliced in by hand to pin 17 significant digits
    head = {
        "format_version": FORMAT_VERSION,
        "architecture": ckpt.arch.to_dict(),
        "scaler": {"mean": "@MEAN@", "std": "@STD@"},
        "metadata": ckpt.metadata,
        "params": "@PARAMS@",
    }
    text = json.dumps(head, indent=1, sort_keys=True)
    text = text.replace('"@MEAN@"', _floats(ckpt.scaler.mean))
    text = text.replace('"@STD@"', _floats(ckpt.scaler.std))
    text = text.replace('"@PARAMS@"', _floats(ckpt.params.vector))
    return text + "\n"


def loads(text: str, expected_arch: Architecture | None = None) -> Checkpoint:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {d.get('format_version')!r}")
    try:
        arch = Architecture.from_dict(d["architecture"])
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"bad architecture descriptor: {exc}") from None
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"checkpoint architecture {arch} does not match expected {expected_arch}")
    params = np.array(d["params"], dtype=float)
    if params.size != arch.param_count():
        raise CheckpointError(f"checkpoint holds {params.size} parameters, architecture needs {arch.param_count()}")
    return Checkpoint(ModelParams(params, arch), Scaler.from_dict(d["scaler"]), d.get("metadata", {}))


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ckpt))


def load(path, expected_arch: Architecture | None = None) -> Checkpoint:
    return loads(Path(path).read_text(), expected_arch)

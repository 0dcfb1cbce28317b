"""Hubcor training loss (Huber + correlation) and the MSE / MAE / Pearson metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError

# below this centered sum of squares a channel counts as constant
_DEGENERATE_SS = 1e-24


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 0.1
    corr_weight: float = 0.5
    corr_degenerate_value: float = 0.0

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValidationError("huber_delta must be > 0")
        if not self.corr_weight >= 0:
            raise ValidationError("corr_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    cc: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "cc_percent": 100.0 * self.cc}

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(mse=float(d["mse"]), mae=float(d["mae"]), cc=float(d["cc_percent"]) / 100.0)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValidationError("metrics need at least one element")
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    return pred, target


def huber(err, delta: float) -> np.ndarray:
    a = np.abs(err)
    return np.where(a <= delta, 0.5 * err**2, delta * (a - 0.5 * delta))


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def channel_correlations(pred, target, degenerate_value: float = 0.0):
    """Per-column Pearson r plus the centered arrays and norms needed for its gradient."""
    p, t = _pair(pred, target)
    if p.shape[0] < 2:
        raise ValidationError("Pearson correlation needs at least 2 samples")
    pc = p - p.mean(axis=0)
    tc = t - t.mean(axis=0)
    pss = np.sum(pc * pc, axis=0)
    tss = np.sum(tc * tc, axis=0)
    ok = (pss > _DEGENERATE_SS) & (tss > _DEGENERATE_SS)
    denom = np.sqrt(np.where(ok, pss * tss, 1.0))
    r = np.where(ok, np.sum(pc * tc, axis=0) / denom, degenerate_value)
    return np.clip(r, -1.0, 1.0), ok, pc, tc, pss, tss


def pearson_cc(pred, target, degenerate_value: float = 0.0) -> float:
    r, *_ = channel_correlations(pred, target, degenerate_value)
    return float(np.mean(r))


def evaluate(pred, target, degenerate_value: float = 0.0) -> Metrics:
    return Metrics(mse(pred, target), mae(pred, target), pearson_cc(pred, target, degenerate_value))


def hubcor_loss(pred, target, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Return ``(loss, dloss/dpred)``.

    loss = mean Huber over all elements + corr_weight * (1 - mean per-channel r).
    """
    p, t = _pair(pred, target)
    if not np.all(np.isfinite(p)):
        raise ValidationError("predictions must be finite")
    err = p - t
    n_el = err.size
    loss = float(np.sum(huber(err, cfg.huber_delta)) / n_el)
    grad = np.clip(err, -cfg.huber_delta, cfg.huber_delta) / n_el

    if cfg.corr_weight > 0:
        if p.shape[0] < 2:
            raise ValidationError("hubcor_loss with corr_weight > 0 needs batch size >= 2")
        r, ok, pc, tc, pss, tss = channel_correlations(p, t, cfg.corr_degenerate_value)
        n_ch = p.shape[1]
        loss += cfg.corr_weight * (1.0 - float(np.mean(r)))
        # dr/dp_i = tc_i / sqrt(pss*tss) - r * pc_i / pss   (centering terms cancel)
        safe_pss = np.where(ok, pss, 1.0)
        dr = tc / np.sqrt(np.where(ok, pss * tss, 1.0)) - r * pc / safe_pss
        dr = np.where(ok, dr, 0.0)
        grad = grad - (cfg.corr_weight / n_ch) * dr

    return loss, grad.reshape(np.shape(pred))

"""Comparison methods: plain supervised training of the same network, and k-NN regression."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset, MetaPools, Scaler, SplitSpec, fit_scaler
from .errors import DivergenceError, ValidationError
from .metatrain import AdaBeliefConfig, AdaBeliefState, adabelief_update
from .net import Architecture, forward, init_params, loss_and_grad
from .objective import LossConfig, Metrics, evaluate, hubcor_loss
from .oracle import DesignVector, ResponseTriple

BASELINE_KINDS = ("plain_dnn", "knn")


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "plain_dnn"
    epochs: int = 200
    lr: float = 0.0003
    batch_size: int = 256
    k: int = 5
    holdout_fraction: float = 0.1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    arch: Architecture = field(default_factory=Architecture)
    adabelief: AdaBeliefConfig = field(default_factory=AdaBeliefConfig)

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValidationError(f"baseline kind must be one of {BASELINE_KINDS}")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if not 0 < self.holdout_fraction < 1:
            raise ValidationError("holdout_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "arch" in d:
            d["arch"] = Architecture.from_dict(d["arch"])
        if "adabelief" in d:
            d["adabelief"] = AdaBeliefConfig(**d["adabelief"])
        return cls(**d)


def train_region(pool: Dataset, split: SplitSpec) -> Dataset:
    sup, qry = split.region_masks(pool.freq_ghz, "train")
    return pool.take(np.flatnonzero(sup | qry))


def holdout_split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng([seed, 0x401D]).permutation(len(data))
    n_hold = max(2, int(round(fraction * len(data))))
    return data.take(np.sort(perm[n_hold:])), data.take(np.sort(perm[:n_hold]))


def train_plain(pool, split: SplitSpec, cfg: BaselineConfig = BaselineConfig(), log=None):
    """Supervised training on the meta-train support and query regions together.

    A held-out slice of the same regions selects the best epoch; the result is
    meant to be scored zero-shot (no adaptation) on the eval query region.
    Returns ``(checkpoint, history)``.
    """
    data = train_region(pool.train if isinstance(pool, MetaPools) else Dataset.from_samples(pool), split)
    if len(data) < 4:
        raise ValidationError(f"train region holds only {len(data)} samples")
    scaler = fit_scaler(data)
    fit, hold = holdout_split(data, cfg.holdout_fraction, cfg.seed)
    xf, yf = scaler.transform(fit.x), fit.y
    xh, yh = scaler.transform(hold.x), hold.y
    p = init_params(cfg.arch, cfg.seed)
    state = AdaBeliefState.fresh(len(p))
    rng = np.random.default_rng([cfg.seed, 0xB5])
    best, best_loss, history = p, math.inf, []
    n = len(xf)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - 1, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, grad = loss_and_grad(p, xf[idx], yf[idx], cfg.loss, "train", rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"plain baseline diverged at epoch {epoch}")
            p, state = adabelief_update(state, p, grad, cfg.lr, cfg.adabelief)
            losses.append(loss)
        hold_loss, _ = hubcor_loss(forward(p, xh, "eval")[0], yh, cfg.loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "holdout_loss": hold_loss})
        if hold_loss < best_loss:
            best, best_loss = p, hold_loss
        if log:
            log(f"epoch {epoch:4d}  train {history[-1]['train_loss']:.5f}  holdout {hold_loss:.5f}")
    meta = {"kind": "plain_dnn", "seed": cfg.seed, "split": split.name}
    return Checkpoint(best, scaler, meta), history


def zero_shot_metrics(ckpt: Checkpoint, data: Dataset, degenerate_value: float = 0.0) -> Metrics:
    return evaluate(ckpt.predict(data.x), data.y, degenerate_value)


def eval_query_region(pool: Dataset, split: SplitSpec) -> Dataset:
    _, qry = split.region_masks(pool.freq_ghz, "eval")
    return pool.take(np.flatnonzero(qry))


# -- k nearest neighbours ------------------------------------------------------------


def knn_predict_array(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray, k: int) -> np.ndarray:
    """k-NN mean on already-scaled features; ties go to the lower training index."""
    train_x = np.asarray(train_x, dtype=float)
    query_x = np.atleast_2d(np.asarray(query_x, dtype=float))
    if len(train_x) == 0:
        raise ValidationError("k-NN needs a non-empty training set")
    if k > len(train_x):
        raise ValidationError(f"k={k} exceeds training set size {len(train_x)}")
    out = np.empty((len(query_x), train_y.shape[1]))
    for start in range(0, len(query_x), 32):
        q = query_x[start : start + 32]
        d2 = np.sum((q[:, None, :] - train_x[None, :, :]) ** 2, axis=2)
        # stable sort keeps index order among equal distances
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start : start + len(q)] = train_y[nn].mean(axis=1)
    return out


def knn_predict(train, scaler: Scaler, x: DesignVector, k: int) -> ResponseTriple:
    data = Dataset.from_samples(train)
    pred = knn_predict_array(scaler.transform(data.x), data.y, scaler.transform(x.to_array()[None, :]), k)[0]
    return ResponseTriple(*map(float, pred))

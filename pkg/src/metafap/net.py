"""Branched surrogate network with a hand-written reverse pass.

Parameters live in one flat float64 vector so that meta-learning updates are
plain vector arithmetic.  Input column 0 (scaled frequency) feeds the
frequency branch, columns 1..7 feed the other-features branch and all eight
feed the gating network; the three branch outputs are concatenated and sent
through the head, which ends in a softmax over (T, R, A).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import ValidationError
from .objective import LossConfig, hubcor_loss

GATE_MODES = ("concat", "multiply")
DROPPABLE_BRANCHES = (None, "freq", "other")


@dataclass(frozen=True)
class Architecture:
    n_features: int = 8
    gating_hidden: int = 12
    gating_out: int = 8
    other_hidden: int = 24
    other_out: int = 16
    freq_hidden: int = 8
    freq_out: int = 8
    head_hidden: int = 48
    head_hidden2: int = 24
    n_outputs: int = 3
    dropout_rate: float = 0.1
    # "multiply" additionally gates the branch inputs with h_g
    gate_mode: str = "concat"
    # ablation: replace a branch output with zeros of matching width
    drop_branch: str | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValidationError(f"gate_mode must be one of {GATE_MODES}")
        if self.drop_branch not in DROPPABLE_BRANCHES:
            raise ValidationError(f"drop_branch must be one of {DROPPABLE_BRANCHES}")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.gate_mode == "multiply" and self.gating_out != self.n_features:
            raise ValidationError("multiplicative gating needs gating_out == n_features")

    @property
    def concat_width(self) -> int:
        return self.gating_out + self.other_out + self.freq_out

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        n_other = self.n_features - 1
        c = self.concat_width
        return [
            ("gate1.w", (self.n_features, self.gating_hidden)),
            ("gate1.b", (self.gating_hidden,)),
            ("gate2.w", (self.gating_hidden, self.gating_out)),
            ("gate2.b", (self.gating_out,)),
            ("other1.w", (n_other, self.other_hidden)),
            ("other1.b", (self.other_hidden,)),
            ("other_ln.gain", (self.other_hidden,)),
            ("other_ln.offset", (self.other_hidden,)),
            ("other2.w", (self.other_hidden, self.other_out)),
            ("other2.b", (self.other_out,)),
            ("freq1.w", (1, self.freq_hidden)),
            ("freq1.b", (self.freq_hidden,)),
            ("freq2.w", (self.freq_hidden, self.freq_out)),
            ("freq2.b", (self.freq_out,)),
            ("head1.w", (c, self.head_hidden)),
            ("head1.b", (self.head_hidden,)),
            ("head_ln.gain", (self.head_hidden,)),
            ("head_ln.offset", (self.head_hidden,)),
            ("head2.w", (self.head_hidden, self.head_hidden2)),
            ("head2.b", (self.head_hidden2,)),
            ("out.w", (self.head_hidden2, self.n_outputs)),
            ("out.b", (self.n_outputs,)),
        ]

    def param_count(self) -> int:
        """Closed-form count: dense layers (in+1)*out, layer norms 2*width."""
        n_other = self.n_features - 1
        dense = lambda i, o: (i + 1) * o  # noqa: E731
        return (
            dense(self.n_features, self.gating_hidden)
            + dense(self.gating_hidden, self.gating_out)
            + dense(n_other, self.other_hidden)
            + 2 * self.other_hidden
            + dense(self.other_hidden, self.other_out)
            + dense(1, self.freq_hidden)
            + dense(self.freq_hidden, self.freq_out)
            + dense(self.concat_width, self.head_hidden)
            + 2 * self.head_hidden
            + dense(self.head_hidden, self.head_hidden2)
            + dense(self.head_hidden2, self.n_outputs)
        )

    @cached_property
    def layout(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, pos = {}, 0
        for name, shape in self.shapes():
            size = int(np.prod(shape))
            out[name] = (slice(pos, pos + size), shape)
            pos += size
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ModelParams:
    vector: np.ndarray
    arch: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        v = np.array(self.vector, dtype=float).ravel()
        if v.size != self.arch.param_count():
            raise ValidationError(f"parameter vector has {v.size} entries, architecture needs {self.arch.param_count()}")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    def __len__(self) -> int:
        return self.vector.size

    @cached_property
    def _views(self) -> dict[str, np.ndarray]:
        return {name: self.vector[sl].reshape(shape) for name, (sl, shape) in self.arch.layout.items()}

    def views(self) -> dict[str, np.ndarray]:
        """Read-only per-layer views into the flat vector."""
        return self._views

    def with_vector(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(vector, self.arch)


def init_params(arch: Architecture = Architecture(), seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    v = np.zeros(arch.param_count())
    for name, (sl, shape) in arch.layout.items():
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            v[sl] = rng.uniform(-limit, limit, size=shape).ravel()
        elif kind == "gain":
            v[sl] = 1.0
    return ModelParams(v, arch)


@dataclass
class ForwardCache:
    """Intermediate values from `forward`, consumed by `backward`."""

    arch: Architecture
    n_params: int
    x: np.ndarray
    gate_pre1: np.ndarray
    gate_act1: np.ndarray
    h_g: np.ndarray
    x_branch: np.ndarray
    other_pre1: np.ndarray
    other_act1: np.ndarray
    other_ln: tuple
    other_mask: np.ndarray
    other_pre2: np.ndarray
    h_o: np.ndarray
    freq_pre1: np.ndarray
    freq_act1: np.ndarray
    freq_pre2: np.ndarray
    h_f: np.ndarray
    h_c: np.ndarray
    head_pre1: np.ndarray
    head_act1: np.ndarray
    head_ln: tuple
    head_mask: np.ndarray
    head_pre2: np.ndarray
    head_act2: np.ndarray
    logits: np.ndarray
    output: np.ndarray


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _row_mean(z):
    # BLAS matvec beats ufunc.reduce along short rows
    return (z @ np.full((z.shape[1], 1), 1.0 / z.shape[1]))


def _layer_norm(z, gain, offset, eps):
    zc = z - _row_mean(z)
    inv = 1.0 / np.sqrt(_row_mean(zc * zc) + eps)
    zhat = zc * inv
    return zhat * gain + offset, (zhat, inv)


def _layer_norm_backward(dy, gain, stats):
    zhat, inv = stats
    dzhat = dy * gain
    dz = inv * (dzhat - _row_mean(dzhat) - zhat * _row_mean(dzhat * zhat))
    return dz, np.sum(dy * zhat, axis=0), np.sum(dy, axis=0)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(shape, rate, rng):
    if rate == 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward(p: ModelParams, x, mode: str = "eval", rng: np.random.Generator | None = None):
    """Run the network on a batch ``x`` of shape (B, 8) (a single row is accepted).

    Returns ``(output, cache)`` with output of shape (B, 3).  Dropout is applied
    only in ``mode="train"`` and then needs `rng`.
    """
    arch = p.arch
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.n_features:
        raise ValidationError(f"input must have shape (B, {arch.n_features}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("network input must be finite")
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train" and arch.dropout_rate > 0
    if training and rng is None:
        raise ValidationError("train-mode forward needs an rng for dropout")
    w = p.views()
    b = x.shape[0]

    gate_pre1 = x @ w["gate1.w"] + w["gate1.b"]
    gate_act1 = _relu(gate_pre1)
    h_g = _sigmoid(gate_act1 @ w["gate2.w"] + w["gate2.b"])
    x_branch = x * h_g if arch.gate_mode == "multiply" else x

    if arch.drop_branch == "other":
        other_pre1 = other_act1 = other_mask = other_pre2 = None
        other_ln = None
        h_o = np.zeros((b, arch.other_out))
    else:
        other_pre1 = x_branch[:, 1:] @ w["other1.w"] + w["other1.b"]
        other_act1 = _relu(other_pre1)
        other_norm, other_ln = _layer_norm(other_act1, w["other_ln.gain"], w["other_ln.offset"], arch.ln_eps)
        other_mask = _dropout_mask(other_norm.shape, arch.dropout_rate, rng) if training else None
        if other_mask is not None:
            other_norm = other_norm * other_mask
        other_pre2 = other_norm @ w["other2.w"] + w["other2.b"]
        h_o = _relu(other_pre2)

    if arch.drop_branch == "freq":
        freq_pre1 = freq_act1 = freq_pre2 = None
        h_f = np.zeros((b, arch.freq_out))
    else:
        freq_pre1 = x_branch[:, :1] @ w["freq1.w"] + w["freq1.b"]
        freq_act1 = _relu(freq_pre1)
        freq_pre2 = freq_act1 @ w["freq2.w"] + w["freq2.b"]
        h_f = _relu(freq_pre2)

    h_c = np.concatenate([h_g, h_o, h_f], axis=1)
    head_pre1 = h_c @ w["head1.w"] + w["head1.b"]
    head_act1 = _relu(head_pre1)
    head_norm, head_ln = _layer_norm(head_act1, w["head_ln.gain"], w["head_ln.offset"], arch.ln_eps)
    head_mask = _dropout_mask(head_norm.shape, arch.dropout_rate, rng) if training else None
    if head_mask is not None:
        head_norm = head_norm * head_mask
    head_pre2 = head_norm @ w["head2.w"] + w["head2.b"]
    head_act2 = _relu(head_pre2)
    logits = head_act2 @ w["out.w"] + w["out.b"]
    output = _softmax(logits)

    cache = ForwardCache(
        arch, len(p), x, gate_pre1, gate_act1, h_g, x_branch,
        other_pre1, other_act1, other_ln, other_mask, other_pre2, h_o,
        freq_pre1, freq_act1, freq_pre2, h_f, h_c,
        head_pre1, head_act1, head_ln, head_mask, head_pre2, head_act2, logits, output,
    )
    return output, cache


def backward_from_output(p: ModelParams, cache: ForwardCache, d_output: np.ndarray) -> np.ndarray:
    """Gradient of the parameters given dloss/d(softmax output)."""
    if cache.arch != p.arch or cache.n_params != len(p):
        raise ValidationError("forward cache was produced with a different architecture")
    arch = p.arch
    w = p.views()
    grad = np.zeros(len(p))
    g = {name: grad[sl].reshape(shape) for name, (sl, shape) in arch.layout.items()}

    y = cache.output
    dz = y * (d_output - np.sum(d_output * y, axis=1, keepdims=True))
    g["out.w"][...] = cache.head_act2.T @ dz
    g["out.b"][...] = dz.sum(axis=0)
    d = (dz @ w["out.w"].T) * (cache.head_pre2 > 0)
    head_norm = cache.head_ln[0] * w["head_ln.gain"] + w["head_ln.offset"]
    if cache.head_mask is not None:
        head_norm = head_norm * cache.head_mask
    g["head2.w"][...] = head_norm.T @ d
    g["head2.b"][...] = d.sum(axis=0)
    d = d @ w["head2.w"].T
    if cache.head_mask is not None:
        d = d * cache.head_mask
    d, g["head_ln.gain"][...], g["head_ln.offset"][...] = _layer_norm_backward(d, w["head_ln.gain"], cache.head_ln)
    d = d * (cache.head_pre1 > 0)
    g["head1.w"][...] = cache.h_c.T @ d
    g["head1.b"][...] = d.sum(axis=0)
    d_hc = d @ w["head1.w"].T

    n_g, n_o = arch.gating_out, arch.other_out
    d_hg = d_hc[:, :n_g].copy()
    d_ho = d_hc[:, n_g : n_g + n_o]
    d_hf = d_hc[:, n_g + n_o :]
    d_xbranch = np.zeros_like(cache.x) if arch.gate_mode == "multiply" else None

    if arch.drop_branch != "freq":
        d = d_hf * (cache.freq_pre2 > 0)
        g["freq2.w"][...] = cache.freq_act1.T @ d
        g["freq2.b"][...] = d.sum(axis=0)
        d = (d @ w["freq2.w"].T) * (cache.freq_pre1 > 0)
        g["freq1.w"][...] = cache.x_branch[:, :1].T @ d
        g["freq1.b"][...] = d.sum(axis=0)
        if d_xbranch is not None:
            d_xbranch[:, :1] = d @ w["freq1.w"].T

    if arch.drop_branch != "other":
        d = d_ho * (cache.other_pre2 > 0)
        other_norm = cache.other_ln[0] * w["other_ln.gain"] + w["other_ln.offset"]
        if cache.other_mask is not None:
            other_norm = other_norm * cache.other_mask
        g["other2.w"][...] = other_norm.T @ d
        g["other2.b"][...] = d.sum(axis=0)
        d = d @ w["other2.w"].T
        if cache.other_mask is not None:
            d = d * cache.other_mask
        d, g["other_ln.gain"][...], g["other_ln.offset"][...] = _layer_norm_backward(
            d, w["other_ln.gain"], cache.other_ln
        )
        d = d * (cache.other_pre1 > 0)
        g["other1.w"][...] = cache.x_branch[:, 1:].T @ d
        g["other1.b"][...] = d.sum(axis=0)
        if d_xbranch is not None:
            d_xbranch[:, 1:] = d @ w["other1.w"].T

    if d_xbranch is not None:
        d_hg += d_xbranch * cache.x
    d = d_hg * cache.h_g * (1.0 - cache.h_g)
    g["gate2.w"][...] = cache.gate_act1.T @ d
    g["gate2.b"][...] = d.sum(axis=0)
    d = (d @ w["gate2.w"].T) * (cache.gate_pre1 > 0)
    g["gate1.w"][...] = cache.x.T @ d
    g["gate1.b"][...] = d.sum(axis=0)
    return grad


def backward(p: ModelParams, cache: ForwardCache, target, loss_cfg: LossConfig = LossConfig()):
    """Hubcor loss of the cached prediction against `target` and its parameter gradient."""
    target = np.asarray(target, dtype=float).reshape(cache.output.shape)
    loss, d_output = hubcor_loss(cache.output, target, loss_cfg)
    return loss, backward_from_output(p, cache, d_output)


def loss_and_grad(p: ModelParams, x, y, loss_cfg: LossConfig = LossConfig(), mode="eval", rng=None):
    _, cache = forward(p, x, mode, rng)
    return backward(p, cache, y, loss_cfg)


def predict_batch(p: ModelParams, xs) -> np.ndarray:
    """Eval-mode predictions for scaled feature rows; returns shape (B, 3)."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return np.empty((0, p.arch.n_outputs))
    return forward(p, xs, "eval")[0]

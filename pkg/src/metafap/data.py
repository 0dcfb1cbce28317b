"""Dataset generation, CSV persistence, feature scaling and episodic task sampling."""
from __future__ import annotations

import csv
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .oracle import (
    ARRAY_SIZES,
    CVB_RANGE_PF,
    CVT_RANGE_FF,
    FEATURE_NAMES,
    FREQ_BANDS_GHZ,
    LV_RANGE_PH,
    RV_RANGE_OHM,
    SPACING_RANGE,
    TARGET_NAMES,
    THETA_RANGE_DEG,
    DesignVector,
    OracleConfig,
    ResponseTriple,
    in_freq_domain,
    invalid_rows,
    response_array,
)

CSV_HEADER = FEATURE_NAMES + TARGET_NAMES
DEFAULT_N_SAMPLES = 50_000

Interval = tuple[float, float]


@dataclass(frozen=True)
class Sample:
    x: DesignVector
    y: ResponseTriple


@dataclass(frozen=True, eq=False)
class Dataset(Sequence):
    """Column-major sample store; behaves as a read-only sequence of `Sample`.

    `x` holds raw (unscaled) design features in CSV column order, `y` the
    transmittance/reflectance/absorbance targets.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float).reshape(-1, len(FEATURE_NAMES))
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1, len(TARGET_NAMES))
        if len(x) != len(y):
            raise ValidationError(f"{len(x)} feature rows but {len(y)} target rows")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.x[i], self.y[i])
        return Sample(DesignVector.from_array(self.x[i]), ResponseTriple(*map(float, self.y[i])))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    @property
    def freq_ghz(self) -> np.ndarray:
        return self.x[:, 0]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if isinstance(samples, Dataset):
            return samples
        if not samples:
            return cls(np.empty((0, len(FEATURE_NAMES))), np.empty((0, len(TARGET_NAMES))))
        return cls(
            np.stack([s.x.to_array() for s in samples]),
            np.stack([s.y.to_array() for s in samples]),
        )

    def equals(self, other: "Dataset") -> bool:
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)


def sample_design_features(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over the design domain; frequency mass follows band length."""
    lengths = np.array([hi - lo for lo, hi in FREQ_BANDS_GHZ])
    u = rng.uniform(0.0, lengths.sum(), n)
    freq = np.empty(n)
    offset = 0.0
    for (lo, hi), length in zip(FREQ_BANDS_GHZ, lengths):
        sel = (u >= offset) & (u < offset + length)
        freq[sel] = lo + (u[sel] - offset)
        offset += length
    cols = [freq]
    for lo, hi in (THETA_RANGE_DEG, SPACING_RANGE, CVT_RANGE_FF, CVB_RANGE_PF, RV_RANGE_OHM, LV_RANGE_PH):
        cols.append(rng.uniform(lo, hi, n))
    cols.append(rng.choice(np.array(ARRAY_SIZES, dtype=float), n))
    return np.column_stack(cols)


def generate_dataset(n_samples: int, cfg: OracleConfig | None = None, seed: int = 0) -> Dataset:
    if n_samples <= 0:
        raise ValidationError(f"n_samples must be positive, got {n_samples}")
    rng = np.random.default_rng(seed)
    x = sample_design_features(n_samples, rng)
    return Dataset(x, response_array(x, cfg or OracleConfig()))


def frequency_sweep(base: DesignVector, freqs_ghz, cfg: OracleConfig | None = None) -> Dataset:
    """Oracle labels along a frequency grid with every other feature held fixed.

    Grid points falling in the 11-15 GHz gap are dropped.
    """
    freqs = np.asarray(freqs_ghz, dtype=float)
    freqs = freqs[in_freq_domain(freqs)]
    x = np.repeat(base.to_array()[None, :], len(freqs), axis=0)
    x[:, 0] = freqs
    return Dataset(x, response_array(x, cfg or OracleConfig()))


# -- frequency splits ---------------------------------------------------------


def _normalize_intervals(name: str, intervals) -> tuple[Interval, ...]:
    out = []
    for iv in intervals:
        lo, hi = (float(v) for v in iv)
        if not lo < hi:
            raise ValidationError(f"{name}: interval {iv!r} must satisfy lower < upper")
        out.append((lo, hi))
    if not out:
        raise ValidationError(f"{name}: at least one interval required")
    return tuple(out)


def _overlap(a: tuple[Interval, ...], b: tuple[Interval, ...]) -> float:
    return sum(max(0.0, min(ah, bh) - max(al, bl)) for al, ah in a for bl, bh in b)


def interval_mask(freq_ghz: np.ndarray, intervals: Sequence[Interval]) -> np.ndarray:
    freq = np.asarray(freq_ghz, dtype=float)
    mask = np.zeros(freq.shape, dtype=bool)
    for lo, hi in intervals:
        mask |= (freq >= lo) & (freq <= hi)
    return mask


@dataclass(frozen=True)
class SplitSpec:
    train_support_ghz: tuple[Interval, ...]
    train_query_ghz: tuple[Interval, ...]
    eval_support_ghz: tuple[Interval, ...]
    eval_query_ghz: tuple[Interval, ...]
    name: str = "custom"

    def __post_init__(self):
        for f in ("train_support_ghz", "train_query_ghz", "eval_support_ghz", "eval_query_ghz"):
            object.__setattr__(self, f, _normalize_intervals(f, getattr(self, f)))
        if self.name not in ("primary", "easy", "hard", "custom"):
            raise ValidationError(f"unknown split name {self.name!r}")
        # shared endpoints are fine; positive-length overlap is not
        if _overlap(self.train_support_ghz, self.train_query_ghz) > 0:
            raise ValidationError("train query intervals overlap train support intervals")
        if _overlap(self.eval_support_ghz, self.eval_query_ghz) > 0:
            raise ValidationError("eval query intervals overlap eval support intervals")

    def regions(self, phase: str) -> tuple[tuple[Interval, ...], tuple[Interval, ...]]:
        if phase == "train":
            return self.train_support_ghz, self.train_query_ghz
        if phase == "eval":
            return self.eval_support_ghz, self.eval_query_ghz
        raise ValidationError(f"phase must be 'train' or 'eval', got {phase!r}")

    def region_masks(self, freq_ghz, phase: str) -> tuple[np.ndarray, np.ndarray]:
        """Boolean (support, query) membership; a shared endpoint counts as support."""
        sup, qry = self.regions(phase)
        s = interval_mask(freq_ghz, sup)
        return s, interval_mask(freq_ghz, qry) & ~s

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train_support_ghz": [list(iv) for iv in self.train_support_ghz],
            "train_query_ghz": [list(iv) for iv in self.train_query_ghz],
            "eval_support_ghz": [list(iv) for iv in self.eval_support_ghz],
            "eval_query_ghz": [list(iv) for iv in self.eval_query_ghz],
        }

    @classmethod
    def from_dict(cls, d) -> "SplitSpec":
        if isinstance(d, str):
            return preset_split(d)
        d = dict(d)
        if set(d) == {"name"}:
            return preset_split(d["name"])
        return cls(**d)


_PRESETS = {
    "primary": (((5, 11), (15, 16.5)), ((16.5, 19),), ((19, 22),), ((22, 25),)),
    "easy": (((5, 11), (15, 17)), ((17, 20),), ((20, 22.5),), ((22.5, 25),)),
    "hard": (((5, 11), (15, 16)), ((16, 18),), ((18, 21.5),), ((21.5, 25),)),
}
SPLIT_NAMES = tuple(_PRESETS)


def preset_split(name: str) -> SplitSpec:
    if name not in _PRESETS:
        raise ValidationError(f"unknown split {name!r}; valid names: {', '.join(SPLIT_NAMES)}")
    return SplitSpec(*_PRESETS[name], name=name)


# -- scaling --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).copy()
        std = np.asarray(self.std, dtype=float).copy()
        if mean.shape != (len(FEATURE_NAMES),) or std.shape != mean.shape:
            raise ValidationError("scaler needs one mean and one std per feature")
        if np.any(std <= 0) or not np.all(np.isfinite(std)):
            raise ValidationError("scaler standard deviations must be positive and finite")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def fit_scaler(samples) -> Scaler:
    """Per-feature z-score statistics; constant columns keep std 1.0."""
    x = Dataset.from_samples(samples).x if not isinstance(samples, np.ndarray) else samples
    if len(x) == 0:
        raise ValidationError("cannot fit a scaler on an empty sample set")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Scaler(mean, std)


# -- pools and tasks ------------------------------------------------------------


@dataclass(frozen=True)
class MetaPools:
    """Meta-train pool plus disjoint meta-validation / meta-test halves of the eval region."""

    train: Dataset
    val: Dataset
    test: Dataset
    split: SplitSpec


def build_pools(data: Dataset, split: SplitSpec, seed: int = 0) -> MetaPools:
    f = data.freq_ghz
    sup, qry = split.region_masks(f, "train")
    train_idx = np.flatnonzero(sup | qry)
    esup, eqry = split.region_masks(f, "eval")
    eval_idx = np.flatnonzero((esup | eqry) & ~(sup | qry))
    perm = np.random.default_rng(seed).permutation(eval_idx)
    half = len(perm) // 2
    return MetaPools(
        train=data.take(train_idx),
        val=data.take(np.sort(perm[:half])),
        test=data.take(np.sort(perm[half:])),
        split=split,
    )


@dataclass(frozen=True, eq=False)
class Task:
    """One episode.  Features are scaled; the raw frequencies are kept for auditing."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    id: int
    support_freq_ghz: np.ndarray = field(repr=False)
    query_freq_ghz: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.support_x) == 0 or len(self.query_x) == 0:
            raise ValidationError("task support and query sets must be non-empty")

    @property
    def n_support(self) -> int:
        return len(self.support_x)

    @property
    def n_query(self) -> int:
        return len(self.query_x)


def sample_task(
    pool: Dataset,
    spec: SplitSpec,
    phase: str,
    n_support: int,
    n_query: int,
    rng: np.random.Generator,
    scaler: Scaler | None = None,
    task_id: int = 0,
) -> Task:
    """Draw support and query sets without replacement from their frequency regions."""
    if n_support < 1 or n_query < 1:
        raise ValidationError(f"n_support and n_query must be >= 1 (got {n_support}, {n_query})")
    pool = Dataset.from_samples(pool)
    sup_mask, qry_mask = spec.region_masks(pool.freq_ghz, phase)
    sup_idx, qry_idx = np.flatnonzero(sup_mask), np.flatnonzero(qry_mask)
    sup_iv, qry_iv = spec.regions(phase)
    if len(sup_idx) < n_support:
        raise InsufficientDataError(
            f"{phase} support region {list(sup_iv)} has {len(sup_idx)} samples, need {n_support}"
        )
    if len(qry_idx) < n_query:
        raise InsufficientDataError(
            f"{phase} query region {list(qry_iv)} has {len(qry_idx)} samples, need {n_query}"
        )
    s = rng.choice(sup_idx, n_support, replace=False)
    q = rng.choice(qry_idx, n_query, replace=False)
    transform = scaler.transform if scaler is not None else (lambda a: np.array(a, dtype=float))
    return Task(
        support_x=transform(pool.x[s]),
        support_y=pool.y[s].copy(),
        query_x=transform(pool.x[q]),
        query_y=pool.y[q].copy(),
        id=task_id,
        support_freq_ghz=pool.x[s, 0].copy(),
        query_freq_ghz=pool.x[q, 0].copy(),
    )


# -- CSV ------------------------------------------------------------------------


def write_csv(samples, path) -> None:
    data = Dataset.from_samples(samples)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for xr, yr in zip(data.x, data.y):
            cells = [format(v, ".17g") for v in xr[:7]]
            cells.append(str(int(xr[7])))
            cells.extend(format(v, ".17g") for v in yr)
            fh.write(",".join(cells) + "\n")


def read_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValidationError(
                f"{path}:1: header must be {','.join(CSV_HEADER)!r}, got {','.join(header or [])!r}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValidationError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(CSV_HEADER))
    x, y = arr[:, : len(FEATURE_NAMES)], arr[:, len(FEATURE_NAMES):]
    bad = invalid_rows(x)
    bad |= ~np.all((y >= 0) & (y <= 1), axis=1) | (np.abs(y.sum(axis=1) - 1) > 1e-6)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        try:
            DesignVector.from_array(x[i])
            ResponseTriple(*map(float, y[i]))
        except ValidationError as exc:
            raise type(exc)(f"{path}:{i + 2}: {exc}") from None
    return Dataset(x, y)

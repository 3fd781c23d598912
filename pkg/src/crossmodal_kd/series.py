"""Series ingestion, splitting, windowing, normalization and patching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.rng import stream

NORM_EPS = 1e-8


class SeriesError(ValueError):
    pass


@dataclass
class Series:
    values: np.ndarray  # T x C
    periodicity: int = 1
    columns: List[str] = field(default_factory=list)
    timestamps: Optional[List[str]] = None
    name: str = "series"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.periodicity < 1:
            raise SeriesError("periodicity must be >= 1")
        if not self.columns:
            self.columns = [f"x{i}" for i in range(self.values.shape[1])]

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "Series":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return Series(self.values[start:stop], self.periodicity, list(self.columns), ts, self.name)


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    few_shot: float = 1.0

    def validate(self) -> None:
        for label, frac in (("train", self.train), ("val", self.val), ("test", self.test)):
            if not frac > 0:
                raise SeriesError(f"split fraction '{label}' must be positive, got {frac}")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise SeriesError("split fractions must sum to 1")
        if not 0 < self.few_shot <= 1:
            raise SeriesError("few-shot fraction must lie in (0, 1]")


@dataclass
class SeriesWindow:
    """Lookback/horizon pair in normalized space plus the statistics to undo it."""

    lookback: np.ndarray  # seq_len x C, normalized
    horizon: np.ndarray  # pred_len x C, normalized with lookback statistics
    mean: np.ndarray  # C
    std: np.ndarray  # C
    norm_const: float
    start: int = 0

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return denormalize(values, self.mean, self.std, self.norm_const)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_csv(path, has_header: bool = True, timestamp_column: Optional[int] = None,
             periodicity: int = 1) -> Series:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise SeriesError(f"{path}: empty file")
    header = rows.pop(0) if has_header else None
    if not rows:
        raise SeriesError(f"{path}: no data rows")
    width = len(rows[0])
    values, stamps = [], []
    for i, row in enumerate(rows):
        lineno = i + (2 if has_header else 1)
        if len(row) != width:
            raise SeriesError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        out = []
        for j, cell in enumerate(row):
            if j == timestamp_column:
                stamps.append(cell)
                continue
            try:
                out.append(float(cell))
            except ValueError:
                raise SeriesError(f"{path}: row {lineno}, column {j + 1}: cannot parse {cell!r}") from None
        values.append(out)
    cols = [c for j, c in enumerate(header) if j != timestamp_column] if header else []
    return Series(np.array(values), periodicity, cols,
                  stamps if timestamp_column is not None else None, path.stem)


def save_csv(series: Series, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if series.timestamps else []) + series.columns)
        for t, row in enumerate(series.values):
            prefix = [series.timestamps[t]] if series.timestamps else []
            w.writerow(prefix + [repr(float(v)) for v in row])


def synth_generate(kind: str, length: int, channels: int, periodicity: int, seed: int,
                   noise: float = 0.1) -> Series:
    """Deterministic synthetic series.

    ``sine_mix`` sums the fundamental at ``periodicity`` with one or two
    harmonics per channel; ``trend_sine`` adds a linear drift; ``noise`` is
    white Gaussian noise with std ``noise`` (1.0 when ``noise`` is 0).
    """
    if length < 1 or channels < 1 or periodicity < 1:
        raise SeriesError("length, channels and periodicity must be positive")
    rng = stream(seed, f"synth/{kind}")
    t = np.arange(length, dtype=np.float64)
    if kind == "noise":
        sigma = noise if noise > 0 else 1.0
        return Series(rng.normal(0.0, sigma, size=(length, channels)), periodicity, name="noise")
    if kind not in ("sine_mix", "trend_sine"):
        raise SeriesError(f"unknown synthetic kind '{kind}'")
    out = np.zeros((length, channels))
    for c in range(channels):
        n_terms = int(rng.integers(2, 4))
        harmonics = [1] + list(rng.choice(np.arange(2, 5), size=n_terms - 1, replace=False))
        for k in harmonics:
            amp = rng.uniform(0.5, 1.5) / k
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[:, c] += amp * np.sin(2.0 * np.pi * k * t / periodicity + phase)
        if kind == "trend_sine":
            out[:, c] += rng.uniform(-1.0, 1.0) * t / length
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=out.shape)
    return Series(out, periodicity, name=kind)


# ---------------------------------------------------------------------------
# splitting and windowing
# ---------------------------------------------------------------------------

def _floor(x: float) -> int:
    # tolerate representation error such as 0.7 * 100 = 69.99999999999999
    return int(np.floor(x + 1e-9))


def split(s: Series, spec: SplitSpec, min_length: int = 1) -> Tuple[Series, Series, Series]:
    """Chronological train/val/test partition; few-shot keeps the leading share of train."""
    spec.validate()
    T = s.length
    n_train = _floor(T * spec.train)
    n_val = _floor(T * spec.val)
    n_keep = _floor(n_train * spec.few_shot) if spec.few_shot < 1.0 else n_train
    parts = {
        "train": s.slice(0, n_keep),
        "val": s.slice(n_train, n_train + n_val),
        "test": s.slice(n_train + n_val, T),
    }
    for label, part in parts.items():
        if part.length < min_length:
            raise SeriesError(f"{label} split has {part.length} steps, need at least {min_length}")
    return parts["train"], parts["val"], parts["test"]


def window_count(T: int, seq_len: int, pred_len: int, stride: int = 1) -> int:
    return (T - seq_len - pred_len) // stride + 1


def normalize_stats(lookback: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean, std = lookback.mean(axis=0), lookback.std(axis=0)
    # constant channels: summation round-off would otherwise leave a tiny
    # nonzero std and mean error that the 1/(std + eps) factor amplifies
    flat = np.ptp(lookback, axis=0) == 0
    if np.any(flat):
        mean = np.where(flat, lookback[0], mean)
        std = np.where(flat, 0.0, std)
    return mean, std


def normalize(x: np.ndarray, mean, std, r: float) -> np.ndarray:
    return (x - mean) * r / (std + NORM_EPS)


def denormalize(x: np.ndarray, mean, std, r: float) -> np.ndarray:
    return x * (std + NORM_EPS) / r + mean


def instance_normalize(lookback: np.ndarray, horizon: np.ndarray, norm_const: float = 0.4,
                       start: int = 0) -> SeriesWindow:
    """Per-channel z-score of the lookback scaled by ``norm_const``; the horizon
    is mapped with the same statistics so predictions can be inverted."""
    mean, std = normalize_stats(lookback)
    return SeriesWindow(normalize(lookback, mean, std, norm_const),
                        normalize(horizon, mean, std, norm_const),
                        mean, std, norm_const, start)


def make_windows(s: Series, seq_len: int, pred_len: int, stride: int = 1,
                 norm_const: float = 0.4) -> List[SeriesWindow]:
    T = s.length
    if seq_len < 1 or pred_len < 1 or stride < 1:
        raise SeriesError("seq_len, pred_len and stride must be positive")
    if T < seq_len + pred_len:
        raise SeriesError(f"series of length {T} too short for seq_len {seq_len} + pred_len {pred_len}")
    n = window_count(T, seq_len, pred_len, stride)
    out = []
    for i in range(n):
        a = i * stride
        out.append(instance_normalize(s.values[a:a + seq_len], s.values[a + seq_len:a + seq_len + pred_len],
                                      norm_const, a))
    return out


@dataclass
class WindowBatch:
    """Stacked windows: x (B, L, C), y (B, H, C) plus per-window statistics."""

    x: np.ndarray
    y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    norm_const: float

    @classmethod
    def from_windows(cls, windows: Sequence[SeriesWindow]) -> "WindowBatch":
        return cls(np.stack([w.lookback for w in windows]), np.stack([w.horizon for w in windows]),
                   np.stack([w.mean for w in windows]), np.stack([w.std for w in windows]),
                   windows[0].norm_const)

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.x[idx], self.y[idx], self.mean[idx], self.std[idx], self.norm_const)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return denormalize(values, self.mean[:, None, :], self.std[:, None, :], self.norm_const)

    def raw_lookback(self) -> np.ndarray:
        return self.denormalize(self.x)

    def raw_horizon(self) -> np.ndarray:
        return self.denormalize(self.y)


# ---------------------------------------------------------------------------
# patching
# ---------------------------------------------------------------------------

def patch_count(L: int, patch_len: int, stride: int, padding: int) -> int:
    return (L + padding - patch_len) // stride + 1


def patch_indices(L: int, patch_len: int, stride: int, padding: int) -> np.ndarray:
    if patch_len > L + padding:
        raise SeriesError(f"patch length {patch_len} exceeds padded length {L + padding}")
    n = patch_count(L, patch_len, stride, padding)
    idx = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    # end padding replicates the final step
    return np.minimum(idx, L - 1)


def patchify(x, patch_len: int, stride: int, padding: int) -> Tensor:
    """(B, L, C) -> (B, N, patch_len*C), each patch flattened time-major."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    B, L, C = x.shape
    idx = patch_indices(L, patch_len, stride, padding)
    gathered = ops.take(x, idx, axis=1)  # B, N, patch_len, C
    return ops.reshape(gathered, (B, idx.shape[0], patch_len * C))

"""Rendering a series window as a normalized 2-D texture image.

Pipeline: pattern enhancement (raw, FFT magnitude, periodicity channels),
a per-variable 1-D convolution averaged over variables, period folding of
the time axis, two 2-D convolutions, corner-aligned bilinear resizing and
per-image min/max scaling to [0, 255].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .autodiff import Conv1d, Conv2d, Module, Tensor, ops

PIXEL_EPS = 1e-5
PIXEL_MAX = 255.0


class FoldError(ValueError):
    pass


@dataclass
class AugmentConfig:
    hidden: int = 16
    image_size: int = 56
    c_img: int = 3
    periodicity: int = 24

    def validate(self) -> None:
        if self.hidden % 2:
            raise FoldError(f"hidden width must be even, got {self.hidden}")
        if self.image_size < 1 or self.c_img < 1 or self.periodicity < 1:
            raise FoldError("image_size, c_img and periodicity must be positive")


# ---------------------------------------------------------------------------
# pattern enhancement (no learnable parameters)
# ---------------------------------------------------------------------------

def fft_magnitude(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """|DFT| along ``axis``, unnormalized (a constant c gives L*c at k=0)."""
    return np.abs(np.fft.fft(np.asarray(x, dtype=np.float64), axis=axis))


def periodicity_encode(L: int, P: int) -> np.ndarray:
    """Rows [sin(2 pi t / P), cos(2 pi t / P)] for t = 0..L-1."""
    if P < 1:
        raise ValueError("period must be >= 1")
    t = np.arange(L, dtype=np.float64)
    ang = 2.0 * np.pi * t / P
    return np.stack([np.sin(ang), np.cos(ang)], axis=1)


def enhance(x, periodicity: int) -> Tuple[Tensor, np.ndarray]:
    """(B, L, D) -> X_aug (B, L, D, 3) plus the cosine channel (B, L, D, 1).

    Channel 0 is the input itself (gradient flows), channel 1 its FFT
    magnitude over time, channel 2 the sine periodicity component.  The
    cosine component is returned separately and joins as a fourth input
    channel of the 1-D convolution.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    B, L, D = x.shape
    spec = fft_magnitude(x.data, axis=1)
    pe = periodicity_encode(L, periodicity)
    sin = np.broadcast_to(pe[None, :, None, 0:1], (B, L, D, 1))
    cos = np.broadcast_to(pe[None, :, None, 1:2], (B, L, D, 1))
    aug = ops.concat([ops.reshape(x, (B, L, D, 1)), Tensor(spec[..., None]), Tensor(sin)], axis=-1)
    return aug, np.ascontiguousarray(cos)


# ---------------------------------------------------------------------------
# folding and resizing
# ---------------------------------------------------------------------------

def fold_shape(L: int, P: int) -> Tuple[int, int]:
    """Rows of length P when P divides L, else the most square divisor pair."""
    if P >= 1 and L % P == 0:
        return L // P, P
    h = 1
    for d in range(1, int(math.isqrt(L)) + 1):
        if L % d == 0:
            h = d
    return h, L // h


def interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_dst, n_src)."""
    M = np.zeros((n_dst, n_src))
    if n_src == 1:
        M[:, 0] = 1.0
        return M
    for i in range(n_dst):
        pos = 0.0 if n_dst == 1 else i * (n_src - 1) / (n_dst - 1)
        i0 = min(int(math.floor(pos)), n_src - 2)
        frac = pos - i0
        M[i, i0] += 1.0 - frac
        M[i, i0 + 1] += frac
    return M


def bilinear_resize(img, H: int, W: int) -> Tensor:
    """(B, C, h, w) -> (B, C, H, W); source corners land exactly on target corners."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    h, w = img.shape[-2:]
    ry = interp_matrix(h, H)
    rxt = interp_matrix(w, W).T.copy()
    return ops.matmul(ops.matmul(Tensor(ry), img), Tensor(rxt))


def pixel_normalize(img, bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Scale each image to [0, 255] by its own min and max.

    The extremes act as constants in the backward pass.  Pass ``bounds`` to
    reuse extremes from an earlier evaluation.  Returns (image, bounds).
    """
    img = img if isinstance(img, Tensor) else Tensor(img)
    if bounds is None:
        axes = tuple(range(1, img.ndim))
        lo = img.data.min(axis=axes, keepdims=True)
        hi = img.data.max(axis=axes, keepdims=True)
        bounds = (lo, hi)
    lo, hi = bounds
    scale = PIXEL_MAX / (hi - lo + PIXEL_EPS)
    return ops.mul(ops.sub(img, lo), scale), bounds


# ---------------------------------------------------------------------------
# learnable multi-scale transformation
# ---------------------------------------------------------------------------

class VisualAugmenter(Module):
    def __init__(self, cfg: AugmentConfig, rng):
        cfg.validate()
        self.cfg = cfg
        self.conv_t = Conv1d(4, cfg.hidden, 3, rng, padding=1)
        self.conv_a = Conv2d(cfg.hidden, cfg.hidden // 2, 3, rng, padding=1)
        self.conv_b = Conv2d(cfg.hidden // 2, cfg.c_img, 3, rng, padding=1)

    def multiscale(self, aug: Tensor, cos: np.ndarray, periodicity: int) -> Tensor:
        """X_aug (B, L, D, 3) -> (B, C_img, h0, w0) before resizing."""
        B, L, D, _ = aug.shape
        h0, w0 = fold_shape(L, periodicity)
        inp = ops.concat([aug, Tensor(cos)], axis=-1)  # B, L, D, 4
        inp = ops.reshape(ops.transpose(inp, (0, 2, 3, 1)), (B * D, 4, L))
        f1 = ops.reshape(self.conv_t(inp), (B, D, self.cfg.hidden, L))
        f1 = ops.mean(f1, axis=1)  # B, hidden, L
        grid = ops.reshape(f1, (B, self.cfg.hidden, h0, w0))
        return self.conv_b(ops.gelu(self.conv_a(grid)))

    def __call__(self, x, bounds=None, periodicity: Optional[int] = None):
        P = periodicity or self.cfg.periodicity
        aug, cos = enhance(x, P)
        raw = self.multiscale(aug, cos, P)
        s = self.cfg.image_size
        return pixel_normalize(bilinear_resize(raw, s, s), bounds)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_pgm(img: np.ndarray, path) -> None:
    """Write a single-channel image as binary PGM (P5, maxval 255)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"export_pgm expects a 2-D image, got shape {a.shape}")
    H, W = a.shape
    pix = np.rint(np.clip(a, 0.0, PIXEL_MAX)).astype(np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    W, H = (int(v) for v in parts[1].split())
    payload = parts[3]
    return np.frombuffer(payload, dtype=np.uint8, count=W * H).reshape(H, W)

"""Teacher and student cross-modal forecasters plus checkpoint I/O."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .autodiff import Conv2d, Dropout, LayerNorm, Linear, Module, Tensor, ops, stream
from .autodiff.tensor import ShapeError
from .temporal import TemporalEncoder, TemporalEncoderConfig
from .visual import AugmentConfig, VisualAugmenter


@dataclass
class VisionEncoderConfig:
    role: str = "student"
    d_vis: int = 16
    depth: int = 2


@dataclass
class FusionConfig:
    d_fus: int = 32
    n_heads: int = 4
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_fus % self.n_heads:
            raise ShapeError(f"d_fus {self.d_fus} not divisible by n_heads {self.n_heads}")


@dataclass
class ModelConfig:
    role: str
    n_vars: int
    seq_len: int
    pred_len: int
    temporal: TemporalEncoderConfig = field(default_factory=TemporalEncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(role=d["role"], n_vars=d["n_vars"], seq_len=d["seq_len"], pred_len=d["pred_len"],
                   temporal=TemporalEncoderConfig(**d["temporal"]), augment=AugmentConfig(**d["augment"]),
                   vision=VisionEncoderConfig(**d["vision"]), fusion=FusionConfig(**d["fusion"]))


# Hidden sizes per role.  "full" holds the full-size widths and is
# only used for shape and parameter-count checks; "tiny" is the desk-scale
# profile used for training.
PROFILES = {
    "full": dict(
        temporal=dict(d_model=128, e_layers=2, n_heads=4),
        augment=dict(hidden=16, image_size=56, c_img=3),
        teacher=dict(d_vis=1280, depth=2, d_fus=256),
        student=dict(d_vis=128, depth=2, d_fus=256),
    ),
    "tiny": dict(
        temporal=dict(d_model=16, e_layers=2, n_heads=4),
        augment=dict(hidden=16, image_size=56, c_img=3),
        teacher=dict(d_vis=64, depth=2, d_fus=32),
        student=dict(d_vis=16, depth=2, d_fus=16),
    ),
}


def build_config(profile: str, role: str, n_vars: int, seq_len: int, pred_len: int,
                 periodicity: int, dropout: float = 0.1) -> ModelConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown model profile '{profile}' (choose from {sorted(PROFILES)})")
    if role not in ("teacher", "student"):
        raise ValueError(f"unknown role '{role}'")
    p = PROFILES[profile]
    r = p[role]
    return ModelConfig(
        role=role, n_vars=n_vars, seq_len=seq_len, pred_len=pred_len,
        temporal=TemporalEncoderConfig(dropout=dropout, **p["temporal"]),
        augment=AugmentConfig(periodicity=periodicity, **p["augment"]),
        vision=VisionEncoderConfig(role=role, d_vis=r["d_vis"], depth=r["depth"]),
        fusion=FusionConfig(d_fus=r["d_fus"], n_heads=4, dropout=dropout),
    )


@dataclass
class ModelOutputs:
    pred: Tensor  # B x H x D, normalized space
    fused: Tensor  # B x d_fus
    attention: Optional[Tensor]  # B x T' x T', head-averaged
    visual: Tensor  # B x d_fus
    image_bounds: tuple = ()


class VisionEncoder(Module):
    """Stride-2 conv blocks, global average pool, linear projection."""

    def __init__(self, cfg: VisionEncoderConfig, c_img: int, d_fus: int, rng):
        chans = [c_img] + [cfg.d_vis] * cfg.depth
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1) for i in range(cfg.depth)]
        self.proj = Linear(chans[-1], d_fus, rng)

    def __call__(self, img: Tensor) -> Tensor:
        # pixel range [0, 255] -> [0, 1] before the first conv
        h = img * (1.0 / 255.0)
        for conv in self.convs:
            h = ops.gelu(conv(h))
        pooled = ops.mean(h, axis=(2, 3))
        return self.proj(pooled)


def vision_encode(img: Tensor, encoder: VisionEncoder) -> Tensor:
    return encoder(img)


class CrossModalFusion(Module):
    """Temporal features query the pooled visual token.

    F_fus = LayerNorm(W_O A + lift(h_T)), A = softmax(Q K^T / sqrt(d_k)) V.
    """

    def __init__(self, d_model: int, cfg: FusionConfig, rng, drop_rng):
        cfg.validate()
        self.n_heads = cfg.n_heads
        self.lift = Linear(d_model, cfg.d_fus, rng)
        self.wq = Linear(cfg.d_fus, cfg.d_fus, rng)
        self.wk = Linear(cfg.d_fus, cfg.d_fus, rng)
        self.wv = Linear(cfg.d_fus, cfg.d_fus, rng)
        self.wo = Linear(cfg.d_fus, cfg.d_fus, rng)
        self.norm = LayerNorm(cfg.d_fus)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def attend(self, h: Tensor, f_vis: Tensor) -> Tensor:
        B, d = h.shape
        nh, dk = self.n_heads, d // self.n_heads
        q = ops.reshape(self.wq(h), (B, nh, 1, dk))
        k = ops.reshape(self.wk(f_vis), (B, nh, 1, dk))
        v = ops.reshape(self.wv(f_vis), (B, nh, 1, dk))
        # one visual key per sample: the softmax runs over a single entry
        w = ops.softmax(ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk)), axis=-1)
        return ops.reshape(ops.matmul(w, v), (B, d))

    def __call__(self, h_T: Tensor, f_vis: Tensor) -> Tensor:
        h = self.lift(h_T)
        a = self.attend(h, f_vis)
        return self.norm(self.drop(self.wo(a)) + h)


def fuse(h_T: Tensor, f_vis: Tensor, fusion: CrossModalFusion) -> Tensor:
    return fusion(h_T, f_vis)


def predict(fused: Tensor, head: Linear, pred_len: int, n_vars: int) -> Tensor:
    out = head(fused)
    if out.shape[-1] != pred_len * n_vars:
        raise ShapeError(f"head produces {out.shape[-1]} values, need {pred_len}x{n_vars}")
    return ops.reshape(out, (fused.shape[0], pred_len, n_vars))


def reconstruction_loss(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    return ops.smooth_l1(pred, target, beta)


class CrossModalForecaster(Module):
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        role = cfg.role
        init = stream(seed, f"{role}/init")
        drop = stream(seed, f"{role}/dropout")
        self.temporal = TemporalEncoder(cfg.temporal, cfg.n_vars, init, drop)
        self.augmenter = VisualAugmenter(cfg.augment, init)
        self.vision = VisionEncoder(cfg.vision, cfg.augment.c_img, cfg.fusion.d_fus, init)
        self.fusion = CrossModalFusion(cfg.temporal.d_model, cfg.fusion, init, drop)
        self.head = Linear(cfg.fusion.d_fus, cfg.pred_len * cfg.n_vars, init)

    @property
    def d_fus(self) -> int:
        return self.cfg.fusion.d_fus

    def n_tokens(self) -> int:
        return self.temporal.n_tokens(self.cfg.seq_len)

    def __call__(self, x, image_bounds=None, periodicity: Optional[int] = None) -> ModelOutputs:
        x = x if isinstance(x, Tensor) else Tensor(x)
        t_out = self.temporal(x)
        img, bounds = self.augmenter(x, image_bounds, periodicity)
        f_vis = self.vision(img)
        fused = self.fusion(t_out.h, f_vis)
        pred = predict(fused, self.head, self.cfg.pred_len, self.cfg.n_vars)
        return ModelOutputs(pred, fused, t_out.attention_mean(), f_vis, bounds)

    def render(self, x, periodicity: Optional[int] = None) -> np.ndarray:
        img, _ = self.augmenter(x, None, periodicity)
        return img.data


def forward(model: CrossModalForecaster, x, **kw) -> ModelOutputs:
    return model(x, **kw)


def count_parameters(cfg: ModelConfig, part: str = "all") -> int:
    """Parameter count of a freshly built model, or of one of its parts."""
    model = CrossModalForecaster(cfg, seed=0)
    if part == "all":
        return model.num_parameters()
    return getattr(model, part).num_parameters()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   8 bytes   magic b"XMKDCKP1"
#   u32       length of the UTF-8 JSON config block, then the block
#   u32       number of parameter blobs
#   per blob: u32 name length, name bytes (UTF-8), u32 rank,
#             rank x u64 extents, prod(extents) x f64 values (row-major)

MAGIC = b"XMKDCKP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, params: Dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    try:
        return _parse_checkpoint(path, Path(path).read_bytes())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(path, raw: bytes):
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n,) = read("<I")
    config = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (ln,) = read("<I")
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = read("<I")
        shape = read(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        params[name] = arr
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return config, params


def model_state(model: Module) -> Dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters()}


def load_state(model: Module, state: Dict[str, np.ndarray]) -> None:
    params = model.params()
    for name, p in params.items():
        if name not in state:
            raise CheckpointError(f"checkpoint lacks parameter '{name}'")
        if state[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for '{name}': {state[name].shape} vs {p.shape}")
        p.data = state[name].copy()


def save_model(path, model: CrossModalForecaster, extra: Optional[dict] = None) -> None:
    cfg = {"model": model.cfg.to_dict()}
    if extra:
        cfg.update(extra)
    save_checkpoint(path, cfg, model_state(model))


def load_model(path):
    cfg, state = load_checkpoint(path)
    model = CrossModalForecaster(ModelConfig.from_dict(cfg["model"]), seed=0)
    load_state(model, state)
    return model, cfg

"""Knowledge-transfer machinery: alignment, distillation losses, adaptive
weighting, loss balancing, dual-optimizer updates and monitoring."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autodiff import AdamW, Dropout, Linear, Module, Tensor, ops, parameter
from .autodiff.tensor import ShapeError

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 1.0, 10.0
TAU_INIT = 4.0
INIT_WEIGHTS = (0.01, 1.0, 0.5, 0.01)
COMPONENTS = ("fd", "fcst", "recon", "cd")
PROB_FLOOR = 1e-12
NORM_EPS = 1e-8
UNDEFINED = "undefined"


@dataclass
class DistillConfig:
    n_scales: int = 3
    align_dropout: float = 0.1
    gamma: float = 0.001
    momentum: float = 0.9
    warmup: int = 10
    lambda_distill: float = 1.0
    lambda_mse: float = 1.0
    lambda_cos: float = 1.0
    lambda_kl: float = 1.0
    lr_ratio: float = 0.1
    tau_init: float = TAU_INIT
    init_weights: tuple = INIT_WEIGHTS
    conv_window: int = 10
    conv_eps: float = 1e-4
    # components whose weight is pinned (e.g. {"fd": 0.0, "cd": 0.0})
    fixed_weights: Dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pyramid alignment
# ---------------------------------------------------------------------------

def pyramid_hidden(d_s: int, d_t: int, n_scales: int) -> List[int]:
    return [max(max(d_s, d_t) // 2 ** i, 1) for i in range(n_scales)]


class PyramidAligner(Module):
    """Softmax(beta)-weighted sum of 2-layer student-to-teacher pathways."""

    def __init__(self, d_s: int, d_t: int, n_scales: int, rng, drop_rng, dropout: float = 0.1):
        self.d_s, self.d_t = d_s, d_t
        self.hidden = pyramid_hidden(d_s, d_t, n_scales)
        self.inner = [Linear(d_s, h, rng) for h in self.hidden]
        self.outer = [Linear(h, d_t, rng) for h in self.hidden]
        self.beta = parameter(np.zeros(n_scales))
        self.drop = Dropout(dropout, drop_rng)

    def scale_weights(self) -> Tensor:
        return ops.softmax(self.beta, axis=0)

    def pathways(self, f_s: Tensor) -> List[Tensor]:
        if f_s.shape[-1] != self.d_s:
            raise ShapeError(f"aligner expects width {self.d_s}, got {f_s.shape[-1]}")
        return [outer(self.drop(ops.gelu(inner(f_s)))) for inner, outer in zip(self.inner, self.outer)]

    def combine(self, outs: Sequence[Tensor]) -> Tensor:
        a = self.scale_weights()
        total = None
        for i, o in enumerate(outs):
            term = o * ops.index(a, i)
            total = term if total is None else total + term
        return total

    def __call__(self, f_s: Tensor) -> Tensor:
        return self.combine(self.pathways(f_s))


def pyramid_align(f_s, aligner: PyramidAligner) -> Tensor:
    return aligner(f_s if isinstance(f_s, Tensor) else Tensor(f_s))


def integration_scores(pathway_outputs: Sequence[np.ndarray], f_t: np.ndarray) -> np.ndarray:
    """Diagnostic attention of teacher features over pathway outputs.

    softmax(q k_i / sqrt(d_t)) with q the teacher vector and k_i each
    pathway output, averaged over the batch.  Not part of the objective.
    """
    keys = np.stack(pathway_outputs, axis=1)  # B, N_s, d_t
    s = np.einsum("bd,bnd->bn", f_t, keys) / math.sqrt(f_t.shape[-1])
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=1, keepdims=True)).mean(axis=0)


# ---------------------------------------------------------------------------
# temperature and weights
# ---------------------------------------------------------------------------

def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def temperature_init_logit(tau0: float = TAU_INIT) -> float:
    return logit((tau0 - TAU_MIN) / (TAU_MAX - TAU_MIN))


def temperature(theta_tau) -> Tensor:
    t = theta_tau if isinstance(theta_tau, Tensor) else Tensor(np.asarray(theta_tau, dtype=np.float64))
    return ops.sigmoid(t) * (TAU_MAX - TAU_MIN) + TAU_MIN


def weights(theta_w, fixed: Optional[Mapping[int, float]] = None) -> Tensor:
    """exp(theta_w); entries listed in ``fixed`` are replaced by constants."""
    t = theta_w if isinstance(theta_w, Tensor) else Tensor(np.asarray(theta_w, dtype=np.float64))
    w = ops.exp(t)
    if fixed:
        free = np.ones(t.shape)
        pinned = np.zeros(t.shape)
        for i, v in fixed.items():
            free[i] = 0.0
            pinned[i] = v
        w = w * free + pinned
    return w


def weight_regularization(w, gamma: float) -> Tensor:
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    return ops.sum(w * w) * gamma


# ---------------------------------------------------------------------------
# distillation losses
# ---------------------------------------------------------------------------

def retemper(p, tau) -> Tensor:
    """Row-wise softmax(log P / tau); tau = 1 returns P (up to the floor)."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    logp = ops.log(ops.clamp_min(p, PROB_FLOOR))
    return ops.softmax(logp / tau, axis=-1)


def correlation_distill(p_tea, p_stu, tau) -> Tensor:
    """(tau^2 / B) * sum_b mean_rows KL(teacher_row || student_row)."""
    p_tea = Tensor(np.asarray(p_tea.data if isinstance(p_tea, Tensor) else p_tea, dtype=np.float64))
    p_stu = p_stu if isinstance(p_stu, Tensor) else Tensor(p_stu)
    if p_tea.shape != p_stu.shape:
        raise ShapeError(f"attention shapes differ {p_tea.shape} vs {p_stu.shape}")
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64))
    pt = retemper(p_tea, tau)
    ps = retemper(p_stu, tau)
    log_ratio = ops.log(ops.clamp_min(pt, PROB_FLOOR)) - ops.log(ops.clamp_min(ps, PROB_FLOOR))
    kl_rows = ops.sum(pt * log_ratio, axis=-1)  # B x rows
    B = p_tea.shape[0]
    return ops.sum(ops.mean(kl_rows, axis=-1)) * (tau * tau) * (1.0 / B)


def _cosine_term(f_s: Tensor, f_t: np.ndarray) -> Tensor:
    """1 - cos(f_s, f_t) per row; rows with a zero-norm side count as orthogonal."""
    ns = np.linalg.norm(f_s.data, axis=-1)
    nt = np.linalg.norm(f_t, axis=-1)
    ok = ((ns > 0) & (nt > 0)).astype(np.float64)
    if not ok.all():
        log.warning("zero-norm feature vector in cosine term, treated as orthogonal (%d rows)",
                    int((1 - ok).sum()))
    # the +1 under the root only touches rows that are masked out anyway
    norm_s = ops.sqrt(ops.sum(f_s * f_s, axis=-1) + (1.0 - ok))
    cos = ops.sum(f_s * f_t, axis=-1) / (norm_s * np.where(ok > 0, nt, 1.0))
    return 1.0 - cos * ok


def feature_distill(f_s, f_t, tau, lambda_mse: float = 1.0, lambda_cos: float = 1.0,
                    lambda_kl: float = 1.0) -> Tensor:
    """Composite alignment of student (aligned) and teacher fused features."""
    f_s = f_s if isinstance(f_s, Tensor) else Tensor(f_s)
    f_t = np.asarray(f_t.data if isinstance(f_t, Tensor) else f_t, dtype=np.float64)
    if f_s.shape != f_t.shape:
        raise ShapeError(f"feature shapes differ {f_s.shape} vs {f_t.shape}")
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64))
    diff = f_s - f_t
    mse = ops.mean(diff * diff)
    cos = ops.mean(_cosine_term(f_s, f_t))
    log_pt = ops.log_softmax(Tensor(f_t) / tau, axis=-1)
    log_ps = ops.log_softmax(f_s / tau, axis=-1)
    kl = ops.mean(ops.sum(ops.exp(log_pt) * (log_pt - log_ps), axis=-1))
    return mse * lambda_mse + cos * lambda_cos + kl * lambda_kl


# ---------------------------------------------------------------------------
# balancing and totals
# ---------------------------------------------------------------------------

def ema_update(tracker: Optional[float], loss_value: float, mu: float) -> float:
    if not 0.0 <= mu < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if tracker is None:
        return abs(float(loss_value))
    return mu * tracker + (1.0 - mu) * abs(float(loss_value))


def normalize_loss(loss, tracker: float) -> Tensor:
    loss = loss if isinstance(loss, Tensor) else Tensor(np.asarray(loss, dtype=np.float64))
    return loss * (1.0 / (tracker + NORM_EPS))


class DistillState(Module):
    """Learnable weights and temperature plus the running loss scales."""

    def __init__(self, cfg: DistillConfig, with_temperature: bool = True):
        self.cfg = cfg
        self.theta_w = parameter(np.log(np.asarray(cfg.init_weights, dtype=np.float64)))
        self.theta_tau = parameter(np.array(temperature_init_logit(cfg.tau_init))) if with_temperature else None
        self.trackers: Dict[str, Optional[float]] = {k: None for k in COMPONENTS}
        self.step = 0
        self.history: deque = deque(maxlen=max(cfg.conv_window + 1, 11))
        unknown = set(cfg.fixed_weights) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown loss component(s) {sorted(unknown)}")
        self.fixed = {COMPONENTS.index(k): float(v) for k, v in cfg.fixed_weights.items()}

    def weights(self) -> Tensor:
        return weights(self.theta_w, self.fixed)

    def temperature(self) -> Tensor:
        return temperature(self.theta_tau)

    def warm(self) -> bool:
        return self.step >= self.cfg.warmup

    def update_trackers(self, raw: Mapping[str, float]) -> None:
        for k, v in raw.items():
            self.trackers[k] = ema_update(self.trackers[k], v, self.cfg.momentum)


def total_distill_loss(losses: Mapping[str, Tensor], state: DistillState, normalize: bool = True):
    """sum_i w_i * L_i' + gamma * sum w^2, where L_i' is scale-normalized
    once the trackers are warm.  Absent components contribute nothing.

    Returns (total, normalized-component dict, weight tensor).
    """
    w = state.weights()
    normed = {}
    total = None
    for i, k in enumerate(COMPONENTS):
        if k not in losses:
            continue
        L = losses[k]
        n = normalize_loss(L, state.trackers[k]) if normalize and state.trackers[k] is not None else L
        normed[k] = n
        term = ops.index(w, i) * n
        total = term if total is None else total + term
    reg = weight_regularization(w, state.cfg.gamma)
    total = reg if total is None else total + reg
    return total, normed, w


def student_objective(l_fcst, l_distill, lambda_distill: float = 1.0) -> Tensor:
    l_fcst = l_fcst if isinstance(l_fcst, Tensor) else Tensor(np.asarray(l_fcst, dtype=np.float64))
    return l_fcst + l_distill * lambda_distill


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class DualOptimizer:
    """Model parameters at lr, distillation parameters at ratio * lr."""

    def __init__(self, model_params: Mapping[str, Tensor], distill_params: Mapping[str, Tensor],
                 lr: float = 1e-3, ratio: float = 0.1, weight_decay: float = 1e-4):
        self.model = AdamW(model_params, lr=lr, weight_decay=weight_decay)
        self.distill = AdamW(distill_params, lr=lr * ratio, weight_decay=weight_decay)

    def step(self) -> None:
        # both optimizers read the gradients left by the same backward pass
        self.model.check_grads()
        self.distill.check_grads()
        self.model.step()
        self.distill.step()

    def zero_grad(self) -> None:
        self.model.zero_grad()
        self.distill.zero_grad()


def dual_step(model_params, distill_params, lr: float = 1e-3, ratio: float = 0.1,
              opt: Optional[DualOptimizer] = None) -> DualOptimizer:
    opt = opt or DualOptimizer(model_params, distill_params, lr, ratio)
    opt.step()
    return opt


# ---------------------------------------------------------------------------
# convergence and monitoring
# ---------------------------------------------------------------------------

def check_convergence(history: Sequence[np.ndarray], K: int = 10, eps: float = 1e-4) -> Optional[bool]:
    """Mean L2 step of the last K weight changes below eps.

    Returns None (not yet determinable) with fewer than K + 1 entries.
    """
    if len(history) < K + 1:
        return None
    recent = [np.asarray(h, dtype=np.float64) for h in list(history)[-(K + 1):]]
    steps = [np.linalg.norm(recent[i] - recent[i - 1]) for i in range(1, K + 1)]
    return bool(np.mean(steps) < eps)


def _ratio(num: float, den: float):
    return UNDEFINED if den == 0.0 else num / den


def monitor(prev: Optional[Mapping], cur: Mapping) -> dict:
    """Finite-difference effectiveness surrogates between consecutive steps.

    Each record needs raw ``fcst`` and ``fd`` losses, ``tau`` and ``w``.
    """
    if prev is None:
        return {"dfcst_dfd": UNDEFINED, "dfcst_dtau": UNDEFINED, "weight_change": UNDEFINED}
    d_fcst = cur["fcst"] - prev["fcst"]
    d_fd = cur.get("fd", 0.0) - prev.get("fd", 0.0)
    d_tau = cur.get("tau", 0.0) - prev.get("tau", 0.0)
    dw = float(np.linalg.norm(np.asarray(cur["w"]) - np.asarray(prev["w"])))
    return {"dfcst_dfd": _ratio(d_fcst, d_fd), "dfcst_dtau": _ratio(d_fcst, d_tau), "weight_change": dw}


class StepStream:
    """Line-delimited JSON writer for per-step distillation records.

    Fields: step, raw{fd,fcst,recon,cd}, normalized{...}, w[4], tau,
    beta_softmax[N_s], total, student, integration[N_s], m_eff{...},
    converged (true/false/"undefined").
    """

    def __init__(self, path=None):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()
            self.fh = None

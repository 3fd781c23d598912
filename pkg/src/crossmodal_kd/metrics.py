"""Point-forecast accuracy metrics and the seasonal-naive reference.

Every metric takes denormalized ``y`` and ``y_hat`` of shape (H,) or (H, D).
Multivariate inputs are scored per channel and averaged without weights.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.ndim == 1:
        y, y_hat = y[:, None], y_hat[:, None]
    if y.shape[0] < 1:
        raise ValueError("empty forecast")
    return y, y_hat


def mse_mae(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    e = y_hat - y
    return float(np.mean(e * e)), float(np.mean(np.abs(e)))


def smape(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    num = np.abs(y - y_hat)
    den = np.abs(y) + np.abs(y_hat)
    zero = den == 0
    if zero.any():
        log.info("smape: %d terms with |y| + |y_hat| = 0 set to 0", int(zero.sum()))
    terms = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    H = y.shape[0]
    return float(np.mean(200.0 / H * terms.sum(axis=0)))


def mape(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    per_channel = []
    for d in range(y.shape[1]):
        keep = y[:, d] != 0
        if not keep.any():
            raise UndefinedMetricError("mape undefined: all targets are zero")
        if not keep.all():
            log.info("mape: skipped %d zero targets in channel %d", int((~keep).sum()), d)
        yd, pd = y[keep, d], y_hat[keep, d]
        per_channel.append(100.0 * np.mean(np.abs(yd - pd) / np.abs(yd)))
    return float(np.mean(per_channel))


def mase(y, y_hat, s: int) -> float:
    """Mean absolute error scaled by the seasonal differences of ``y`` itself."""
    y, y_hat = _pair(y, y_hat)
    H = y.shape[0]
    if s < 1:
        raise ValueError("seasonality must be >= 1")
    if H <= s:
        raise UndefinedMetricError(f"mase undefined: horizon {H} <= seasonality {s}")
    per_channel = []
    for d in range(y.shape[1]):
        scale = np.mean(np.abs(y[s:, d] - y[:-s, d]))
        if scale == 0:
            raise UndefinedMetricError("mase undefined: zero seasonal-difference scale")
        per_channel.append(np.mean(np.abs(y[:, d] - y_hat[:, d])) / scale)
    return float(np.mean(per_channel))


def naive2(history, H: int, s: int) -> np.ndarray:
    """Seasonal naive: repeat the last full period of ``history`` over H steps."""
    hist = np.asarray(history, dtype=np.float64)
    squeeze = hist.ndim == 1
    if squeeze:
        hist = hist[:, None]
    if s < 1 or H < 1:
        raise ValueError("H and s must be positive")
    if hist.shape[0] < s:
        raise UndefinedMetricError(f"naive2 needs at least {s} history steps, got {hist.shape[0]}")
    T = hist.shape[0]
    h = np.arange(1, H + 1)
    idx = T - 1 + h - s * np.ceil(h / s).astype(int)
    out = hist[idx]
    return out[:, 0] if squeeze else out


def owa(smape_val: float, mase_val: float, smape_ref: float, mase_ref: float) -> float:
    if smape_ref <= 0 or mase_ref <= 0:
        raise UndefinedMetricError("owa undefined: reference metric is zero")
    return 0.5 * (smape_val / smape_ref + mase_val / mase_ref)


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        log.info("%s", exc)
        return math.nan


def evaluate_window(y, y_hat, history, s: int) -> Dict[str, float]:
    """All metrics for one window; OWA uses the seasonal naive forecast from ``history``."""
    m, a = mse_mae(y, y_hat)
    sm = smape(y, y_hat)
    ma = _or_nan(mase, y, y_hat, s)
    ref = naive2(history, np.asarray(y).shape[0], s)
    sm_ref = smape(y, ref)
    ma_ref = _or_nan(mase, y, ref, s)
    ow = _or_nan(owa, sm, ma, sm_ref, ma_ref) if not (math.isnan(ma) or math.isnan(ma_ref)) else math.nan
    return {"mse": m, "mae": a, "smape": sm, "mape": _or_nan(mape, y, y_hat), "mase": ma, "owa": ow}


def evaluate_batch(y, y_hat, history, s: int) -> Dict[str, float]:
    """MSE/MAE pooled over every entry; percentage and scaled metrics are
    per-window means ignoring undefined windows."""
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    e = y_hat - y
    out = {"mse": float(np.mean(e * e)), "mae": float(np.mean(np.abs(e)))}
    per = [evaluate_window(y[i], y_hat[i], history[i], s) for i in range(y.shape[0])]
    for k in ("smape", "mape", "mase", "owa"):
        vals = np.array([p[k] for p in per])
        vals = vals[~np.isnan(vals)]
        out[k] = float(vals.mean()) if vals.size else math.nan
    return out


@dataclass
class ResultRecord:
    dataset: str
    mode: str
    horizon: int
    seed: int
    mse: float
    mae: float
    smape: float
    mape: float
    mase: float
    owa: float

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}
        return json.dumps(d, sort_keys=True)


def write_results(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_results(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_record(dataset: str, mode: str, horizon: int, seed: int, metrics: Dict[str, float]) -> ResultRecord:
    return ResultRecord(dataset, mode, horizon, seed, *(metrics[k] for k in
                        ("mse", "mae", "smape", "mape", "mase", "owa")))

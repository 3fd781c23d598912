"""Experiment orchestration: teacher training, joint distillation, evaluation,
rendering and the gradient-check suite."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import distill as kd
from . import metrics as mx
from .autodiff import AdamW, NumericalError, Tensor, no_grad, ops, stream
from .config import RunConfig
from .models import CrossModalForecaster, build_config, load_model, model_state, load_state, save_model
from .series import (Series, SplitSpec, WindowBatch, load_csv, make_windows, normalize, normalize_stats, split,
                     synth_generate)
from .visual import export_pgm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_source(cfg: RunConfig, source: str, periodicity: int, synth_seed: int) -> Series:
    d = cfg.data
    if source.startswith("synth:"):
        kind = source.split(":", 1)[1]
        return synth_generate(kind, d.synth_length, d.synth_channels, periodicity, synth_seed, d.synth_noise)
    ts = d.timestamp_column if d.timestamp_column >= 0 else None
    return load_csv(source, d.has_header, ts, periodicity)


@dataclass
class DataBundle:
    name: str
    periodicity: int
    n_vars: int
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch


def _batch(values: np.ndarray, seq_len: int, pred_len: int, r: float) -> WindowBatch:
    return WindowBatch.from_windows(make_windows(Series(values), seq_len, pred_len, 1, r))


def prepare_data(cfg: RunConfig, target: bool = False, seq_len: Optional[int] = None,
                 pred_len: Optional[int] = None) -> DataBundle:
    """Chronological splits; validation and test lookbacks may reach back into
    the preceding split, their horizons never do."""
    d = cfg.data
    source = d.target if target else d.source
    P = (d.target_periodicity or d.periodicity) if target else d.periodicity
    seed = d.target_synth_seed if target else d.synth_seed
    seq_len = seq_len or d.seq_len
    pred_len = pred_len or d.pred_len
    s = load_source(cfg, source, P, seed)
    spec = SplitSpec(d.train_frac, d.val_frac, d.test_frac, d.few_shot)
    train, val, test = split(s, spec, min_length=1)
    n_train = len(split(s, SplitSpec(d.train_frac, d.val_frac, d.test_frac), 1)[0].values)
    n_val = val.length
    v = s.values
    r = d.norm_const
    tr = _batch(train.values, seq_len, pred_len, r)
    va = _batch(v[max(n_train - seq_len, 0):n_train + n_val], seq_len, pred_len, r)
    te = _batch(v[max(n_train + n_val - seq_len, 0):], seq_len, pred_len, r)
    name = source.split(":", 1)[1] if source.startswith("synth:") else Path(source).stem
    return DataBundle(name, P, s.n_channels, tr, va, te)


def batches(n: int, batch_size: int, rng: np.random.Generator, max_steps: int = 0) -> List[np.ndarray]:
    """Shuffled full batches; the short remainder is dropped."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    return out[:max_steps] if max_steps else out


# ---------------------------------------------------------------------------
# models and evaluation
# ---------------------------------------------------------------------------

def make_model(cfg: RunConfig, role: str, data: DataBundle) -> CrossModalForecaster:
    mc = build_config(cfg.model.profile, role, data.n_vars, cfg.data.seq_len, cfg.data.pred_len,
                      data.periodicity, cfg.model.dropout)
    return CrossModalForecaster(mc, cfg.train.seed)


def predict(model: CrossModalForecaster, x: np.ndarray, batch_size: int, periodicity: int) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(model(x[i:i + batch_size], periodicity=periodicity).pred.data)
    model.train()
    return np.concatenate(out, axis=0)


def val_mse(model, wb: WindowBatch, batch_size: int, periodicity: int) -> float:
    pred = predict(model, wb.x, batch_size, periodicity)
    return float(np.mean((pred - wb.y) ** 2))


def test_metrics(model, wb: WindowBatch, batch_size: int, periodicity: int) -> Dict[str, float]:
    pred = wb.denormalize(predict(model, wb.x, batch_size, periodicity))
    return mx.evaluate_batch(wb.raw_horizon(), pred, wb.raw_lookback(), periodicity)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}")


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.train.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _extra(cfg: RunConfig, data: DataBundle) -> dict:
    return {"data": {"norm_const": cfg.data.norm_const, "periodicity": data.periodicity,
                     "dataset": data.name}}


# ---------------------------------------------------------------------------
# teacher training
# ---------------------------------------------------------------------------

def run_train(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    t = cfg.train
    data = prepare_data(cfg)
    model = make_model(cfg, "teacher", data)
    opt = AdamW(model.params(), lr=t.learning_rate, weight_decay=t.weight_decay)
    shuffle = stream(t.seed, "shuffle")
    epochs, trace = [], []
    best, best_epoch, best_state = math.inf, -1, model_state(model)
    for epoch in range(t.train_epochs):
        losses = []
        for step, idx in enumerate(batches(len(data.train), t.batch_size, shuffle, t.max_steps_per_epoch)):
            b = data.train.take(idx)
            try:
                out = model(b.x)
                loss = ops.smooth_l1(out.pred, b.y)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from None
            _check_finite(float(loss.data), f"epoch {epoch} step {step}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data))
        trace.extend(losses)
        vm = val_mse(model, data.val, t.batch_size, data.periodicity)
        epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse": vm})
        log.info("epoch %d train %.6f val %.6f", epoch, epochs[-1]["train_loss"], vm)
        if vm < best:
            best, best_epoch, best_state = vm, epoch, model_state(model)
        elif epoch - best_epoch >= t.patience:
            break
    load_state(model, best_state)
    out_dir = _out_dir(cfg)
    save_model(out_dir / "teacher.ckpt", model, _extra(cfg, data))
    m = test_metrics(model, data.test, t.batch_size, data.periodicity)
    mx.write_results(out_dir / "results.jsonl",
                     [mx.make_record(data.name, t.mode, cfg.data.pred_len, t.seed, m)])
    record = {"config": cfg.to_dict(), "epochs": epochs, "best_epoch": best_epoch, "test": m,
              "step_losses": trace, "convergence_step": None, "wall_clock": time.perf_counter() - t0}
    _write_json(out_dir / "record.json", record)
    return record


# ---------------------------------------------------------------------------
# joint distillation
# ---------------------------------------------------------------------------

class Distiller:
    """Teacher, student, aligner and distillation state for one joint run.

    With ``use_kd`` false there is no teacher and no aligner: the student
    trains on its own forecasting term through the same balanced objective.
    """

    def __init__(self, cfg: RunConfig, data: DataBundle, use_kd: bool):
        self.cfg = cfg
        self.use_kd = use_kd
        dcfg = cfg.distill.to_engine()
        if not use_kd:
            dcfg.fixed_weights = {**dcfg.fixed_weights, "fd": 0.0, "cd": 0.0}
        self.dcfg = dcfg
        seed = cfg.train.seed
        self.student = make_model(cfg, "student", data)
        self.teacher = make_model(cfg, "teacher", data) if use_kd else None
        self.state = kd.DistillState(dcfg, with_temperature=use_kd)
        model_params, distill_params = {}, {"theta_w": self.state.theta_w}
        if use_kd:
            d_s, d_t = self.student.d_fus, self.teacher.d_fus
            self.aligner = kd.PyramidAligner(d_s, d_t, dcfg.n_scales, stream(seed, "aligner/init"),
                                             stream(seed, "aligner/dropout"), dcfg.align_dropout)
            if self.teacher.n_tokens() != self.student.n_tokens():
                raise ValueError("teacher and student token counts differ")
            for k, p in self.teacher.params().items():
                model_params["teacher." + k] = p
            distill_params["theta_tau"] = self.state.theta_tau
            distill_params["beta"] = self.aligner.beta
        else:
            self.aligner = None
        for k, p in self.student.params().items():
            model_params["student." + k] = p
        if use_kd:
            for k, p in self.aligner.params().items():
                if k != "beta":
                    model_params["aligner." + k] = p
        t = cfg.train
        self.opt = kd.DualOptimizer(model_params, distill_params, t.learning_rate, dcfg.lr_ratio, t.weight_decay)
        self.prev_log = None

    def step(self, b: WindowBatch) -> dict:
        dcfg, state = self.dcfg, self.state
        out_s = self.student(b.x)
        l_fcst = ops.smooth_l1(out_s.pred, b.y)
        losses = {"fcst": l_fcst}
        extra = {}
        if self.use_kd:
            out_t = self.teacher(b.x)
            losses["recon"] = ops.smooth_l1(out_t.pred, b.y)
            tau = state.temperature()
            paths = self.aligner.pathways(out_s.fused)
            aligned = self.aligner.combine(paths)
            losses["fd"] = kd.feature_distill(aligned, out_t.fused.data, tau, dcfg.lambda_mse,
                                              dcfg.lambda_cos, dcfg.lambda_kl)
            losses["cd"] = kd.correlation_distill(out_t.attention.data, out_s.attention, tau)
            extra["tau"] = float(tau.data)
            extra["beta_softmax"] = self.aligner.scale_weights().data.tolist()
            extra["integration"] = kd.integration_scores([p.data for p in paths], out_t.fused.data).tolist()
        raw = {k: float(v.data) for k, v in losses.items()}
        for k, v in raw.items():
            _check_finite(v, f"step {state.step} ({k})")
        state.update_trackers(raw)
        total, normed, w = kd.total_distill_loss(losses, state, normalize=state.warm())
        objective = kd.student_objective(l_fcst, total, dcfg.lambda_distill)
        objective.backward()
        self.opt.step()
        self.opt.zero_grad()
        w_now = w.data.copy()
        state.history.append(w_now)
        state.step += 1
        reg = float(kd.weight_regularization(w_now, dcfg.gamma).data)
        cur = {"fcst": raw["fcst"], "fd": raw.get("fd", 0.0), "tau": extra.get("tau", 0.0), "w": w_now}
        conv = kd.check_convergence(state.history, dcfg.conv_window, dcfg.conv_eps)
        rec = {
            "step": state.step - 1,
            "raw": raw,
            "normalized": {k: float(v.data) for k, v in normed.items()},
            "w": w_now.tolist(),
            "reg": reg,
            "total": float(total.data),
            "student": float(objective.data),
            "m_eff": kd.monitor(self.prev_log, cur),
            "converged": kd.UNDEFINED if conv is None else conv,
            **extra,
        }
        self.prev_log = cur
        return rec

    def train(self, mode: bool = True) -> None:
        for m in (self.student, self.teacher, self.aligner):
            if m is not None:
                m.train(mode)


def run_distill(cfg: RunConfig, use_kd: Optional[bool] = None, stream_path: Optional[str] = "auto") -> dict:
    """Joint teacher/student training under the balanced objective.

    ``use_kd`` defaults to ``cfg.distill.kd``; false gives the student-only
    baseline.
    """
    t0 = time.perf_counter()
    t = cfg.train
    use_kd = cfg.distill.kd if use_kd is None else use_kd
    data = prepare_data(cfg)
    dist = Distiller(cfg, data, use_kd)
    out_dir = _out_dir(cfg)
    sp = out_dir / "steps.jsonl" if stream_path == "auto" else stream_path
    steps = kd.StepStream(sp)
    shuffle = stream(t.seed, "shuffle")
    epochs, trace, convergence_step = [], [], None
    best, best_epoch = math.inf, -1
    best_s = model_state(dist.student)
    best_t = model_state(dist.teacher) if use_kd else None
    try:
        for epoch in range(t.train_epochs):
            losses = []
            for idx in batches(len(data.train), t.batch_size, shuffle, t.max_steps_per_epoch):
                try:
                    rec = dist.step(data.train.take(idx))
                except NumericalError as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {dist.state.step}: {exc}") from None
                steps.write(rec)
                losses.append(rec["raw"]["fcst"])
                trace.append({k: rec[k] for k in ("raw", "total", "student", "w")})
                if convergence_step is None and rec["converged"] is True:
                    convergence_step = rec["step"]
            vm = val_mse(dist.student, data.val, t.batch_size, data.periodicity)
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse": vm}
            epochs.append(entry)
            log.info("epoch %d fcst %.6f val %.6f", epoch, entry["train_loss"], vm)
            if vm < best:
                best, best_epoch = vm, epoch
                best_s = model_state(dist.student)
                best_t = model_state(dist.teacher) if use_kd else None
            elif epoch - best_epoch >= t.patience:
                break
    finally:
        steps.close()
    load_state(dist.student, best_s)
    save_model(out_dir / "student.ckpt", dist.student, _extra(cfg, data))
    m = test_metrics(dist.student, data.test, t.batch_size, data.periodicity)
    rows = [mx.make_record(data.name, t.mode, cfg.data.pred_len, t.seed, m)]
    teacher_m = None
    if use_kd:
        load_state(dist.teacher, best_t)
        save_model(out_dir / "teacher.ckpt", dist.teacher, _extra(cfg, data))
        teacher_m = test_metrics(dist.teacher, data.test, t.batch_size, data.periodicity)
        rows.append(mx.make_record(data.name, t.mode + ":teacher", cfg.data.pred_len, t.seed, teacher_m))
    mx.write_results(out_dir / "results.jsonl", rows)
    record = {"config": cfg.to_dict(), "kd": use_kd, "epochs": epochs, "best_epoch": best_epoch, "test": m,
              "teacher_test": teacher_m, "step_losses": trace, "convergence_step": convergence_step,
              "wall_clock": time.perf_counter() - t0}
    _write_json(out_dir / "record.json", record)
    return record


# ---------------------------------------------------------------------------
# evaluation and rendering
# ---------------------------------------------------------------------------

def run_eval(cfg: RunConfig, checkpoint: Optional[str] = None) -> dict:
    """Test-split metrics of a saved model; zero-shot mode scores it on the target source."""
    t = cfg.train
    model, meta = load_model(checkpoint or t.checkpoint)
    mc = model.cfg
    zero_shot = t.mode == "zero_shot"
    data = prepare_data(cfg, target=zero_shot, seq_len=mc.seq_len, pred_len=mc.pred_len)
    if data.n_vars != mc.n_vars:
        raise ValueError(f"checkpoint expects {mc.n_vars} variables, data has {data.n_vars}")
    m = test_metrics(model, data.test, t.batch_size, data.periodicity)
    mode = t.mode if t.mode in ("eval", "zero_shot") else "eval"
    rec = mx.make_record(data.name, mode, mc.pred_len, t.seed, m)
    mx.write_results(_out_dir(cfg) / "results.jsonl", [rec])
    return {"metrics": m, "record": json.loads(rec.to_json()), "source": meta.get("data", {})}


def run_render(cfg: RunConfig, window_index: int, out_path: str,
               series: Optional[Series] = None) -> dict:
    """Write one PGM per image channel for window ``window_index`` of the series."""
    d = cfg.data
    s = series if series is not None else load_source(cfg, d.source, d.periodicity, d.synth_seed)
    n = s.length - d.seq_len + 1
    if not 0 <= window_index < n:
        raise IndexError(f"window index {window_index} out of range (0..{n - 1})")
    look = s.values[window_index:window_index + d.seq_len]
    mean, std = normalize_stats(look)
    x = normalize(look, mean, std, d.norm_const)[None]
    if cfg.train.checkpoint:
        model, _ = load_model(cfg.train.checkpoint)
    else:
        mc = build_config(cfg.model.profile, "teacher", s.n_channels, d.seq_len, d.pred_len, d.periodicity)
        model = CrossModalForecaster(mc, cfg.train.seed)
    with no_grad():
        img = model.render(x, d.periodicity)[0]
    base = Path(out_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(img.shape[0]):
        p = base.with_name(f"{base.stem}_c{c}.pgm")
        export_pgm(img[c], p)
        paths.append(str(p))
    return {"image": img, "paths": paths}


def fold_autocorrelation(img: np.ndarray, fold_rows: int) -> float:
    """Pearson correlation between image rows one fold-row apart.

    ``fold_rows`` is the row count of the folded grid before resizing; with
    corner-aligned resizing to H rows consecutive fold rows sit
    (H - 1) / (fold_rows - 1) pixels apart.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    H = img.shape[-2]
    lag = int(round((H - 1) / (fold_rows - 1))) if fold_rows > 1 else 0
    if lag <= 0 or lag >= H:
        raise ValueError("fold lag out of range")
    a = img[:, :-lag, :].ravel()
    b = img[:, lag:, :].ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 1.0

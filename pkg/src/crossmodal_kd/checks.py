"""Finite-difference verification suite over every differentiable piece.

Each item builds a small random instance, reduces its output to a scalar
with fixed random weights (a plain sum would hide errors in, for example,
softmax), and compares backward() with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import distill as kd
from .autodiff import GradCheckReport, Tensor, grad_check, inject_fault, ops, parameter, stream
from .models import (CrossModalForecaster, FusionConfig, ModelConfig, VisionEncoder, VisionEncoderConfig,
                     CrossModalFusion, predict)
from .series import patchify
from .temporal import TemporalEncoder, TemporalEncoderConfig
from .visual import AugmentConfig, VisualAugmenter, bilinear_resize, pixel_normalize

OP_TOL = 1e-4
E2E_TOL = 1e-3
STEP = 1e-5
# gradients below this magnitude are compared absolutely: central differences
# at STEP carry round-off near 1e-10, which is noise for exactly-zero entries
# such as a key bias under softmax shift invariance
FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} worst rel err {self.report.max_rel_error:.2e}" \
               f"  (tol {self.report.tol:.0e}, {self.report.n_checked} coords)"


def _away_from(rng, shape, lo=0.2, hi=2.0):
    """Random values with |v| in [lo, hi] (keeps kinks out of the stencil)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _items(seed: int) -> List[Tuple[str, Callable[[], Tuple[Callable[[], Tensor], Sequence[Tensor]]], float]]:
    """(name, builder, tol); builders return (closure, tensors)."""
    items = []

    def item(name, tol=OP_TOL):
        def deco(fn):
            items.append((name, fn, tol))
            return fn
        return deco

    def rng_for(name):
        return stream(seed, f"gradcheck/{name}")

    def unary(name, op, lo=0.2, hi=2.0, positive=False):
        @item(name)
        def _():
            g = rng_for(name)
            data = g.uniform(lo, hi, size=(3, 4)) if positive else _away_from(g, (3, 4), lo, hi)
            a = parameter(data)
            r = g.normal(size=op(a).shape)
            return (lambda: ops.weighted_sum(op(a), r)), [a]

    def binary(name, op, positive_b=False):
        @item(name)
        def _():
            g = rng_for(name)
            a = parameter(g.normal(size=(3, 4)))
            b = parameter(g.uniform(0.5, 2.0, size=(4,)) if positive_b else g.normal(size=(4,)))
            r = g.normal(size=(3, 4))
            return (lambda: ops.weighted_sum(op(a, b), r)), [a, b]

    binary("add", ops.add)
    binary("sub", ops.sub)
    binary("mul", ops.mul)
    binary("div", ops.div, positive_b=True)
    unary("neg", ops.neg)
    unary("exp", ops.exp)
    unary("log", ops.log, positive=True)
    unary("relu", ops.relu)
    unary("sigmoid", ops.sigmoid)
    unary("gelu", ops.gelu)
    unary("tanh", ops.tanh)
    unary("power", lambda a: ops.power(a, 3.0))
    unary("sqrt", ops.sqrt, positive=True)
    unary("clamp_min", lambda a: ops.clamp_min(a, 0.05))
    unary("sum", lambda a: ops.sum(a, axis=1, keepdims=True))
    unary("mean", lambda a: ops.mean(a, axis=0))
    unary("reshape", lambda a: ops.reshape(a, (2, 6)))
    unary("transpose", lambda a: ops.transpose(a, (1, 0)))
    unary("swapaxes", lambda a: ops.swapaxes(a, 0, 1))
    unary("index", lambda a: ops.index(a, (slice(0, 2), slice(1, 4))))
    unary("take", lambda a: ops.take(a, np.array([0, 2, 2, 3]), axis=1))
    unary("softmax", lambda a: ops.softmax(a, axis=-1))
    unary("log_softmax", lambda a: ops.log_softmax(a, axis=-1))

    @item("concat")
    def _():
        g = rng_for("concat")
        a, b = parameter(g.normal(size=(2, 3))), parameter(g.normal(size=(2, 2)))
        r = g.normal(size=(2, 5))
        return (lambda: ops.weighted_sum(ops.concat([a, b], axis=1), r)), [a, b]

    @item("stack")
    def _():
        g = rng_for("stack")
        a, b = parameter(g.normal(size=(2, 3))), parameter(g.normal(size=(2, 3)))
        r = g.normal(size=(2, 2, 3))
        return (lambda: ops.weighted_sum(ops.stack([a, b], axis=1), r)), [a, b]

    @item("matmul")
    def _():
        g = rng_for("matmul")
        a, b = parameter(g.normal(size=(2, 3, 4))), parameter(g.normal(size=(4, 5)))
        r = g.normal(size=(2, 3, 5))
        return (lambda: ops.weighted_sum(ops.matmul(a, b), r)), [a, b]

    @item("linear")
    def _():
        g = rng_for("linear")
        x, w, b = parameter(g.normal(size=(3, 4))), parameter(g.normal(size=(5, 4))), parameter(g.normal(size=5))
        r = g.normal(size=(3, 5))
        return (lambda: ops.weighted_sum(ops.linear(x, w, b), r)), [x, w, b]

    @item("conv1d")
    def _():
        g = rng_for("conv1d")
        x, k, b = parameter(g.normal(size=(2, 3, 7))), parameter(g.normal(size=(4, 3, 3))), parameter(g.normal(size=4))
        # stride 2 with padding exercises both the stepping and the border
        r = g.normal(size=(2, 4, 4))
        return (lambda: ops.weighted_sum(ops.conv1d(x, k, b, 2, 1), r)), [x, k, b]

    @item("conv2d")
    def _():
        g = rng_for("conv2d")
        x, k, b = parameter(g.normal(size=(2, 3, 5, 6))), parameter(g.normal(size=(4, 3, 3, 3))), parameter(g.normal(size=4))
        r = g.normal(size=(2, 4, 3, 3))
        return (lambda: ops.weighted_sum(ops.conv2d(x, k, b, 2, 1), r)), [x, k, b]

    @item("layer_norm")
    def _():
        g = rng_for("layer_norm")
        x, ga, be = parameter(g.normal(size=(3, 5))), parameter(g.normal(size=5)), parameter(g.normal(size=5))
        r = g.normal(size=(3, 5))
        return (lambda: ops.weighted_sum(ops.layer_norm(x, ga, be), r)), [x, ga, be]

    @item("smooth_l1")
    def _():
        g = rng_for("smooth_l1")
        p = parameter(g.normal(size=(4, 3)))
        d = _away_from(g, (4, 3), 0.1, 0.8) * np.where(g.random((4, 3)) < 0.5, 1.0, 3.0)
        t = Tensor(p.data - d)
        return (lambda: ops.smooth_l1(p, t)), [p]

    @item("dropout")
    def _():
        g = rng_for("dropout")
        x = parameter(g.normal(size=(3, 4)))
        mask = (g.random((3, 4)) >= 0.3) / 0.7
        r = g.normal(size=(3, 4))
        return (lambda: ops.weighted_sum(ops.dropout(x, 0.3, None, True, mask=mask), r)), [x]

    # ---- composite stages -------------------------------------------------

    @item("patchify")
    def _():
        g = rng_for("patchify")
        x = parameter(g.normal(size=(2, 10, 2)))
        r = g.normal(size=(2, 3, 8))
        return (lambda: ops.weighted_sum(patchify(x, 4, 3, 2), r)), [x]

    @item("bilinear_resize")
    def _():
        g = rng_for("bilinear")
        x = parameter(g.normal(size=(1, 2, 3, 4)))
        r = g.normal(size=(1, 2, 7, 5))
        return (lambda: ops.weighted_sum(bilinear_resize(x, 7, 5), r)), [x]

    @item("pixel_normalize")
    def _():
        g = rng_for("pixnorm")
        x = parameter(g.normal(size=(2, 1, 3, 3)))
        _, bounds = pixel_normalize(x.data)
        r = g.normal(size=(2, 1, 3, 3))
        return (lambda: ops.weighted_sum(pixel_normalize(x, bounds)[0], r) * 1e-2), [x]

    @item("visual_augment")
    def _():
        # gradient w.r.t. the augmented tensor; the spectrum channel is
        # preprocessing, so the raw series is not perturbed here
        g = rng_for("visual")
        aug = VisualAugmenter(AugmentConfig(hidden=4, image_size=6, c_img=2, periodicity=4), g)
        xa = parameter(g.normal(size=(1, 8, 1, 3)))
        cos = g.normal(size=(1, 8, 1, 1))
        _, bounds = pixel_normalize(bilinear_resize(aug.multiscale(Tensor(xa.data), cos, 4), 6, 6).data)
        r = g.normal(size=(1, 2, 6, 6))

        def fn():
            img = bilinear_resize(aug.multiscale(xa, cos, 4), 6, 6)
            return ops.weighted_sum(pixel_normalize(img, bounds)[0], r) * 1e-2

        return fn, [xa] + list(aug.params().values())

    @item("temporal_encoder")
    def _():
        g = rng_for("temporal")
        enc = TemporalEncoder(TemporalEncoderConfig(d_model=8, e_layers=1, n_heads=2, dropout=0.0, patch_len=4,
                                                    stride=2, padding=2), 2, g, g)
        x = parameter(g.normal(size=(2, 8, 2)))
        r = g.normal(size=(2, 8))
        ra = g.normal(size=(2, 2, 4, 4))
        return (lambda: ops.weighted_sum(enc(x).h, r) + ops.weighted_sum(enc(x).attention, ra)), [x] + list(enc.params().values())

    @item("vision_encode")
    def _():
        g = rng_for("vision")
        enc = VisionEncoder(VisionEncoderConfig(d_vis=4, depth=2), 3, 5, g)
        img = parameter(g.uniform(0, 255, size=(2, 3, 8, 8)))
        r = g.normal(size=(2, 5))
        return (lambda: ops.weighted_sum(enc(img), r)), [img] + list(enc.params().values())

    @item("fuse")
    def _():
        g = rng_for("fuse")
        fu = CrossModalFusion(6, FusionConfig(d_fus=8, n_heads=2, dropout=0.0), g, g)
        h, v = parameter(g.normal(size=(3, 6))), parameter(g.normal(size=(3, 8)))
        r = g.normal(size=(3, 8))
        return (lambda: ops.weighted_sum(fu(h, v), r)), [h, v] + list(fu.params().values())

    @item("predict")
    def _():
        g = rng_for("predict")
        from .autodiff import Linear
        head = Linear(5, 6, g)
        f = parameter(g.normal(size=(2, 5)))
        r = g.normal(size=(2, 3, 2))
        return (lambda: ops.weighted_sum(predict(f, head, 3, 2), r)), [f, head.weight, head.bias]

    @item("pyramid_align")
    def _():
        g = rng_for("pyramid")
        al = kd.PyramidAligner(4, 6, 3, g, g, dropout=0.0)
        al.beta.data = g.normal(size=3)
        f = parameter(g.normal(size=(2, 4)))
        r = g.normal(size=(2, 6))
        return (lambda: ops.weighted_sum(al(f), r)), [f] + list(al.params().values())

    @item("correlation_distill")
    def _():
        g = rng_for("cd")
        pt = g.dirichlet(np.ones(4), size=(2, 4))
        logits = parameter(g.normal(size=(2, 4, 4)))
        th = parameter(np.array(0.3))
        return (lambda: kd.correlation_distill(pt, ops.softmax(logits, -1), kd.temperature(th))), [logits, th]

    @item("feature_distill")
    def _():
        g = rng_for("fd")
        fs = parameter(g.normal(size=(3, 5)))
        ft = g.normal(size=(3, 5))
        th = parameter(np.array(-0.4))
        return (lambda: kd.feature_distill(fs, ft, kd.temperature(th))), [fs, th]

    @item("total_distill_loss")
    def _():
        g = rng_for("total")
        st = kd.DistillState(kd.DistillConfig())
        st.theta_w.data = g.normal(size=4) * 0.5
        for k in kd.COMPONENTS:
            st.trackers[k] = float(g.uniform(0.5, 2.0))
        comps = {k: parameter(np.array(g.uniform(0.1, 2.0))) for k in kd.COMPONENTS}
        return (lambda: kd.total_distill_loss(comps, st)[0]), [st.theta_w] + list(comps.values())

    @item("end_to_end", tol=E2E_TOL)
    def _():
        return end_to_end_instance(seed)

    return items


def micro_model_config(role: str, d_vis: int, d_fus: int) -> ModelConfig:
    return ModelConfig(
        role=role, n_vars=2, seq_len=8, pred_len=3,
        temporal=TemporalEncoderConfig(d_model=8, e_layers=1, n_heads=2, dropout=0.0, patch_len=4, stride=2,
                                       padding=2),
        augment=AugmentConfig(hidden=4, image_size=8, c_img=2, periodicity=4),
        vision=VisionEncoderConfig(role=role, d_vis=d_vis, depth=2),
        fusion=FusionConfig(d_fus=d_fus, n_heads=2, dropout=0.0),
    )


def end_to_end_instance(seed: int):
    """Teacher + student + aligner + balanced objective on a micro problem."""
    g = stream(seed, "gradcheck/e2e")
    teacher = CrossModalForecaster(micro_model_config("teacher", 6, 8), seed)
    student = CrossModalForecaster(micro_model_config("student", 3, 4), seed + 1)
    al = kd.PyramidAligner(4, 8, 3, stream(seed, "gradcheck/al"), None, dropout=0.0)
    al.beta.data = g.normal(size=3) * 0.3
    st = kd.DistillState(kd.DistillConfig())
    st.theta_w.data = st.theta_w.data + g.normal(size=4) * 0.2
    for k in kd.COMPONENTS:
        st.trackers[k] = float(g.uniform(0.5, 2.0))
    st.step = st.cfg.warmup
    x = g.normal(size=(2, 8, 2))
    y = g.normal(size=(2, 3, 2))
    for m in (teacher, student, al):
        m.eval()
    base_t = teacher(x)
    tb = base_t.image_bounds
    sb = student(x).image_bounds
    # teacher targets are stop-gradient in the objective, so they are frozen
    # at the base point here as well
    f_t, p_t = base_t.fused.data.copy(), base_t.attention.data.copy()

    def objective():
        ot = teacher(x, tb)
        os_ = student(x, sb)
        tau = st.temperature()
        losses = {
            "fcst": ops.smooth_l1(os_.pred, y),
            "recon": ops.smooth_l1(ot.pred, y),
            "fd": kd.feature_distill(al(os_.fused), f_t, tau),
            "cd": kd.correlation_distill(p_t, os_.attention, tau),
        }
        total, _, _ = kd.total_distill_loss(losses, st)
        return kd.student_objective(losses["fcst"], total, 1.0)

    tensors = (list(teacher.params().values()) + list(student.params().values()) + list(al.params().values())
               + [st.theta_w, st.theta_tau])
    return objective, tensors


def run_suite(seed: int = 0, fault: Optional[str] = None, max_coords: int = 24,
              only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    results = []
    for name, build, tol in _items(seed):
        if only and name not in only:
            continue
        fn, tensors = build()
        t0 = time.perf_counter()
        if fault:
            with inject_fault(fault):
                rep = grad_check(fn, tensors, h=STEP, tol=tol, floor=FLOOR, max_coords=max_coords,
                                 rng=stream(seed, f"gradcheck/pick/{name}"))
        else:
            rep = grad_check(fn, tensors, h=STEP, tol=tol, floor=FLOOR, max_coords=max_coords,
                             rng=stream(seed, f"gradcheck/pick/{name}"))
        results.append(CheckResult(name, rep, time.perf_counter() - t0))
    return results

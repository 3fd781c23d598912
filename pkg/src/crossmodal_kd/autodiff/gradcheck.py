"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: int
    worst_index: tuple
    analytic: float
    numeric: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:.0e}) "
                f"at tensor {self.worst_tensor} index {self.worst_index}: "
                f"analytic={self.analytic:.6e} numeric={self.numeric:.6e} [{self.n_checked} coords]")


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backward() against (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``f`` is called with no arguments when ``x`` is a sequence of tensors the
    closure already captures, or with ``x`` when a single tensor is given.
    Relative error per coordinate is |a-n| / max(|a|, |n|, floor); ``floor``
    keeps round-off on near-zero gradients from counting as failure.
    ``max_coords`` samples that many coordinates per tensor.
    """
    single = isinstance(x, Tensor)
    tensors = [x] if single else list(x)
    call = (lambda: f(x)) if single else f

    for t in tensors:
        t.grad = None
    out = call()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = GradCheckReport(0.0, -1, (), 0.0, 0.0, tol, 0)
    n_checked = 0
    with no_grad():
        for ti, t in enumerate(tensors):
            coords = list(np.ndindex(*t.shape)) if t.ndim else [()]
            if max_coords is not None and len(coords) > max_coords:
                gen = rng if rng is not None else np.random.default_rng(0)
                pick = gen.choice(len(coords), size=max_coords, replace=False)
                coords = [coords[i] for i in sorted(pick)]
            for idx in coords:
                orig = t.data[idx]
                t.data[idx] = orig + h
                fp = float(call().data)
                t.data[idx] = orig - h
                fm = float(call().data)
                t.data[idx] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(analytic[ti][idx])
                err = relative_error(ana, num, floor)
                n_checked += 1
                if err > worst.max_rel_error or worst.worst_tensor < 0:
                    worst = GradCheckReport(err, ti, tuple(int(i) for i in idx), ana, num, tol, 0)
    worst.n_checked = n_checked
    return worst

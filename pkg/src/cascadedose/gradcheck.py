"""Central-difference gradient checking in double precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import NumericalError, Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    element_count: int
    passed: bool

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.op_name:<40s} {self.max_relative_error:10.3e} {self.element_count:8d}  {flag}"


def fd_step(x: float) -> float:
    return 6e-6 * max(1.0, abs(x))


def relative_error(ga: np.ndarray, gn: np.ndarray) -> np.ndarray:
    return np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))


def _scalarize(f, probe_seed):
    cache = {}

    def g(*args):
        out = f(*args)
        if out.size == 1:
            return ops.reshape(out, ())
        if "proj" not in cache:
            cache["proj"] = Tensor(np.random.default_rng(probe_seed).standard_normal(out.shape))
        return ops.sum(ops.mul(out, cache["proj"]))

    return g


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
               name: str = "f", max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*inputs)`` with central differences.

    Every input with ``requires_grad`` is checked. Non-scalar outputs are
    reduced by a fixed random projection. ``max_elements`` caps the number of
    coordinates probed per input (sampled with ``seed``); None checks all.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            t.data = t.data.astype(np.float64)
    fs = _scalarize(f, seed + 7919)

    for t in inputs:
        t.grad = None
    out = fs(*inputs)
    if not np.isfinite(out.data).all():
        raise NumericalError(f"{name}: non-finite forward value")
    out.backward()

    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for t in inputs:
        if not t.requires_grad:
            continue
        ga_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            h = fd_step(orig)
            flat[i] = orig + h
            fp = fs(*inputs).item()
            flat[i] = orig - h
            fm = fs(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"{name}: non-finite value while perturbing element {i}")
            gn = (fp - fm) / (2.0 * h)
            err = float(relative_error(np.float64(ga_full.reshape(-1)[i]), np.float64(gn)))
            worst = max(worst, err)
            count += 1
    return GradCheckReport(name, worst, count, worst < tol)

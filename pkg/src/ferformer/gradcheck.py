"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DeterminismError, GraphError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    tol: float
    worst: tuple = field(default=())

    def __bool__(self) -> bool:
        return self.passed


def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*x)`` with central differences.

    With ``max_coords`` only that many randomly chosen entries per input are
    perturbed (all of them otherwise).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*xs)
    if out.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    T.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    with T.no_grad():
        v1 = f(*xs).data.copy()
        v2 = f(*xs).data.copy()
    if not (np.array_equal(v1, out.data) and np.array_equal(v1, v2)):
        raise DeterminismError("function under check returned different values for identical inputs")

    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0.0, (), 0
    with T.no_grad():
        for k, t in enumerate(xs):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            ga = analytic[k].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*xs).data)
                flat[i] = orig - eps
                fm = float(f(*xs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = float(rel_err(ga[i], num))
                checked += 1
                if err > worst:
                    worst, worst_at = err, (k, int(i), float(ga[i]), num)
    return GradCheckReport(worst, worst <= tol, checked, tol, worst_at)

"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import GradTape, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float  # over probed elements that are not kinks
    n_checked: int
    worst_index: tuple[int, ...] | None
    # elements where one-sided differences disagree: f is not differentiable there
    kinks: list[tuple[int, ...]] = field(default_factory=list)
    failures: list[tuple[int, ...]] = field(default_factory=list)


@dataclass
class GradCheckReport:
    params: dict[str, ParamCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(not p.failures for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        errs = [p.max_rel_error for p in self.params.values()]
        return max(errs) if errs else 0.0

    @property
    def n_kinks(self) -> int:
        return sum(len(p.kinks) for p in self.params.values())

    def summary(self) -> str:
        lines = []
        for p in self.params.values():
            status = "ok" if not p.failures else f"FAIL at {p.failures[:3]}"
            kinks = f" kinks={len(p.kinks)}" if p.kinks else ""
            lines.append(f"{p.name:40s} n={p.n_checked:4d} max_rel={p.max_rel_error:.2e} {status}{kinks}")
        return "\n".join(lines)


# Central differences at eps = 1e-5 carry ~1e-10 absolute error (truncation
# plus roundoff), so gradients below ~1e-6 cannot be resolved to 1e-4 relative.
FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    names: list[str] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(store)`` with central differences.

    ``max_elements`` caps the number of probed entries per parameter; the
    probed entries are drawn without replacement by a seeded generator.
    An element over ``tol`` is flagged as a kink rather than failed when
    its one-sided differences split by at least the central-difference error,
    the signature of a non-differentiable point (ReLU at 0, a pooling tie)
    within ``eps`` of the probe.
    """
    store.zero_grad()
    with GradTape() as tape:
        loss = f(store)
    if loss.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar function")
    f0 = _scalar(f, store)
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    report: dict[str, ParamCheck] = {}
    for name in names or store.names():
        t = store[name]
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n)
        if max_elements is not None and n > max_elements:
            idx = np.sort(rng.choice(n, size=max_elements, replace=False))
        check = ParamCheck(name, 0.0, len(idx), None)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = _scalar(f, store)
            flat[k] = orig - eps
            fm = _scalar(f, store)
            flat[k] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = float(relative_error(a, numeric))
            pos = tuple(int(i) for i in np.unravel_index(k, t.shape))
            if err > tol:
                # A kink within eps of the probe splits the one-sided slopes by
                # about twice the central-difference error; at a smooth point the
                # split is only curvature * eps, far below a wrong-gradient error.
                fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
                if abs(fwd - bwd) >= abs(numeric - a):
                    check.kinks.append(pos)
                    continue
                check.failures.append(pos)
            if err > check.max_rel_error:
                check.max_rel_error, check.worst_index = err, pos
        report[name] = check
    return GradCheckReport(report, tol)


def _scalar(f, store) -> float:
    val = f(store).data
    v = float(np.asarray(val).reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("function under finite-difference check returned a non-finite value")
    return v

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .layers import Parameter


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}) "
            f"over {self.n_checked} entries, worst at {self.worst}"
        )


def relative_error(a: float, n: float, floor: float = 1e-4) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    fn: Callable[[bool], float],
    params: Mapping[str, Parameter] | Iterable[tuple[str, Parameter]],
    *,
    tolerance: float = 1e-2,
    h: float = 1e-3,
    max_entries: int = 24,
    seed: int = 0,
    dtype=np.float64,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``fn(backward)`` evaluates the scalar loss of a model fragment; with
    ``backward=True`` it must also leave d(loss)/d(param) in each ``.grad``.
    Parameter values are promoted to ``dtype`` for the duration of the check
    and restored afterwards. At most ``max_entries`` entries per parameter are
    probed, chosen with a seeded generator.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    saved = [(p, p.value, p.grad) for _, p in items]
    rng = np.random.default_rng(seed)
    try:
        for p, value, grad in saved:
            p.value = value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        fn(True)
        analytic = [p.grad.copy() for _, p in items]
        worst_err, worst_at, n_checked = 0.0, "", 0
        for (name, p), g in zip(items, analytic):
            flat = p.value.reshape(-1)
            if flat.size <= max_entries:
                picks = np.arange(flat.size)
            else:
                picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                up = fn(False)
                flat[i] = orig - h
                down = fn(False)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = relative_error(float(g.reshape(-1)[i]), numeric)
                n_checked += 1
                if err > worst_err or not worst_at:
                    worst_err, worst_at = err, f"{name}[{int(i)}]"
    finally:
        for p, value, grad in saved:
            p.value, p.grad = value, grad
    return GradCheckReport(worst_err, tolerance, n_checked, worst_at)

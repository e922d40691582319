from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .params import ParamSet
from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    redrawn: int = 0

    @property
    def worst(self):
        return max(self.probes, key=lambda p: _rel(p[2], p[3])) if self.probes else None


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    n_probes: int = 64,
    h: float = 1e-5,
    seed: int = 0,
    names: list[str] | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
    kink_tol: float = 1e-2,
    max_redraws: int = 1000,
) -> GradCheckResult:
    """Compare analytic gradients with central differences at random coordinates.

    Probes cycle through ``names`` (default: every parameter) so each tensor is
    visited. A probe whose forward and backward one-sided slopes disagree by
    more than ``kink_tol`` (relative) straddles a non-differentiable point and
    is re-drawn. ``loss_fn`` must be deterministic.
    """
    rng = np.random.default_rng(seed)
    names = list(names if names is not None else params)
    if analytic is None:
        analytic = backward(loss_fn(params), {n: params[n] for n in names})
    f0 = float(loss_fn(params).item())
    order = [names[i] for i in rng.permutation(len(names))]
    result = GradCheckResult(max_rel_error=0.0)
    redraws = 0
    k = 0
    while len(result.probes) < n_probes:
        name = order[k % len(order)]
        k += 1
        base = params[name]
        idx = tuple(int(rng.integers(0, d)) for d in base.shape)
        orig = float(base[idx])
        values = []
        for delta in (h, -h):
            bumped = base.copy()
            bumped[idx] = orig + delta
            params[name] = bumped
            values.append(float(loss_fn(params).item()))
        params[name] = base
        fp, fm = values
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if _rel(fwd, bwd) > kink_tol and abs(fwd - bwd) > 1e-6 and redraws < max_redraws:
            redraws += 1
            continue
        numeric = (fp - fm) / (2 * h)
        grad = analytic.get(name)
        a = float(grad[idx]) if grad is not None else 0.0
        result.probes.append((name, idx, a, numeric))
        result.max_rel_error = max(result.max_rel_error, _rel(a, numeric))
    result.redrawn = redraws
    return result

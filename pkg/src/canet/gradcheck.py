"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .autograd import Tape, Tensor, branch_log


@dataclass
class GradCheckResult:
    worst: float       # largest relative error over the probed coordinates
    checked: int
    crossings: int     # stencils on which some piecewise op would have switched branch


def grad_check_detailed(builder: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3,
                        max_coords: int | None = None, rng: np.random.Generator | None = None,
                        freeze_branches: bool = True) -> GradCheckResult:
    """Compare the tape gradient with central differences, coordinate by coordinate.

    ``builder`` must recompute the scalar loss from the current parameter
    values.  With ``max_coords`` only that many randomly chosen coordinates
    of each parameter are probed.  Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.

    With ``freeze_branches`` the perturbed evaluations reuse the branch
    selections (relu side, max-pool argmax, maximum pick, clamp side) of the
    unperturbed pass.  The difference quotient is then taken on the same
    linear piece that the analytic gradient differentiates, instead of
    straddling a kink.  Stencils where a branch would have switched are
    counted in ``crossings``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors; build them under precision64()")
        p.grad = None
        p.requires_grad = True
    with branch_log() as base, Tape() as tape:
        loss = builder()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> tuple[float, bool]:
        with branch_log(base.selections if freeze_branches else None) as log:
            value = builder().item()
        return value, log.crossed()

    rng = rng if rng is not None else np.random.default_rng(0)
    worst, checked, crossings = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords: Sequence[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            plus, crossed_plus = evaluate()
            flat[i] = saved - eps
            minus, crossed_minus = evaluate()
            flat[i] = saved
            crossings += crossed_plus or crossed_minus
            numeric = (plus - minus) / (2 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, crossings)


def grad_check(builder: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error; see :func:`grad_check_detailed`."""
    return grad_check_detailed(builder, params, eps, max_coords, rng).worst

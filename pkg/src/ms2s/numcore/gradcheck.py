"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GroupResult:
    name: str
    rel_err: float
    n_checked: int
    max_abs_grad: float
    abs_err: float = 0.0
    noise_floor: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        """Relative error within ``tol``, or absolute error within roundoff.

        The second clause covers parameters whose true gradient is exactly
        zero (a key bias under softmax, say), where both sides are noise.
        """
        return self.rel_err <= tol or self.abs_err <= self.noise_floor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both vanish."""
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / den)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    max_coords: int | None = 8,
    seed: int = 0,
) -> list[GroupResult]:
    """Compare backward() against central differences, one result per tensor.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    be deterministic.  At most ``max_coords`` coordinates per tensor are
    probed (all of them when None).  The noise floor is the roundoff a
    central difference of this loss can carry: 8 ulp of the loss over
    the step, per coordinate.
    """
    for p in params.values():
        p.grad = None
    loss0 = loss_fn()
    backward(loss0)
    ulp = np.finfo(loss0.data.dtype).eps * max(1.0, abs(loss0.item()))
    rng = np.random.default_rng(seed)
    results = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * step)
        a = analytic.reshape(-1)[idx]
        results.append(
            GroupResult(
                name,
                relative_error(a, numeric),
                len(idx),
                float(np.abs(a).max(initial=0.0)),
                float(np.linalg.norm(a - numeric)),
                8.0 * ulp / step * np.sqrt(len(idx)),
            )
        )
    return results

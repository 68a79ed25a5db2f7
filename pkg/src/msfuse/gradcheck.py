"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, {self.n_checked} coords)"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-5,
    h: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    name: str = "gradcheck",
) -> GradcheckReport:
    """Compare backward() against central differences in float64.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes.  The step for coordinate ``i`` is
    ``h * max(1, |x_i|)``.  With ``max_coords`` only a seeded random subset
    of each input's coordinates is perturbed.

    Inputs are converted to float64 in place.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64)
        t.grad = None

    with precision(np.float64):
        out = fn(*inputs)
        proj = rng.standard_normal(out.shape)

        def objective() -> float:
            return float(np.sum(fn(*inputs).data * proj))

        loss = (out * Tensor(proj)).sum()
        backward(loss)

        per_input = []
        n_checked = 0
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                f_plus = objective()
                flat[i] = orig - step
                f_minus = objective()
                flat[i] = orig
                numeric[j] = (f_plus - f_minus) / (2.0 * step)
            per_input.append(_rel_error(analytic_full.reshape(-1)[coords], numeric))
            n_checked += coords.size

    return GradcheckReport(name, max(per_input, default=0.0), tol, per_input, n_checked)

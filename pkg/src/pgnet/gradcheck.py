"""Float32 finite-difference checks of whole modules.

A module's output ``g`` is probed with a fixed random direction ``R`` through
the scalar ``f(theta) = <g(theta) - g(theta0), R>``; subtracting the baseline
keeps ``f`` near zero so its own rounding does not swamp the differences.

Two kinds of coordinate cannot be judged by a relative error:

* stencils that cross a ReLU or max-pool kink, where the function is not
  differentiable inside ``[theta - h, theta + h]`` (detected by tracing branches);
* coordinates whose true derivative is so small that ``h * grad`` is below the
  float32 evaluation noise of ``f``. The noise is measured, not assumed: the
  float32 output is compared against a float64 twin of the same weights.

Resolvable coordinates (derivative at least ``RESOLUTION`` times the noise
floor) get relative errors; the rest are checked in absolute terms against the
floor so that no coordinate escapes inspection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import FDCheck, Parameter, Tensor, fd_check

RESOLUTION = 100.0


@dataclass
class ModuleCheck:
    name: str
    checks: list[FDCheck]
    floor: float  # standard deviation of the central-difference noise

    def resolvable(self, check: FDCheck) -> np.ndarray:
        big = np.maximum(np.abs(check.analytic), np.abs(check.numeric)) >= RESOLUTION * self.floor
        return big & ~check.kinked

    @property
    def rel_errors(self) -> np.ndarray:
        return np.concatenate([c.rel_errors[self.resolvable(c)] for c in self.checks])

    @property
    def low_res_ratio(self) -> np.ndarray:
        """|a - fd| / floor on unresolvable, kink-free coordinates."""
        parts = [(np.abs(c.analytic - c.numeric) / self.floor)[~self.resolvable(c) & ~c.kinked]
                 for c in self.checks]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def n_coords(self) -> int:
        return int(sum(len(c.coords) for c in self.checks))

    @property
    def n_kinked(self) -> int:
        return int(sum(c.kinked.sum() for c in self.checks))


def check_module(name: str, module: Module, forward: Callable[[Module], Tensor],
                 params: Callable[[Module], Sequence[Parameter]], direction: np.ndarray,
                 rng: np.random.Generator, coords_per_param: int = 6, h: float = 1e-3) -> ModuleCheck:
    """Central differences on ``coords_per_param`` random coordinates of each tensor in ``params(module)``.

    ``forward(m)`` must build the output from ``m`` alone so it can be replayed on
    the float64 twin.
    """
    R = Tensor(np.asarray(direction, dtype=np.float32))
    with T.no_grad():
        g0 = forward(module).data.copy()
        g64 = forward(module.astype(np.float64)).data
    weighted = (g0.astype(np.float64) - g64) * R.data
    eps_floor = np.finfo(np.float32).eps * np.sqrt(((g0 * R.data).astype(np.float64) ** 2).sum())
    floor = max(float(np.sqrt((weighted ** 2).sum())), float(eps_floor)) * np.sqrt(2.0) / (2.0 * h)
    base = Tensor(g0)

    def objective(_):
        return T.tsum((forward(module) - base) * R)

    checks = []
    for p in params(module):
        idx = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        checks.append(fd_check(objective, p, h, idx))
    return ModuleCheck(name, checks, floor)

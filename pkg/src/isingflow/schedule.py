"""Cooling schedules and trajectory containers shared by the samplers and datasets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import SpinGrid


@dataclass(frozen=True)
class CoolingSchedule:
    temperatures: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.temperatures, dtype=float)
        if t.size < 1 or np.any(t <= 0):
            raise ValueError("temperatures must be positive")
        if t.size > 1 and np.any(np.diff(t) >= 0):
            raise ValueError("temperatures must be strictly decreasing")

    @property
    def betas(self) -> tuple[float, ...]:
        return tuple(1.0 / t for t in self.temperatures)

    @property
    def d(self) -> int:
        return len(self.temperatures) - 1

    @property
    def spacing(self) -> float:
        if self.d == 0:
            return 0.0
        return (self.temperatures[0] - self.temperatures[-1]) / self.d

    def __len__(self):
        return len(self.temperatures)


def make_schedule(t_max: float = 5.0, t_min: float = 1.0, d: int = 20) -> CoolingSchedule:
    """``d + 1`` evenly spaced temperatures from ``t_max`` down to ``t_min`` inclusive."""
    if not (t_max > t_min > 0):
        raise ValueError(f"need t_max > t_min > 0, got {t_max}, {t_min}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    temps = np.linspace(t_max, t_min, d + 1)
    return CoolingSchedule(tuple(float(t) for t in temps))


@dataclass
class Trajectory:
    """One grid per schedule point, plus ``K`` cooled samples per transition.

    ``conditional[j]`` holds grids obtained by cooling ``grids[j]`` to the
    next inverse temperature. ``converged`` records the equilibration flag of
    each stored grid, in the same nesting.
    """

    grids: list[SpinGrid]
    conditional: list[list[SpinGrid]] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    conditional_converged: list[list[bool]] = field(default_factory=list)

    def __post_init__(self):
        ns = {g.n for g in self.grids}
        ns.update(g.n for cs in self.conditional for g in cs)
        if len(ns) > 1:
            raise ValueError(f"grids disagree on lattice size: {sorted(ns)}")

    @property
    def n(self) -> int:
        return self.grids[0].n

    def __len__(self):
        return len(self.grids)

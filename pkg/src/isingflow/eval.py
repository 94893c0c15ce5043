"""Comparison of generated cooling trajectories against ground truth.

Deltas are signed (predicted minus ground truth) per schedule temperature and
then summarised as mean and population standard deviation across the schedule.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, ObservableRecord, compute_observables
from .lattice import SpinGrid
from .montecarlo import _metropolis_sweep_kernel, _nbr
from .schedule import CoolingSchedule, Trajectory

REPORT_FIELDS = (
    "method",
    "n",
    "dE_mean",
    "dE_std",
    "dm_mean",
    "dm_std",
    "dcv_mean",
    "dcv_std",
    "dchi_mean",
    "dchi_std",
    "time_mean",
    "time_std",
)


def baseline_mc15(
    x0: SpinGrid, schedule: CoolingSchedule, steps_per_temp: int = 15, rng: np.random.Generator | None = None
) -> Trajectory:
    """Fixed-budget Metropolis annealing: ``steps_per_temp`` sweeps at each later temperature."""
    if steps_per_temp < 0:
        raise ValueError("steps_per_temp must be >= 0")
    if steps_per_temp and rng is None:
        raise ValueError("an explicit rng stream is required")
    s = x0.spins.copy()
    nbr = _nbr(x0.n)
    order = np.empty(s.size, np.int64)
    grids = [x0]
    for beta in schedule.betas[1:]:
        for _ in range(steps_per_temp):
            _metropolis_sweep_kernel(s, nbr, float(beta), 1.0, rng, order)
        grids.append(SpinGrid._trusted(s.copy(), x0.n))
    return Trajectory(grids=grids)


def trajectory_observables(trajs: Sequence[Trajectory], schedule: CoolingSchedule) -> list[ObservableRecord]:
    if not trajs:
        raise ValueError("no trajectories")
    for t in trajs:
        if len(t) != len(schedule):
            raise ValueError(f"trajectory has {len(t)} grids but the schedule has {len(schedule)} points")
    return [compute_observables([t.grids[j] for t in trajs], beta) for j, beta in enumerate(schedule.betas)]


@dataclass(frozen=True)
class Spread:
    mean: float
    std: float

    def __str__(self) -> str:
        return f"{self.mean:+.4f} ± {self.std:.4f}"


def _spread(values: Sequence[float | None]) -> Spread:
    a = np.array([np.nan if v is None else v for v in values], dtype=float)
    a = a[~np.isnan(a)]
    if a.size == 0:
        return Spread(math.nan, math.nan)
    return Spread(float(a.mean()), float(a.std()))


@dataclass
class EvalReport:
    method: str
    n: int
    d_e: Spread
    d_m: Spread
    d_cv: Spread
    d_chi: Spread
    time: Spread | None = None
    gt_time: Spread | None = None
    per_temperature: list[tuple[float, float, float, float | None, float | None]] | None = None

    def row(self) -> list:
        t = self.time or Spread(math.nan, math.nan)
        vals = [self.d_e, self.d_m, self.d_cv, self.d_chi, t]
        return [self.method, self.n] + [x for s in vals for x in (s.mean, s.std)]


def _records(obs: Dataset | Sequence[ObservableRecord]) -> list[ObservableRecord]:
    return obs.observables() if isinstance(obs, Dataset) else list(obs)


def compare_observables(
    predicted: Sequence[Trajectory] | Sequence[ObservableRecord],
    gt: Dataset | Sequence[ObservableRecord],
    schedule: CoolingSchedule | None = None,
    method: str = "",
    n: int | None = None,
) -> EvalReport:
    """Signed per-temperature deltas of (E, m, Cv, chi), summarised over the schedule.

    ``predicted`` is either generated trajectories (needs ``schedule`` unless
    ``gt`` is a dataset) or precomputed observable records.
    """
    ref = _records(gt)
    if isinstance(gt, Dataset):
        schedule = schedule or gt.schedule
        n = n or gt.n
    if predicted and isinstance(predicted[0], Trajectory):
        if schedule is None:
            raise ValueError("schedule needed to evaluate trajectories")
        n = n or predicted[0].n
        pred = trajectory_observables(predicted, schedule)  # type: ignore[arg-type]
    else:
        pred = list(predicted)  # type: ignore[arg-type]
    if len(pred) != len(ref) or any(
        not math.isclose(p.temperature, r.temperature, rel_tol=1e-9) for p, r in zip(pred, ref)
    ):
        raise ValueError("predicted and ground-truth schedules differ")

    def diff(a, b):
        return None if a is None or b is None else a - b

    rows = [(r.temperature, p.e - r.e, p.m - r.m, diff(p.cv, r.cv), diff(p.chi, r.chi)) for p, r in zip(pred, ref)]
    return EvalReport(
        method=method,
        n=int(n or 0),
        d_e=_spread([r[1] for r in rows]),
        d_m=_spread([r[2] for r in rows]),
        d_cv=_spread([r[3] for r in rows]),
        d_chi=_spread([r[4] for r in rows]),
        per_temperature=rows,
    )


@dataclass(frozen=True)
class TcEstimate:
    temperature: float
    uncertainty: float
    index: int
    peaked: bool


def estimate_tc(records: Sequence[ObservableRecord]) -> TcEstimate:
    """Temperature of the susceptibility maximum, with one schedule spacing as uncertainty.

    ``peaked`` is false when chi is flat or its maximum sits at either end of
    the sweep, i.e. no interior peak was resolved.
    """
    pts = [(r.temperature, r.chi) for r in records if r.chi is not None and math.isfinite(r.chi)]
    if len(pts) < 5:
        raise ValueError("need susceptibility on at least 5 schedule points")
    temps = np.array([p[0] for p in pts])
    chi = np.array([p[1] for p in pts])
    idx = int(np.argmax(chi))
    spacing = float(np.max(np.abs(np.diff(temps))))
    flat = bool(np.all(chi == chi[0]))
    peaked = not flat and 0 < idx < len(chi) - 1
    return TcEstimate(float(temps[idx]), spacing, idx, peaked)


def timing_harness(method: Callable[[int, CoolingSchedule], object], n: int, schedule: CoolingSchedule, reps: int = 3) -> Spread:
    """Wall-clock seconds per call of ``method(n, schedule)``.

    Any loading or setup must happen before the call so it stays out of the
    measurement.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        method(n, schedule)
        times.append(time.perf_counter() - t0)
    a = np.array(times)
    return Spread(float(a.mean()), float(a.std()))


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([v if isinstance(v, str) or isinstance(v, int) else f"{v:.10g}" for v in r.row()])
    return buf.getvalue()


def format_table(reports: Sequence[EvalReport]) -> str:
    head = f"{'method':<10}{'n':>5}  {'dE':>20}  {'dm':>20}  {'dCv':>20}  {'dchi':>20}  {'time [s]':>20}"
    lines = [head, "-" * len(head)]
    for r in reports:
        t = str(r.time) if r.time else "n/a"
        lines.append(f"{r.method:<10}{r.n:>5}  {str(r.d_e):>20}  {str(r.d_m):>20}  {str(r.d_cv):>20}  {str(r.d_chi):>20}  {t:>20}")
    return "\n".join(lines)

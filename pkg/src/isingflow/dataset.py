"""Annealed trajectory datasets: generation, observables and on-disk layout.

Layout of a dataset directory::

    manifest.json
    observables.csv
    trajectories/traj_<i>/grid_<j>.bin
    trajectories/traj_<i>/cond_<j>/k_<k>.bin

Grid files are ``n*n`` raw signed bytes. ``manifest.json`` is written last and
marks the directory as complete.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lattice import CouplingParams, SpinGrid
from .montecarlo import EquilibrationConfig, anneal_trajectory, equilibrate, rng_stream
from .schedule import CoolingSchedule, Trajectory, make_schedule

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
OBSERVABLE_FIELDS = ("T", "E", "m", "Cv", "chi", "n_samples")

__all__ = [
    "CoolingSchedule",
    "Dataset",
    "ObservableRecord",
    "Trajectory",
    "build_dataset",
    "compute_observables",
    "conditional_samples",
    "load_dataset",
    "make_schedule",
]


@dataclass(frozen=True)
class ObservableRecord:
    temperature: float
    e: float
    m: float
    cv: float | None
    chi: float | None
    n_samples: int


def _stack(samples: Sequence[SpinGrid]) -> tuple[np.ndarray, int]:
    n = samples[0].n
    if any(g.n != n for g in samples):
        raise ValueError("samples disagree on lattice size")
    return np.stack([g.spins for g in samples]), n


def compute_observables(samples: Sequence[SpinGrid], beta: float, j: float = 1.0) -> ObservableRecord:
    """Per-site energy, |m|, specific heat and susceptibility over ``samples``.

    Variances use population normalisation. The susceptibility is taken from
    the spread of ``|M|`` so that pooling grids of either magnetization sign
    does not turn the ordered phase into a spurious peak.
    """
    if len(samples) == 0:
        raise ValueError("no samples")
    spins, n = _stack(samples)
    n2 = n * n
    s = spins.reshape(-1, n, n).astype(np.int64)
    h = -j * (np.sum(s * np.roll(s, -1, axis=1), axis=(1, 2)) + np.sum(s * np.roll(s, -1, axis=2), axis=(1, 2)))
    abs_m = np.abs(spins.sum(axis=1, dtype=np.int64)).astype(float)
    e = float(h.mean() / n2)
    m = float(abs_m.mean() / n2)
    if len(samples) < 2:
        return ObservableRecord(1.0 / beta, e, m, None, None, 1)
    cv = float(beta**2 * h.var() / n2)
    chi = float(beta * abs_m.var() / n2)
    return ObservableRecord(1.0 / beta, e, m, cv, chi, len(samples))


def conditional_samples(
    g: SpinGrid,
    beta_next: float,
    k_count: int,
    cfg: EquilibrationConfig = EquilibrationConfig(),
    rng: np.random.Generator | None = None,
    cp: CouplingParams = CouplingParams(),
) -> tuple[list[SpinGrid], list[bool]]:
    """``k_count`` independent cooled copies of ``g`` at ``beta_next``."""
    if k_count < 1:
        raise ValueError("k_count must be >= 1")
    if rng is None:
        raise ValueError("an explicit rng stream is required")
    out, flags = [], []
    for sub in rng.spawn(k_count):
        res = equilibrate(g, beta_next, cfg, cp, sub)
        out.append(res.grid)
        flags.append(res.converged)
    return out, flags


def _trajectory_with_conditionals(schedule, n, k_count, cfg, seed, i) -> Trajectory:
    traj = anneal_trajectory(schedule, n, cfg, CouplingParams(), rng_stream(seed, i, 0))
    betas = schedule.betas
    for jdx in range(len(betas) - 1):
        grids, flags = conditional_samples(traj.grids[jdx], betas[jdx + 1], k_count, cfg, rng_stream(seed, i, 1, jdx))
        traj.conditional.append(grids)
        traj.conditional_converged.append(flags)
    return traj


@dataclass
class Dataset:
    n: int
    schedule: CoolingSchedule
    k_count: int
    seed: int
    trajectories: list[Trajectory]
    path: Path | None = None

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    def samples_at(self, jdx: int, include_conditional: bool = True) -> list[SpinGrid]:
        """Every stored grid at schedule point ``jdx``, pooled over trajectories."""
        out = [t.grids[jdx] for t in self.trajectories]
        if include_conditional and jdx > 0:
            for t in self.trajectories:
                if t.conditional:
                    out.extend(t.conditional[jdx - 1])
        return out

    def observables(self, include_conditional: bool = True) -> list[ObservableRecord]:
        return [
            compute_observables(self.samples_at(jdx, include_conditional), beta)
            for jdx, beta in enumerate(self.schedule.betas)
        ]

    def nonconverged(self) -> int:
        bad = 0
        for t in self.trajectories:
            bad += sum(not f for f in t.converged)
            bad += sum(not f for fs in t.conditional_converged for f in fs)
        return bad


def generate(
    n: int,
    schedule: CoolingSchedule,
    n_traj: int,
    k_count: int,
    cfg: EquilibrationConfig = EquilibrationConfig(),
    seed: int = 0,
    threads: int = 1,
) -> Dataset:
    """Generate trajectories in memory; trajectory ``i`` uses streams keyed on ``(seed, i)``."""
    if n < 2:
        raise ValueError("lattice size must be >= 2")
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")

    def work(i):
        return _trajectory_with_conditionals(schedule, n, k_count, cfg, seed, i)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(work, range(n_traj)))
    else:
        trajs = [work(i) for i in range(n_traj)]
    return Dataset(n=n, schedule=schedule, k_count=k_count, seed=seed, trajectories=trajs)


def observables_csv(records: Sequence[ObservableRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBSERVABLE_FIELDS)

    def fmt(x):
        return "nan" if x is None else f"{x:.10g}"

    for r in records:
        w.writerow([fmt(r.temperature), fmt(r.e), fmt(r.m), fmt(r.cv), fmt(r.chi), r.n_samples])
    return buf.getvalue()


def read_observables_csv(path: Path) -> list[ObservableRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cv = float(row["Cv"])
            chi = float(row["chi"])
            out.append(
                ObservableRecord(
                    float(row["T"]),
                    float(row["E"]),
                    float(row["m"]),
                    None if math.isnan(cv) else cv,
                    None if math.isnan(chi) else chi,
                    int(row["n_samples"]),
                )
            )
    return out


def prepare_output_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty (use force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def save_dataset(ds: Dataset, path: Path | str, cfg: EquilibrationConfig | None = None, force: bool = False) -> Path:
    path = Path(path)
    prepare_output_dir(path, force)
    root = path / "trajectories"
    for i, t in enumerate(ds.trajectories):
        tdir = root / f"traj_{i}"
        tdir.mkdir(parents=True)
        for jdx, g in enumerate(t.grids):
            (tdir / f"grid_{jdx}.bin").write_bytes(g.to_bytes())
        for jdx, cond in enumerate(t.conditional):
            cdir = tdir / f"cond_{jdx}"
            cdir.mkdir()
            for k, g in enumerate(cond):
                (cdir / f"k_{k}.bin").write_bytes(g.to_bytes())
    (path / "observables.csv").write_text(observables_csv(ds.observables()), encoding="utf-8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": ds.n,
        "schedule": {
            "t_max": ds.schedule.temperatures[0],
            "t_min": ds.schedule.temperatures[-1],
            "d": ds.schedule.d,
            "temperatures": list(ds.schedule.temperatures),
        },
        "K": ds.k_count,
        "n_traj": ds.n_traj,
        "seed": ds.seed,
        "nonconverged": ds.nonconverged(),
        "converged": [
            {"grids": t.converged, "conditional": t.conditional_converged} for t in ds.trajectories
        ],
    }
    if cfg is not None:
        manifest["equilibration"] = {"epsilon": cfg.epsilon, "window": cfg.window, "max_steps": cfg.max_steps}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    ds.path = path
    return path


def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest in {path}; dataset missing or incomplete")
    man = json.loads(mpath.read_text(encoding="utf-8"))
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {man.get('format_version')}")
    n = int(man["n"])
    schedule = CoolingSchedule(tuple(man["schedule"]["temperatures"]))
    trajs = []
    conv = man.get("converged", [])
    for i in range(int(man["n_traj"])):
        tdir = path / "trajectories" / f"traj_{i}"
        grids = [SpinGrid.from_bytes((tdir / f"grid_{jdx}.bin").read_bytes(), n) for jdx in range(len(schedule))]
        cond = []
        for jdx in range(len(schedule) - 1):
            cdir = tdir / f"cond_{jdx}"
            if not cdir.exists():
                break
            cond.append([SpinGrid.from_bytes((cdir / f"k_{k}.bin").read_bytes(), n) for k in range(int(man["K"]))])
        flags = conv[i] if i < len(conv) else {"grids": [], "conditional": []}
        trajs.append(Trajectory(grids, cond, list(flags["grids"]), [list(f) for f in flags["conditional"]]))
    return Dataset(n=n, schedule=schedule, k_count=int(man["K"]), seed=int(man["seed"]), trajectories=trajs, path=path)


@dataclass
class BuildReport:
    path: Path
    n_grids: int
    nonconverged: int


def build_dataset(
    out_dir: Path | str,
    n: int,
    schedule: CoolingSchedule,
    n_traj: int,
    k_count: int = 40,
    cfg: EquilibrationConfig = EquilibrationConfig(),
    seed: int = 0,
    threads: int = 1,
    force: bool = False,
) -> BuildReport:
    """Generate and persist a dataset; deterministic in ``seed``."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use force to overwrite)")
    ds = generate(n, schedule, n_traj, k_count, cfg, seed, threads)
    save_dataset(ds, out_dir, cfg, force=force)
    n_grids = sum(len(t.grids) + sum(len(c) for c in t.conditional) for t in ds.trajectories)
    bad = ds.nonconverged()
    if bad:
        log.warning("%d of %d equilibrations did not converge", bad, n_grids)
    return BuildReport(out_dir, n_grids, bad)

"""Command-line entry point: ``isingflow <subcommand> [--flags]``.

Settings resolve as built-in defaults, then ``--config`` (``key = value``
lines), then explicit flags. Exit status is 0 on success, 1 when a run fails
or an equilibration does not converge, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import onsager
from .dataset import (
    build_dataset,
    compute_observables,
    load_dataset,
    observables_csv,
    prepare_output_dir,
)
from .eval import (
    Spread,
    baseline_mc15,
    compare_observables,
    format_table,
    report_csv,
    timing_harness,
    trajectory_observables,
)
from .flow import (
    FlowHyper,
    ModelBundle,
    dataset_fingerprint,
    generate_batch,
    load_bundle,
    save_bundle,
    train_encoder,
    train_field,
    train_projector,
)
from .lattice import SpinGrid
from .montecarlo import EquilibrationConfig, anneal_trajectory, equilibrate, rng_stream
from .schedule import CoolingSchedule, Trajectory, make_schedule

log = logging.getLogger("isingflow")

STAGES = ("encoder", "field", "projector")
SAMPLERS = ("ptheta", "mh10", "mh15", "mc15")


class UsageError(Exception):
    pass


class RunFailed(Exception):
    pass


@dataclass
class RunConfig:
    n: int = 32
    t_max: float = 5.0
    t_min: float = 1.0
    d: int = 20
    k: int = 40
    n_traj: int = 64
    seed: int = 0
    epsilon: float = 0.05
    window: int = 16
    max_steps: int = 50_000
    latent: int = 0
    sigma: float = 1.0
    lam: float = 0.1
    lr: float = 1e-3
    encoder_epochs: int = 30
    field_epochs: int = 200
    projector_epochs: int = 30
    batch_size: int = 64
    field_hidden: int = 256
    n_samples: int = 64
    points: int = 21
    p: int = 64
    reps: int = 3
    threads: int = 0
    data: str = ""
    model: str = ""
    out: str = ""

    def schedule(self) -> CoolingSchedule:
        return make_schedule(self.t_max, self.t_min, self.d)

    def equilibration(self) -> EquilibrationConfig:
        return EquilibrationConfig(self.epsilon, self.window, self.max_steps)

    def hyper(self) -> FlowHyper:
        return FlowHyper(
            latent_dim=self.latent or None,
            sigma=self.sigma,
            ising_weight=self.lam,
            lr=self.lr,
            encoder_epochs=self.encoder_epochs,
            field_epochs=self.field_epochs,
            projector_epochs=self.projector_epochs,
            batch_size=self.batch_size,
            field_hidden=self.field_hidden,
            seed=self.seed,
        )

    def resolved_threads(self) -> int:
        return self.threads or os.cpu_count() or 1


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = type(getattr(RunConfig(), name))
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None


def read_config(path: Path) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, val)
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config(Path(args.config)))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    try:
        cfg.schedule()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.n < 2:
        raise UsageError("--n must be >= 2")
    return cfg


def _need(cfg: RunConfig, attr: str) -> Path:
    v = getattr(cfg, attr)
    if not v:
        raise UsageError(f"--{attr} is required")
    return Path(v)


def _write_new(path: Path, text: str, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, force: bool) -> int:
    out = _need(cfg, "out")
    rep = build_dataset(
        out,
        cfg.n,
        cfg.schedule(),
        cfg.n_traj,
        cfg.k,
        cfg.equilibration(),
        cfg.seed,
        cfg.resolved_threads(),
        force,
    )
    print(f"wrote {rep.n_grids} grids to {rep.path}; {rep.nonconverged} did not converge")
    return 0 if rep.nonconverged == 0 else 1


def cmd_train(cfg: RunConfig, stage: str, force: bool) -> int:
    data = _need(cfg, "data")
    model_dir = Path(cfg.model or cfg.out) if (cfg.model or cfg.out) else None
    if model_dir is None:
        raise UsageError("--model (or --out) is required")
    ds = load_dataset(data)
    fp = dataset_fingerprint(ds)
    if (model_dir / "bundle.json").exists():
        b = load_bundle(model_dir)
        if b.n != ds.n:
            raise RunFailed(f"model in {model_dir} is for n={b.n}, dataset has n={ds.n}")
        b.hyper = dataclasses.replace(cfg.hyper(), latent_dim=b.hyper.latent_dim)
    else:
        b = ModelBundle(n=ds.n, hyper=cfg.hyper())
    if getattr(b, stage) is not None and not force:
        raise FileExistsError(f"{stage} already trained in {model_dir} (use --force to retrain)")
    if stage != "encoder":
        b.require("encoder")
        if b.fingerprint != fp:
            raise RunFailed("encoder was trained on a different dataset")
    if stage == "encoder":
        b.encoder, b.inverse_map, b.losses["encoder"] = train_encoder(ds, b.hyper)
        # downstream stages no longer match the new latent space
        b.field = b.projector = None
        b.losses.pop("field", None)
        b.losses.pop("projector", None)
        b.fingerprint = fp
    elif stage == "field":
        b.field, b.losses["field"] = train_field(ds, b.encoder, b.hyper)
    else:
        b.projector, b.losses["projector"] = train_projector(ds, b.encoder, b.hyper)
    save_bundle(b, model_dir)
    losses = b.losses[stage]
    print(f"{stage}: {len(losses)} epochs, loss {losses[0]:.6g} -> {losses[-1]:.6g}")
    return 0


def initial_grids(n: int, beta0: float, count: int, seed: int, cfg: EquilibrationConfig) -> tuple[list[SpinGrid], int]:
    """Equilibrated starting grids, one independent stream each."""
    grids, bad = [], 0
    for i in range(count):
        rng = rng_stream(seed, 2, i)
        res = equilibrate(SpinGrid.random(n, rng), beta0, cfg, rng=rng)
        grids.append(res.grid)
        bad += not res.converged
    return grids, bad


def sample_trajectories(
    decoder: str, x0s: Sequence[SpinGrid], schedule: CoolingSchedule, seed: int, bundle: ModelBundle | None
) -> list[Trajectory]:
    rng = rng_stream(seed, 3)
    if decoder == "mc15":
        return [baseline_mc15(x0, schedule, 15, sub) for x0, sub in zip(x0s, rng.spawn(len(x0s)))]
    if bundle is None:
        raise UsageError(f"--model is required for decoder {decoder}")
    return generate_batch(bundle, x0s, schedule, decoder, rng)


def write_trajectories(out: Path, trajs: Sequence[Trajectory]) -> None:
    for i, t in enumerate(trajs):
        tdir = out / "trajectories" / f"traj_{i}"
        tdir.mkdir(parents=True)
        for j, g in enumerate(t.grids):
            (tdir / f"grid_{j}.bin").write_bytes(g.to_bytes())


def read_trajectories(path: Path) -> tuple[dict, list[Trajectory]]:
    man_path = path / "manifest.json"
    if not man_path.exists():
        raise RunFailed(f"no sample manifest in {path}")
    man = json.loads(man_path.read_text(encoding="utf-8"))
    n, d1 = man["n"], len(man["temperatures"])
    trajs = []
    for i in range(man["n_samples"]):
        tdir = path / "trajectories" / f"traj_{i}"
        trajs.append(Trajectory([SpinGrid.from_bytes((tdir / f"grid_{j}.bin").read_bytes(), n) for j in range(d1)]))
    return man, trajs


def cmd_sample(cfg: RunConfig, decoder: str, force: bool) -> int:
    if decoder not in SAMPLERS:
        raise UsageError(f"unknown decoder {decoder!r}; choose from {', '.join(SAMPLERS)}")
    out = _need(cfg, "out")
    bundle = load_bundle(cfg.model) if cfg.model else None
    if decoder != "mc15":
        if bundle is None:
            raise UsageError(f"--model is required for decoder {decoder}")
        bundle.require("encoder", "field")
        if decoder == "ptheta":
            bundle.require("projector")
    n = bundle.n if bundle is not None else cfg.n
    schedule = cfg.schedule()
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
    x0s, bad = initial_grids(n, schedule.betas[0], cfg.n_samples, cfg.seed, cfg.equilibration())
    trajs = sample_trajectories(decoder, x0s, schedule, cfg.seed, bundle)
    prepare_output_dir(out, force)
    write_trajectories(out, trajs)
    obs = trajectory_observables(trajs, schedule)
    (out / "observables.csv").write_text(observables_csv(obs), encoding="utf-8")
    man = {
        "method": decoder,
        "n": n,
        "n_samples": len(trajs),
        "seed": cfg.seed,
        "temperatures": list(schedule.temperatures),
        "initial_nonconverged": bad,
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2) + "\n", encoding="utf-8")
    print(f"{decoder}: wrote {len(trajs)} trajectories to {out}; final |m| = {obs[-1].m:.3f}")
    return 0 if bad == 0 else 1


def onsager_rows(temps: Sequence[float], p: int) -> list[tuple[float, float, float, float, float]]:
    rows = []
    for t in temps:
        c = onsager.AnisotropicCouplings.isotropic(1.0 / t)
        rows.append(
            (
                t,
                onsager.internal_energy_exact(1.0 / t),
                onsager.free_energy_integral(c, t),
                onsager.free_energy_finite(c, t, p),
                onsager.singular_free_energy(c, t),
            )
        )
    return rows


def cmd_onsager(cfg: RunConfig, force: bool) -> int:
    if cfg.points < 1:
        raise UsageError("--points must be >= 1")
    if cfg.p < 1:
        raise UsageError("--p must be >= 1")
    temps = np.linspace(cfg.t_min, cfg.t_max, cfg.points) if cfg.points > 1 else np.array([cfg.t_min])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "u_exact", "f_integral", f"f_finite_p{cfg.p}", "f_singular"])
    for row in onsager_rows([float(t) for t in temps], cfg.p):
        w.writerow([f"{v:.12g}" for v in row])
    if cfg.out:
        _write_new(Path(cfg.out), buf.getvalue(), force)
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _time_method(method: str, bundle: ModelBundle | None, n: int, cfg: RunConfig) -> Spread:
    schedule = cfg.schedule()
    x0 = initial_grids(n, schedule.betas[0], 1, cfg.seed + 1, cfg.equilibration())[0][0]
    counter = iter(range(10**9))
    if method == "gt":

        def run(n_, sched):
            anneal_trajectory(sched, n_, cfg.equilibration(), rng=rng_stream(cfg.seed, 4, next(counter)))

    else:

        def run(n_, sched):
            sample_trajectories(method, [x0], sched, cfg.seed + next(counter), bundle)

    return timing_harness(run, n, schedule, cfg.reps)


def cmd_evaluate(cfg: RunConfig, preds: Sequence[str], force: bool) -> int:
    data = _need(cfg, "data")
    if not preds:
        raise UsageError("at least one --pred directory is required")
    gt = load_dataset(data)
    gt_obs = gt.observables()
    bundle = load_bundle(cfg.model) if cfg.model else None
    reports = []
    for p in preds:
        man, trajs = read_trajectories(Path(p))
        if man["n"] != gt.n:
            raise RunFailed(f"{p} has n={man['n']} but the dataset has n={gt.n}")
        obs = trajectory_observables(trajs, CoolingSchedule(tuple(man["temperatures"])))
        rep = compare_observables(obs, gt_obs, method=man["method"], n=gt.n)
        if cfg.reps and (man["method"] == "mc15" or bundle is not None):
            rep.time = _time_method(man["method"], bundle, gt.n, cfg)
        reports.append(rep)
    gt_rep = compare_observables(gt_obs, gt_obs, method="gt", n=gt.n)
    if cfg.reps:
        gt_rep.time = _time_method("gt", None, gt.n, cfg)
    reports.append(gt_rep)
    print(format_table(reports))
    if cfg.out:
        _write_new(Path(cfg.out), report_csv(reports), force)
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="key = value settings file; flags override it")
    g.add_argument("--n", type=int, help="lattice side length")
    g.add_argument("--d", type=int, help="number of cooling intervals")
    g.add_argument("--t-max", dest="t_max", type=float)
    g.add_argument("--t-min", dest="t_min", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker cap (default: all cores)")
    g.add_argument("--out", help="output path")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="isingflow", description="Ising cooling trajectories: data, flow model, analytics.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a ground-truth dataset")
    s.add_argument("--k", type=int, help="cooled samples per transition")
    s.add_argument("--n-traj", dest="n_traj", type=int)

    s = sub.add_parser("train", parents=[common], help="train one model stage")
    s.add_argument("--stage", required=True, choices=STAGES)
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--model", help="model directory (defaults to --out)")
    s.add_argument("--latent", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--lam", type=float, help="weight of the energy-matching term")
    s.add_argument("--lr", type=float)
    s.add_argument("--encoder-epochs", dest="encoder_epochs", type=int)
    s.add_argument("--field-epochs", dest="field_epochs", type=int)
    s.add_argument("--projector-epochs", dest="projector_epochs", type=int)

    s = sub.add_parser("sample", parents=[common], help="generate cooling trajectories")
    s.add_argument("--decoder", required=True, help="ptheta, mh10, mh15 or mc15")
    s.add_argument("--model", help="trained model directory")
    s.add_argument("--n-samples", dest="n_samples", type=int)

    s = sub.add_parser("onsager", parents=[common], help="exact energy and free-energy table")
    s.add_argument("--p", type=int, help="half the transfer-matrix row length")
    s.add_argument("--points", type=int, help="number of temperatures")

    s = sub.add_parser("evaluate", parents=[common], help="compare samples with ground truth")
    s.add_argument("--data", help="ground-truth dataset directory")
    s.add_argument("--pred", action="append", default=[], help="sample directory (repeatable)")
    s.add_argument("--model", help="model directory, enables timing of learned decoders")
    s.add_argument("--reps", type=int, help="timing repetitions (0 skips timing)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve(args)
        log.info("resolved config: %s", json.dumps(dataclasses.asdict(cfg), sort_keys=True))
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.force)
        if args.command == "sample":
            return cmd_sample(cfg, args.decoder, args.force)
        if args.command == "onsager":
            return cmd_onsager(cfg, args.force)
        return cmd_evaluate(cfg, args.pred, args.force)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"isingflow: error: {exc}", file=sys.stderr)
        return 2
    except (RunFailed, FileExistsError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"isingflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Latent flow along a cooling schedule.

Grids are embedded by an encoder, moved between consecutive inverse
temperatures by a learned velocity field (one explicit Euler step per
schedule interval, with beta as the flow time), and mapped back to spins by
either a learned projector or a Metropolis-refined readout.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import dataclasses
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .lattice import SpinGrid
from .montecarlo import _metropolis_sweep_kernel, _nbr
from .nn import Mlp, OptimState, opt_step
from .schedule import CoolingSchedule, Trajectory

log = logging.getLogger(__name__)

DECODERS = ("ptheta", "mh10", "mh15")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FlowHyper:
    latent_dim: int | None = None  # defaults to n*n // 4
    sigma: float = 1.0
    ising_weight: float = 0.1
    lr: float = 1e-3
    encoder_epochs: int = 30
    field_epochs: int = 200
    projector_epochs: int = 30
    batch_size: int = 64
    field_hidden: int = 256
    seed: int = 0

    def latent_for(self, n: int) -> int:
        return self.latent_dim if self.latent_dim else max(1, n * n // 4)


@dataclass(frozen=True)
class LatentVector:
    values: np.ndarray
    beta: float


@dataclass
class ModelBundle:
    n: int
    hyper: FlowHyper
    encoder: Mlp | None = None
    inverse_map: Mlp | None = None
    field: Mlp | None = None
    projector: Mlp | None = None
    losses: dict[str, list[float]] = dataclasses.field(default_factory=dict)
    fingerprint: str = ""

    @property
    def latent_dim(self) -> int:
        return self.hyper.latent_for(self.n)

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise RuntimeError(f"{name} required")


# --------------------------------------------------------------- encoding


def _spins_matrix(grids: Sequence[SpinGrid]) -> np.ndarray:
    return np.stack([g.spins for g in grids]).astype(np.float64)


def encode(b: ModelBundle, g: SpinGrid, beta: float = float("nan")) -> LatentVector:
    b.require("encoder")
    if g.n != b.n:
        raise ValueError(f"grid size {g.n} does not match bundle size {b.n}")
    return LatentVector(b.encoder(g.spins.astype(np.float64)), beta)


def encode_batch(encoder: Mlp, grids: Sequence[SpinGrid] | np.ndarray) -> np.ndarray:
    x = grids if isinstance(grids, np.ndarray) else _spins_matrix(grids)
    return encoder(x)


def _minibatches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield order[start : start + batch_size]


def _check_finite(loss: float, stage: str, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{stage} loss became {loss} at epoch {epoch}")


def all_grids(ds: Dataset) -> list[SpinGrid]:
    out = []
    for t in ds.trajectories:
        out.extend(t.grids)
        for cond in t.conditional:
            out.extend(cond)
    return out


def train_encoder(ds: Dataset | Sequence[SpinGrid], hyper: FlowHyper) -> tuple[Mlp, Mlp, list[float]]:
    """Fit encoder and inverse map on reconstruction MSE over every stored grid.

    The inverse map is a single tanh layer; its pre-activation doubles as the
    linear readout used by the Metropolis-refined decoders.
    """
    grids = all_grids(ds) if isinstance(ds, Dataset) else list(ds)
    if not grids:
        raise ValueError("empty dataset")
    n = grids[0].n
    x = _spins_matrix(grids)
    latent = hyper.latent_for(n)
    rng = np.random.default_rng([hyper.seed, 1])
    enc = Mlp.init([n * n, latent], ["tanh"], rng)
    dec = Mlp.init([latent, n * n], ["tanh"], rng)
    s_enc = OptimState.for_model(enc, lr=hyper.lr)
    s_dec = OptimState.for_model(dec, lr=hyper.lr)
    losses = []
    for epoch in range(hyper.encoder_epochs):
        total = 0.0
        for idx in _minibatches(len(x), hyper.batch_size, rng):
            xb = x[idx]
            z, c_enc = enc.forward(xb)
            xr, c_dec = dec.forward(z)
            diff = xr - xb
            total += float(np.sum(diff * diff))
            g_out = 2.0 * diff / diff.size
            g_dec, g_z = dec.backward(c_dec, g_out)
            g_enc, _ = enc.backward(c_enc, g_z)
            opt_step(dec, g_dec, s_dec)
            opt_step(enc, g_enc, s_enc)
        loss = total / x.size
        _check_finite(loss, "encoder", epoch)
        losses.append(loss)
        log.info("encoder epoch %d mse %.5f", epoch, loss)
    return enc, dec, losses


# ------------------------------------------------------------------ field


def target_field(z_j: LatentVector, next_latents: Sequence[LatentVector], beta_j: float, beta_next: float) -> np.ndarray:
    """Mean finite-difference slope from ``z_j`` to each cooled sample."""
    dbeta = beta_next - beta_j
    if dbeta == 0:
        raise ValueError("zero inverse-temperature step")
    if len(next_latents) == 0:
        raise ValueError("need at least one cooled sample")
    nxt = np.stack([z.values for z in next_latents])
    return (nxt - z_j.values[None, :]).mean(axis=0) / dbeta


def kde_loss(pred: np.ndarray, target: np.ndarray, sigma: float) -> float:
    """Gaussian negative log-likelihood up to a constant: ||pred - target||^2 / (2 sigma^2)."""
    d = np.asarray(pred) - np.asarray(target)
    return float(np.sum(d * d) / (2.0 * sigma * sigma))


def field_training_pairs(ds: Dataset, encoder: Mlp) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``[z, beta_j]`` and targets ``<v>`` for every (trajectory, transition)."""
    betas = ds.schedule.betas
    inputs, targets = [], []
    for t in ds.trajectories:
        if len(t.conditional) < len(betas) - 1:
            raise ValueError("dataset lacks conditional samples")
        z = encode_batch(encoder, t.grids)
        for jdx in range(len(betas) - 1):
            zk = encode_batch(encoder, t.conditional[jdx])
            v = (zk - z[jdx][None, :]).mean(axis=0) / (betas[jdx + 1] - betas[jdx])
            inputs.append(np.concatenate([z[jdx], [betas[jdx]]]))
            targets.append(v)
    return np.array(inputs), np.array(targets)


def fit_field(xin: np.ndarray, target: np.ndarray, hyper: FlowHyper) -> tuple[Mlp, list[float]]:
    """Regress ``target`` on ``xin = [z, beta]`` under the KDE loss."""
    latent = target.shape[1]
    rng = np.random.default_rng([hyper.seed, 2])
    net = Mlp.init([latent + 1, hyper.field_hidden, hyper.field_hidden, latent], ["tanh", "tanh", "identity"], rng)
    st = OptimState.for_model(net, lr=hyper.lr)
    inv_two_s2 = 1.0 / (2.0 * hyper.sigma**2)
    losses = []
    for epoch in range(hyper.field_epochs):
        total = 0.0
        for idx in _minibatches(len(xin), hyper.batch_size, rng):
            pred, cache = net.forward(xin[idx])
            diff = pred - target[idx]
            total += inv_two_s2 * float(np.sum(diff * diff))
            grads, _ = net.backward(cache, 2.0 * inv_two_s2 * diff / len(idx))
            opt_step(net, grads, st)
        loss = total / len(xin)
        _check_finite(loss, "field", epoch)
        losses.append(loss)
        log.info("field epoch %d kde %.5f", epoch, loss)
    return net, losses


def train_field(ds: Dataset, encoder: Mlp, hyper: FlowHyper) -> tuple[Mlp, list[float]]:
    return fit_field(*field_training_pairs(ds, encoder), hyper)


def euler_step(v_field: Mlp | Callable, z: LatentVector, beta_j: float, beta_next: float) -> LatentVector:
    if not beta_next > beta_j:
        raise ValueError("euler_step runs towards larger beta")
    inp = np.concatenate([z.values, [beta_j]])
    v = v_field(inp)
    return LatentVector(z.values + (beta_next - beta_j) * v, beta_next)


# -------------------------------------------------------------- projector


def relaxed_energy(x: np.ndarray, n: int, j: float = 1.0) -> np.ndarray:
    """Per-site Hamiltonian of continuous spins, one value per row."""
    g = x.reshape(-1, n, n)
    b = np.sum(g * np.roll(g, -1, axis=1), axis=(1, 2)) + np.sum(g * np.roll(g, -1, axis=2), axis=(1, 2))
    return -j * b / (n * n)


def relaxed_energy_grad(x: np.ndarray, n: int, j: float = 1.0) -> np.ndarray:
    g = x.reshape(-1, n, n)
    nb = np.roll(g, 1, axis=1) + np.roll(g, -1, axis=1) + np.roll(g, 1, axis=2) + np.roll(g, -1, axis=2)
    return (-j * nb / (n * n)).reshape(x.shape)


def projector_loss(xhat: np.ndarray, x: np.ndarray, n: int, ising_weight: float) -> tuple[float, np.ndarray]:
    """Batch-mean of site-averaged MSE plus ``ising_weight * |e(xhat) - e(x)|``.

    Energies are per site; returns the loss and its gradient w.r.t. ``xhat``.
    """
    bsz = xhat.shape[0]
    diff = xhat - x
    mse = float(np.sum(diff * diff)) / diff.size
    grad = 2.0 * diff / diff.size
    if ising_weight:
        de = relaxed_energy(xhat, n) - relaxed_energy(x, n)
        mse += ising_weight * float(np.mean(np.abs(de)))
        grad = grad + ising_weight * np.sign(de)[:, None] * relaxed_energy_grad(xhat, n) / bsz
    return mse, grad


def projector_training_pairs(ds: Dataset, encoder: Mlp) -> tuple[np.ndarray, np.ndarray]:
    betas = ds.schedule.betas
    inputs, targets = [], []
    for t in ds.trajectories:
        for jdx, g in enumerate(t.grids):
            inputs.append((g, betas[jdx]))
        for jdx, cond in enumerate(t.conditional):
            inputs.extend((g, betas[jdx + 1]) for g in cond)
    x = _spins_matrix([g for g, _ in inputs])
    z = encoder(x)
    bcol = np.array([b for _, b in inputs])[:, None]
    return np.hstack([z, bcol]), x


def train_projector(ds: Dataset, encoder: Mlp, hyper: FlowHyper) -> tuple[Mlp, list[float]]:
    """Fit ``P(z, beta) -> x`` on encoded dataset grids."""
    xin, x = projector_training_pairs(ds, encoder)
    n = ds.n
    rng = np.random.default_rng([hyper.seed, 3])
    net = Mlp.init([xin.shape[1], n * n], ["tanh"], rng)
    st = OptimState.for_model(net, lr=hyper.lr)
    losses = []
    for epoch in range(hyper.projector_epochs):
        total = 0.0
        for idx in _minibatches(len(xin), hyper.batch_size, rng):
            xhat, cache = net.forward(xin[idx])
            loss, g = projector_loss(xhat, x[idx], n, hyper.ising_weight)
            total += loss * len(idx)
            grads, _ = net.backward(cache, g)
            opt_step(net, grads, st)
        loss = total / len(xin)
        _check_finite(loss, "projector", epoch)
        losses.append(loss)
        log.info("projector epoch %d loss %.5f", epoch, loss)
    return net, losses


def train_bundle(ds: Dataset, hyper: FlowHyper) -> ModelBundle:
    """All three stages in order, each trained separately on ``ds``."""
    b = ModelBundle(n=ds.n, hyper=hyper, fingerprint=dataset_fingerprint(ds))
    b.encoder, b.inverse_map, b.losses["encoder"] = train_encoder(ds, hyper)
    b.field, b.losses["field"] = train_field(ds, b.encoder, hyper)
    b.projector, b.losses["projector"] = train_projector(ds, b.encoder, hyper)
    return b


# ---------------------------------------------------------------- decoding


def binarize(x: np.ndarray) -> np.ndarray:
    """Sign with exact zeros mapped to +1."""
    return np.where(x < 0, -1, 1).astype(np.int8)


def decode_learned(b: ModelBundle, z: LatentVector, beta: float) -> SpinGrid:
    b.require("projector")
    out = b.projector(np.concatenate([z.values, [beta]]))
    return SpinGrid._trusted(binarize(out), b.n)


def linear_readout(b: ModelBundle, z: np.ndarray) -> np.ndarray:
    b.require("inverse_map")
    return z @ b.inverse_map.weights[-1] + b.inverse_map.biases[-1]


def decode_mh(b: ModelBundle, z: LatentVector, beta: float, steps: int, rng: np.random.Generator) -> SpinGrid:
    """Sign of the per-site readout of ``z``, then ``steps`` Metropolis sweeps at ``beta``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    s = binarize(linear_readout(b, z.values))
    nbr = _nbr(b.n)
    order = np.empty(s.size, np.int64)
    for _ in range(steps):
        _metropolis_sweep_kernel(s, nbr, float(beta), 1.0, rng, order)
    return SpinGrid._trusted(s, b.n)


def _mh_steps(decoder: str) -> int:
    if decoder not in DECODERS:
        raise ValueError(f"unknown decoder {decoder!r}; expected one of {DECODERS}")
    return {"mh10": 10, "mh15": 15}.get(decoder, 0)


def generate_trajectory(
    b: ModelBundle,
    x0: SpinGrid,
    schedule: CoolingSchedule,
    decoder: str = "ptheta",
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Autoregressive encode -> Euler step -> decode through the schedule."""
    steps = _mh_steps(decoder)
    b.require("encoder", "field")
    if decoder == "ptheta":
        b.require("projector")
    elif rng is None:
        raise ValueError("Metropolis-refined decoders need an rng stream")
    betas = schedule.betas
    grids = [x0]
    g = x0
    for bj, bn in zip(betas[:-1], betas[1:]):
        z = encode(b, g, bj)
        z1 = euler_step(b.field, z, bj, bn)
        g = decode_learned(b, z1, bn) if decoder == "ptheta" else decode_mh(b, z1, bn, steps, rng)
        grids.append(g)
    return Trajectory(grids=grids)


def generate_batch(
    b: ModelBundle,
    x0s: Sequence[SpinGrid],
    schedule: CoolingSchedule,
    decoder: str = "ptheta",
    rng: np.random.Generator | None = None,
) -> list[Trajectory]:
    """Vectorised ``generate_trajectory`` over many starting grids.

    Each Metropolis-refined trajectory draws from its own child of ``rng``,
    so results match running the trajectories one at a time with those children.
    """
    steps = _mh_steps(decoder)
    if decoder != "ptheta":
        if rng is None:
            raise ValueError("Metropolis-refined decoders need an rng stream")
        subs = rng.spawn(len(x0s))
    betas = schedule.betas
    n = b.n
    x = _spins_matrix(x0s)
    history = [x.astype(np.int8)]
    nbr = _nbr(n)
    order = np.empty(n * n, np.int64)
    for bj, bn in zip(betas[:-1], betas[1:]):
        z = b.encoder(x)
        v = b.field(np.hstack([z, np.full((len(z), 1), bj)]))
        z1 = z + (bn - bj) * v
        if decoder == "ptheta":
            s = binarize(b.projector(np.hstack([z1, np.full((len(z1), 1), bn)])))
        else:
            s = binarize(linear_readout(b, z1))
            for r in range(len(s)):
                for _ in range(steps):
                    _metropolis_sweep_kernel(s[r], nbr, float(bn), 1.0, subs[r], order)
        history.append(s)
        x = s.astype(np.float64)
    return [Trajectory(grids=[SpinGrid._trusted(h[r].copy(), n) for h in history]) for r in range(len(x0s))]


# ------------------------------------------------------------- persistence


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(f"{ds.n}|{ds.schedule.temperatures}|{ds.k_count}|{ds.seed}".encode())
    for g in all_grids(ds):
        h.update(g.spins.tobytes())
    return h.hexdigest()


COMPONENTS = ("encoder", "inverse_map", "field", "projector")


def save_bundle(b: ModelBundle, model_dir: Path | str) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    for name in COMPONENTS:
        net = getattr(b, name)
        if net is not None:
            net.save(model_dir / f"{name}.ifm")
    sidecar = {
        "n": b.n,
        "hyper": asdict(b.hyper),
        "dataset_fingerprint": b.fingerprint,
        "components": [c for c in COMPONENTS if getattr(b, c) is not None],
        "final_loss": {k: v[-1] for k, v in b.losses.items() if v},
        "losses": b.losses,
    }
    (model_dir / "bundle.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle(model_dir: Path | str) -> ModelBundle:
    model_dir = Path(model_dir)
    side = json.loads((model_dir / "bundle.json").read_text(encoding="utf-8"))
    b = ModelBundle(n=int(side["n"]), hyper=FlowHyper(**side["hyper"]), fingerprint=side["dataset_fingerprint"])
    b.losses = {k: list(v) for k, v in side.get("losses", {}).items()}
    for name in side["components"]:
        setattr(b, name, Mlp.load(model_dir / f"{name}.ifm"))
    return b

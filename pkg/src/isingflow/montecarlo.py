"""Metropolis and Wolff samplers for the zero-field Ising model.

The inner loops are numba kernels that mutate flat int8 spin arrays in place
and draw from a ``numpy.random.Generator`` passed in directly, so a seeded
stream fully determines every run. Public functions copy their input grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from .lattice import CouplingParams, SpinGrid, neighbor_table
from .onsager import internal_energy_exact
from .schedule import CoolingSchedule, Trajectory

log = logging.getLogger(__name__)

_NBR_CACHE: dict[int, np.ndarray] = {}


def _nbr(n: int) -> np.ndarray:
    t = _NBR_CACHE.get(n)
    if t is None:
        t = _NBR_CACHE[n] = neighbor_table(n)
    return t


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, stream...)``.

    Streams with different ids never overlap, so trajectories and conditional
    samples can each own one regardless of execution order.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class EquilibrationConfig:
    epsilon: float = 0.05
    window: int = 16
    max_steps: int = 50_000

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_steps < self.window:
            raise ValueError("max_steps must be >= window")


@dataclass
class EquilibrationResult:
    grid: SpinGrid
    converged: bool
    steps: int


# --------------------------------------------------------------------- kernels


@numba.njit(cache=True, nogil=True)
def _metropolis_sweep_kernel(s, nbr, beta, j, rng, order):
    n2 = s.size
    for i in range(n2):
        order[i] = i
    for i in range(n2 - 1, 0, -1):
        k = rng.integers(0, i + 1)
        order[i], order[k] = order[k], order[i]
    for idx in range(n2):
        i = order[idx]
        local = s[nbr[i, 0]] + s[nbr[i, 1]] + s[nbr[i, 2]] + s[nbr[i, 3]]
        de = 2.0 * j * s[i] * local
        if de <= 0.0:
            s[i] = -s[i]
        elif rng.random() < math.exp(-beta * de):
            s[i] = -s[i]


@numba.njit(cache=True, nogil=True)
def _grow_cluster(s, nbr, p_add, rng, stack, in_cluster, members):
    """Grow a Wolff cluster; returns (size, spin sign, bond sum across its boundary)."""
    n2 = s.size
    seed = rng.integers(0, n2)
    sign = s[seed]
    in_cluster[seed] = True
    members[0] = seed
    stack[0] = seed
    size = 1
    top = 1
    while top > 0:
        top -= 1
        site = stack[top]
        for a in range(4):
            nb = nbr[site, a]
            if s[nb] == sign and not in_cluster[nb]:
                if rng.random() < p_add:
                    in_cluster[nb] = True
                    stack[top] = nb
                    top += 1
                    members[size] = nb
                    size += 1
    boundary = 0
    for m in range(size):
        site = members[m]
        for a in range(4):
            nb = nbr[site, a]
            if not in_cluster[nb]:
                boundary += s[site] * s[nb]
    return size, sign, boundary


@numba.njit(cache=True, nogil=True)
def _wolff_kernel(s, nbr, p_add, rng, constrained, stack, in_cluster, members, mag):
    """One Wolff update in place; returns (accepted, size, bond-sum change, new M)."""
    size, sign, boundary = _grow_cluster(s, nbr, p_add, rng, stack, in_cluster, members)
    new_mag = mag - 2 * sign * size
    accept = True
    if constrained and mag != 0 and new_mag != 0 and (mag > 0) != (new_mag > 0):
        accept = False
    for m in range(size):
        site = members[m]
        in_cluster[site] = False
        if accept:
            s[site] = -s[site]
    if accept:
        # each boundary bond x_i x_j changes sign when the cluster flips
        return True, size, -2 * boundary, new_mag
    return False, size, 0, mag


@numba.njit(cache=True, nogil=True)
def _bond_sum_kernel(s, nbr):
    b = 0
    for i in range(s.size):
        b += s[i] * (s[nbr[i, 1]] + s[nbr[i, 3]])
    return b


@numba.njit(cache=True, nogil=True)
def _equilibrate_kernel(s, nbr, beta, j, target, eps, window, max_steps, rng, constrained):
    n2 = s.size
    p_add = 1.0 - math.exp(-2.0 * beta * j)
    stack = np.empty(n2, np.int64)
    members = np.empty(n2, np.int64)
    in_cluster = np.zeros(n2, np.bool_)
    bonds = _bond_sum_kernel(s, nbr)
    mag = 0
    for i in range(n2):
        mag += s[i]
    buf = np.zeros(window)
    pos = 0
    filled = 0
    for step in range(1, max_steps + 1):
        acc, size, dbond, mag = _wolff_kernel(s, nbr, p_add, rng, constrained, stack, in_cluster, members, mag)
        bonds += dbond
        buf[pos] = -j * bonds / n2
        pos = (pos + 1) % window
        if filled < window:
            filled += 1
        if filled == window:
            mean = 0.0
            for w in range(window):
                mean += buf[w]
            mean /= window
            if abs(mean - target) / abs(target) < eps:
                return step, True
    return max_steps, False


@numba.njit(cache=True, nogil=True)
def _chain_kernel(s, nbr, beta, j, n_steps, rng, method, constrained, out, energies, mags):
    n2 = s.size
    p_add = 1.0 - math.exp(-2.0 * beta * j)
    stack = np.empty(n2, np.int64)
    members = np.empty(n2, np.int64)
    in_cluster = np.zeros(n2, np.bool_)
    order = np.empty(n2, np.int64)
    bonds = _bond_sum_kernel(s, nbr)
    mag = 0
    for i in range(n2):
        mag += s[i]
    record = out.shape[0] > 0
    for t in range(n_steps):
        if method == 0:
            _metropolis_sweep_kernel(s, nbr, beta, j, rng, order)
            bonds = _bond_sum_kernel(s, nbr)
            mag = 0
            for i in range(n2):
                mag += s[i]
        else:
            acc, size, dbond, mag = _wolff_kernel(s, nbr, p_add, rng, constrained, stack, in_cluster, members, mag)
            bonds += dbond
        energies[t] = -j * bonds
        mags[t] = mag
        if record:
            out[t, :] = s


# ------------------------------------------------------------------ public API


def metropolis_sweep(g: SpinGrid, beta: float, rng: np.random.Generator, j: float = 1.0) -> SpinGrid:
    """One sweep over all sites in a fresh random order."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    s = g.spins.copy()
    _metropolis_sweep_kernel(s, _nbr(g.n), float(beta), float(j), rng, np.empty(s.size, np.int64))
    return SpinGrid._trusted(s, g.n)


def metropolis_sweeps(g: SpinGrid, beta: float, steps: int, rng: np.random.Generator, j: float = 1.0) -> SpinGrid:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    s = g.spins.copy()
    nbr = _nbr(g.n)
    order = np.empty(s.size, np.int64)
    for _ in range(steps):
        _metropolis_sweep_kernel(s, nbr, float(beta), float(j), rng, order)
    return SpinGrid._trusted(s, g.n)


def _wolff(g: SpinGrid, beta: float, rng, j: float, constrained: bool):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    s = g.spins.copy()
    n2 = s.size
    mag = int(s.sum(dtype=np.int64))
    p_add = 1.0 - math.exp(-2.0 * beta * j)
    accepted, size, _, _ = _wolff_kernel(
        s,
        _nbr(g.n),
        p_add,
        rng,
        constrained,
        np.empty(n2, np.int64),
        np.zeros(n2, np.bool_),
        np.empty(n2, np.int64),
        mag,
    )
    return SpinGrid._trusted(s, g.n), bool(accepted), int(size)


def wolff_step(g: SpinGrid, beta: float, rng: np.random.Generator, j: float = 1.0) -> SpinGrid:
    """Grow one cluster with add probability 1 - exp(-2 beta J) and flip it."""
    return _wolff(g, beta, rng, j, False)[0]


def wolff_step_sign_constrained(g: SpinGrid, beta: float, rng: np.random.Generator, j: float = 1.0) -> SpinGrid:
    """Wolff update that refuses to invert a nonzero total magnetization."""
    return _wolff(g, beta, rng, j, True)[0]


def equilibrate(
    g: SpinGrid,
    beta: float,
    cfg: EquilibrationConfig = EquilibrationConfig(),
    cp: CouplingParams = CouplingParams(),
    rng: np.random.Generator | None = None,
) -> EquilibrationResult:
    """Sign-constrained Wolff updates until the trailing-window energy per site
    is within relative ``cfg.epsilon`` of the exact value, or ``max_steps``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if cp.h != 0:
        raise ValueError("equilibration targets the zero-field exact energy")
    if rng is None:
        raise ValueError("an explicit rng stream is required")
    s = g.spins.copy()
    target = internal_energy_exact(beta, cp.j)
    steps, ok = _equilibrate_kernel(
        s, _nbr(g.n), float(beta), float(cp.j), target, cfg.epsilon, cfg.window, cfg.max_steps, rng, True
    )
    if not ok:
        log.warning("equilibration at beta=%.4f (n=%d) hit max_steps=%d", beta, g.n, cfg.max_steps)
    return EquilibrationResult(SpinGrid._trusted(s, g.n), bool(ok), int(steps))


@dataclass
class ChainRecord:
    final: SpinGrid
    energies: np.ndarray
    magnetizations: np.ndarray
    states: np.ndarray | None


def run_chain(
    g: SpinGrid,
    beta: float,
    n_steps: int,
    rng: np.random.Generator,
    method: str = "wolff",
    sign_constrained: bool = False,
    record_states: bool = False,
    j: float = 1.0,
) -> ChainRecord:
    """Run ``n_steps`` updates, recording total energy and magnetization after each.

    ``method`` is ``"wolff"`` (one cluster per step) or ``"metropolis"`` (one
    sweep per step). With ``record_states`` the visited grids are returned as
    an ``(n_steps, n*n)`` int8 array.
    """
    if method not in ("wolff", "metropolis"):
        raise ValueError(f"unknown method {method!r}")
    s = g.spins.copy()
    out = np.empty((n_steps if record_states else 0, s.size), np.int8)
    energies = np.empty(n_steps)
    mags = np.empty(n_steps, np.int64)
    _chain_kernel(
        s,
        _nbr(g.n),
        float(beta),
        float(j),
        int(n_steps),
        rng,
        0 if method == "metropolis" else 1,
        bool(sign_constrained),
        out,
        energies,
        mags,
    )
    return ChainRecord(SpinGrid._trusted(s, g.n), energies, mags, out if record_states else None)


def anneal_trajectory(
    schedule: CoolingSchedule,
    n: int,
    cfg: EquilibrationConfig = EquilibrationConfig(),
    cp: CouplingParams = CouplingParams(),
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Random start, then equilibrate at each inverse temperature in turn."""
    betas = schedule.betas
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("schedule must run hot to cold")
    if rng is None:
        raise ValueError("an explicit rng stream is required")
    g = SpinGrid.random(n, rng)
    grids, flags = [], []
    for beta in betas:
        res = equilibrate(g, beta, cfg, cp, rng)
        g = res.grid
        grids.append(g)
        flags.append(res.converged)
    return Trajectory(grids=grids, converged=flags)

"""Square-lattice spin grids with periodic boundaries.

Sites are indexed row-major: site ``i`` sits at row ``i // n``, column ``i % n``.
Every bond is counted once through the right and down neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CouplingParams:
    j: float = 1.0
    h: float = 0.0

    def __post_init__(self):
        if not self.j > 0:
            raise ValueError(f"coupling j must be positive, got {self.j}")


class SpinGrid:
    """An ``n x n`` grid of +1/-1 spins stored as a flat int8 array."""

    __slots__ = ("n", "spins")

    def __init__(self, spins, n: int | None = None):
        arr = np.asarray(spins)
        if arr.ndim == 2:
            if arr.shape[0] != arr.shape[1]:
                raise ValueError(f"grid must be square, got shape {arr.shape}")
            n = arr.shape[0] if n is None else n
        arr = np.ascontiguousarray(arr.reshape(-1), dtype=np.int8)
        if n is None:
            n = int(round(np.sqrt(arr.size)))
        if n < 2 or arr.size != n * n:
            raise ValueError(f"expected {n}*{n} spins, got {arr.size}")
        if not np.all((arr == 1) | (arr == -1)):
            raise ValueError("spins must be +1 or -1")
        self.n = int(n)
        self.spins = arr

    @classmethod
    def _trusted(cls, spins: np.ndarray, n: int) -> "SpinGrid":
        # skips validation; callers guarantee a flat int8 array of +-1
        obj = cls.__new__(cls)
        obj.n = n
        obj.spins = spins
        return obj

    @classmethod
    def all_up(cls, n: int) -> "SpinGrid":
        return cls._trusted(np.ones(n * n, dtype=np.int8), n)

    @classmethod
    def checkerboard(cls, n: int) -> "SpinGrid":
        r, c = np.indices((n, n))
        return cls._trusted(np.where((r + c) % 2 == 0, 1, -1).astype(np.int8).ravel(), n)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "SpinGrid":
        bits = rng.integers(0, 2, size=n * n, dtype=np.int8)
        return cls._trusted((2 * bits - 1).astype(np.int8), n)

    @classmethod
    def from_bytes(cls, data: bytes, n: int) -> "SpinGrid":
        return cls(np.frombuffer(data, dtype=np.int8).copy(), n)

    def to_bytes(self) -> bytes:
        return self.spins.tobytes()

    def as_2d(self) -> np.ndarray:
        return self.spins.reshape(self.n, self.n)

    def copy(self) -> "SpinGrid":
        return SpinGrid._trusted(self.spins.copy(), self.n)

    def flipped(self, i: int) -> "SpinGrid":
        _check_site(i, self.n)
        out = self.spins.copy()
        out[i] = -out[i]
        return SpinGrid._trusted(out, self.n)

    def __eq__(self, other):
        if not isinstance(other, SpinGrid):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.spins, other.spins)

    def __hash__(self):
        return hash((self.n, self.spins.tobytes()))

    def __repr__(self):
        return f"SpinGrid(n={self.n}, M={magnetization(self)})"


def _check_site(i: int, n: int) -> None:
    if n < 2:
        raise ValueError(f"lattice size must be >= 2, got {n}")
    if not 0 <= i < n * n:
        raise IndexError(f"site {i} out of range for n={n}")


def neighbors(i: int, n: int) -> tuple[int, int, int, int]:
    """Up, down, left and right neighbours of site ``i`` with wraparound."""
    _check_site(i, n)
    r, c = divmod(i, n)
    return (
        ((r - 1) % n) * n + c,
        ((r + 1) % n) * n + c,
        r * n + (c - 1) % n,
        r * n + (c + 1) % n,
    )


def neighbor_table(n: int) -> np.ndarray:
    """``(n*n, 4)`` int64 table of ``neighbors`` for every site."""
    idx = np.arange(n * n).reshape(n, n)
    return np.stack(
        [
            np.roll(idx, 1, axis=0).ravel(),
            np.roll(idx, -1, axis=0).ravel(),
            np.roll(idx, 1, axis=1).ravel(),
            np.roll(idx, -1, axis=1).ravel(),
        ],
        axis=1,
    ).astype(np.int64)


def bond_sum(spins2d: np.ndarray) -> int:
    """Sum of ``x_i x_j`` over the ``2 n^2`` nearest-neighbour bonds (exact integer)."""
    s = spins2d.astype(np.int64)
    return int(np.sum(s * np.roll(s, -1, axis=0)) + np.sum(s * np.roll(s, -1, axis=1)))


def hamiltonian(g: SpinGrid, c: CouplingParams = CouplingParams()) -> float:
    """H = -J sum_<ij> x_i x_j - h sum_i x_i, each bond counted once."""
    e = -c.j * bond_sum(g.as_2d())
    if c.h:
        e -= c.h * int(g.spins.sum(dtype=np.int64))
    return float(e)


def magnetization(g: SpinGrid) -> int:
    return int(g.spins.sum(dtype=np.int64))


def delta_e(g: SpinGrid, i: int, c: CouplingParams = CouplingParams()) -> float:
    """Energy change from flipping site ``i``; O(1)."""
    nb = neighbors(i, g.n)
    s = g.spins
    local = int(s[nb[0]]) + int(s[nb[1]]) + int(s[nb[2]]) + int(s[nb[3]])
    xi = int(s[i])
    return float(2 * xi * (c.j * local + c.h))


def energies_per_site(spins: np.ndarray, n: int, j: float = 1.0) -> np.ndarray:
    """Per-site energies for a stack of flat grids, shape ``(batch, n*n)`` -> ``(batch,)``."""
    s = spins.reshape(-1, n, n).astype(np.int64)
    b = np.sum(s * np.roll(s, -1, axis=1), axis=(1, 2)) + np.sum(s * np.roll(s, -1, axis=2), axis=(1, 2))
    return -j * b / (n * n)

"""Closed-form results for the zero-field square-lattice Ising model.

Conventions: ``k_B = 1``; elliptic integrals take the modulus ``k`` (not the
parameter ``m = k**2``); ``K = beta J`` and ``L = beta J'`` are the
dimensionless horizontal and vertical couplings.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class AnisotropicCouplings:
    big_k: float
    big_l: float

    def __post_init__(self):
        if not (self.big_k > 0 and self.big_l > 0):
            raise ValueError("couplings K and L must be positive")

    @property
    def modulus(self) -> float:
        """k = 1 / (sinh 2K sinh 2L)."""
        return 1.0 / (math.sinh(2 * self.big_k) * math.sinh(2 * self.big_l))

    @property
    def cosh_product(self) -> float:
        return math.cosh(2 * self.big_k) * math.cosh(2 * self.big_l)

    @classmethod
    def isotropic(cls, beta: float, j: float = 1.0) -> "AnisotropicCouplings":
        return cls(beta * j, beta * j)


def _agm(a: float, b: float) -> float:
    for _ in range(64):
        if abs(a - b) <= 1e-16 * a:
            break
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return a


def _elliptic_k_from_complement(kc: float) -> float:
    # K(k) = pi / (2 AGM(1, k')); passing k' directly keeps precision near k = 1
    if kc <= 0.0:
        raise ValueError("complete elliptic integral diverges at k = 1")
    return math.pi / (2.0 * _agm(1.0, kc))


def elliptic_k(k: float) -> float:
    """Complete elliptic integral of the first kind for modulus ``0 <= k < 1``."""
    if not 0.0 <= k < 1.0:
        raise ValueError(f"modulus must satisfy 0 <= k < 1, got {k}")
    return _elliptic_k_from_complement(math.sqrt((1.0 - k) * (1.0 + k)))


def critical_beta(j: float = 1.0) -> float:
    if not j > 0:
        raise ValueError(f"coupling must be positive, got {j}")
    return math.log(1.0 + math.sqrt(2.0)) / (2.0 * j)


def _internal_energy_raw(beta: float, j: float) -> float:
    x = 2.0 * beta * j
    s, c = math.sinh(x), math.cosh(x)
    # complementary modulus of k = 2 sinh x / cosh^2 x, written to avoid cancellation
    kc = abs(1.0 - s * s) / (1.0 + s * s)
    t = math.tanh(x)
    return -j * (c / s) * (1.0 + (2.0 / math.pi) * (2.0 * t * t - 1.0) * _elliptic_k_from_complement(kc))


def internal_energy_exact(beta: float, j: float = 1.0) -> float:
    """Exact internal energy per site of the infinite isotropic lattice."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    bc = critical_beta(j)
    if abs(beta - bc) <= 1e-9 * bc:
        return 0.5 * (_internal_energy_raw(bc * (1 - 1e-9), j) + _internal_energy_raw(bc * (1 + 1e-9), j))
    return _internal_energy_raw(beta, j)


def _log_eigen_factor(theta, c: AnisotropicCouplings):
    k = c.modulus
    root = np.sqrt(np.maximum(1.0 + k * k - 2.0 * k * np.cos(2.0 * theta), 0.0)) / k
    return np.log(2.0 * (c.cosh_product + root))


def free_energy_integral(c: AnisotropicCouplings, temperature: float) -> float:
    """Free energy per site, -(T / 2 pi) * integral_0^pi F(theta) dtheta."""
    # the integrand is symmetric about pi/2; near k = 1 it has a kink of width
    # ~|1 - k| at theta = 0, so give quad breakpoints on that scale
    k = c.modulus
    scale = min(max(abs(1.0 - k), 1e-12), 1.0)
    pts = [scale * f for f in (0.5, 2.0, 8.0) if scale * f < math.pi / 2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        half, err = integrate.quad(
            _log_eigen_factor, 0.0, math.pi / 2, args=(c,), epsabs=1e-14, epsrel=1e-13, limit=400, points=pts
        )
    val = 2.0 * half
    if not 2.0 * err <= 1e-10 * max(1.0, abs(val)):
        raise RuntimeError(f"free-energy quadrature did not converge (error estimate {2 * err:.3g})")
    return -temperature / (2.0 * math.pi) * val


def eigen_angles(p: int) -> np.ndarray:
    """theta_j = pi (j - 1/2) / (2p) for j = 1..2p (largest-eigenvalue branch)."""
    j = np.arange(1, 2 * p + 1, dtype=float)
    return np.pi * (j - 0.5) / (2 * p)


def eigen_coefficients(c: AnisotropicCouplings, p: int) -> np.ndarray:
    k = c.modulus
    th = eigen_angles(p)
    return np.sqrt(1.0 + k * k - 2.0 * k * np.cos(2.0 * th)) / k


def log_lambda_max(c: AnisotropicCouplings, p: int) -> float:
    """ln of the largest transfer-matrix eigenvalue for rows of ``2p`` sites."""
    cj = eigen_coefficients(c, p)
    return 0.5 * float(np.sum(np.log(2.0 * (c.cosh_product + cj))))


def free_energy_finite(c: AnisotropicCouplings, temperature: float, p: int) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return -temperature / (2 * p) * log_lambda_max(c, p)


def singular_free_energy(c: AnisotropicCouplings, temperature: float) -> float:
    """Leading singular part of the free energy near k = 1.

    Vanishes on the critical manifold; for k > 1 the logarithm is taken of the
    absolute ratio.
    """
    k = c.modulus
    if not k > 0:
        raise ValueError("modulus must be positive")
    if k == 1.0:
        return 0.0
    pref = temperature * (1 + k) * (1 - k) / (4 * math.pi * k * c.cosh_product)
    return -pref * math.log(abs((1 + k) / (1 - k)))

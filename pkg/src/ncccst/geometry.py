"""Compton kinematics and the circular scanner geometry.

The source sits at the origin and the detector ring (diameter ``p``) is
centred at ``(0, -p/2)``. Angles are radians, energies MeV, lengths in the
same unit as ``p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ELECTRON_REST_ENERGY = 0.511  # MeV


class DomainError(ValueError):
    """Argument outside the physical domain of a kinematic relation."""


class SingularArcError(ValueError):
    """Scattering angle at which the arc diameter is undefined (sin w = 0)."""


@dataclass(frozen=True)
class ComptonSpec:
    e0: float = 0.3
    mc2: float = ELECTRON_REST_ENERGY

    def __post_init__(self):
        if not self.e0 > 0:
            raise DomainError(f"source energy must be positive, got {self.e0}")
        if self.mc2 != ELECTRON_REST_ENERGY:
            raise DomainError("mc2 is fixed at 0.511 MeV")

    @property
    def e_min(self) -> float:
        """Backscatter energy E(pi)."""
        return self.e0 / (1.0 + 2.0 * self.e0 / self.mc2)


def energy_of_angle(spec: ComptonSpec, omega):
    """Scattered photon energy E(omega) for scattering angle ``omega``.

    Accepts scalars or arrays; raises :class:`DomainError` outside [0, pi].
    """
    w = np.asarray(omega, dtype=np.float64)
    if np.any(~np.isfinite(w)) or np.any(w < 0.0) or np.any(w > math.pi):
        raise DomainError(f"scattering angle outside [0, pi]: {omega}")
    e = spec.e0 / (1.0 + (spec.e0 / spec.mc2) * (1.0 - np.cos(w)))
    return float(e) if e.ndim == 0 else e


def angle_of_energy(spec: ComptonSpec, e):
    """Inverse of :func:`energy_of_angle` on [E(pi), E0]."""
    en = np.asarray(e, dtype=np.float64)
    lo, hi = spec.e_min, spec.e0
    # one-ulp slack so that round trips through energy_of_angle are accepted
    tol = 4 * np.finfo(np.float64).eps * hi
    if np.any(~np.isfinite(en)) or np.any(en < lo - tol) or np.any(en > hi + tol):
        raise DomainError(f"energy outside [{lo:.6f}, {hi:.6f}] MeV: {e}")
    cos_w = 1.0 - spec.mc2 * (1.0 / en - 1.0 / spec.e0)
    w = np.arccos(np.clip(cos_w, -1.0, 1.0))
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class EnergyGrid:
    n_e: int
    delta_e: float
    centers: tuple[float, ...]
    omegas: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.centers) == len(self.omegas) == self.n_e):
            raise ValueError("centers/omegas length must equal n_e")


def build_energy_grid(spec: ComptonSpec, delta_e: float) -> EnergyGrid:
    """Bin [E(pi), E0) at resolution ``delta_e``; bin centres map to angles."""
    span = spec.e0 - spec.e_min
    if not (0.0 < delta_e < span):
        raise DomainError(f"delta_e must lie in (0, {span:.7f}) MeV, got {delta_e}")
    n_e = int(math.floor(span / delta_e))
    centers = spec.e_min + (np.arange(n_e) + 0.5) * delta_e
    omegas = angle_of_energy(spec, centers)
    return EnergyGrid(n_e, float(delta_e), tuple(map(float, centers)), tuple(map(float, np.atleast_1d(omegas))))


def detector_angles(k: int) -> tuple[float, ...]:
    """Uniform detector angles in the open interval (-pi, 0)."""
    return tuple(-math.pi + i * math.pi / (k + 1) for i in range(1, k + 1))


@dataclass(frozen=True)
class SystemGeometry:
    p: float
    k: int
    betas: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.p > 0:
            raise DomainError(f"ring diameter must be positive, got {self.p}")
        if not self.betas:
            object.__setattr__(self, "betas", detector_angles(self.k))
        b = np.asarray(self.betas)
        if len(b) != self.k:
            raise ValueError(f"expected {self.k} detector angles, got {len(b)}")
        if np.any(b <= -math.pi) or np.any(b >= 0.0) or np.any(np.diff(b) <= 0):
            raise DomainError("detector angles must be strictly increasing in (-pi, 0)")

    source = (0.0, 0.0)

    @property
    def ring_center(self) -> tuple[float, float]:
        return (0.0, -self.p / 2)

    def detector_position(self, beta: float) -> tuple[float, float]:
        """Ring point seen from the source at polar angle ``beta``.

        The chord S-D has length ``-p sin(beta)``; equivalently the point
        sits at ring angle ``2 beta + pi/2`` about the ring centre.
        """
        gamma = 2.0 * beta + math.pi / 2
        return (self.p / 2 * math.cos(gamma), -self.p / 2 + self.p / 2 * math.sin(gamma))

    def detector_positions(self) -> np.ndarray:
        return np.array([self.detector_position(b) for b in self.betas])


@dataclass(frozen=True)
class ArcPair:
    """The two scanning arcs through S and D_k for one (omega, beta_k).

    ``phi_minus`` is the literal angle phi(-omega, beta). The second arc's
    kernel carries the signed diameter rho(-omega) = -rho, so its points are
    ``r = -rho cos(theta - phi_minus)``, which is the mirror image of the
    first arc across the chord S-D_k.
    """

    rho: float
    phi_plus: float
    phi_minus: float
    theta_range_plus: tuple[float, float]
    theta_range_minus: tuple[float, float]

    def radius_plus(self, theta):
        return self.rho * np.cos(np.asarray(theta) - self.phi_plus)

    def radius_minus(self, theta):
        return -self.rho * np.cos(np.asarray(theta) - self.phi_minus)

    def points(self, theta, which: str = "plus") -> np.ndarray:
        """Cartesian points (..., 2) of an arc at polar angles ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        r = self.radius_plus(theta) if which == "plus" else self.radius_minus(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def arc_parameters(geom: SystemGeometry, omega: float, beta: float) -> ArcPair:
    if not (-math.pi < beta < 0.0):
        raise DomainError(f"detector angle outside (-pi, 0): {beta}")
    if not (0.0 <= omega <= math.pi):
        raise DomainError(f"scattering angle outside [0, pi]: {omega}")
    s = math.sin(omega)
    if omega == 0.0 or omega == math.pi or s == 0.0:
        raise SingularArcError(f"arc diameter undefined at omega={omega}")
    rho = geom.p * math.cos(beta + math.pi / 2) / s
    return ArcPair(
        rho=rho,
        phi_plus=beta + omega - math.pi / 2,
        phi_minus=beta - omega - math.pi / 2,
        theta_range_plus=(beta, beta + omega),
        theta_range_minus=(beta - omega, beta),
    )

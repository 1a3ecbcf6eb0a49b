"""Finite-volume momentum lattice, Fermi ball, and excitation pairs.

All mode sets live on (2*pi/L) Z^d. Membership tests (cutoff sphere, Fermi
ball) are decided on exact integer |z|^2 against a guarded float threshold,
so boundary modes are classified deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative guard applied to squared-radius thresholds. |z|^2 is exact integer
# arithmetic; the guard only absorbs rounding in (radius * L / 2pi)^2.
TIE_GUARD = 1e-12

# Hard cap on mode count; larger requests are almost certainly config typos.
MODE_CAP = 5_000_000


def _integer_ball(d: int, zmax: int) -> np.ndarray:
    """All integer vectors with |z_i| <= zmax, lexicographically ordered."""
    ax = np.arange(-zmax, zmax + 1, dtype=np.int64)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _radius_mask(coords: np.ndarray, radius: float, spacing: float) -> np.ndarray:
    z2 = (coords.astype(np.int64) ** 2).sum(axis=1)
    threshold = (radius / spacing) ** 2 * (1.0 + TIE_GUARD)
    return z2 <= threshold


@dataclass(frozen=True)
class MomentumLattice:
    """All modes k = (2*pi/L) z with |k| <= cutoff, in lexicographic z order."""

    d: int
    L: float
    cutoff: float
    coords: np.ndarray = field(repr=False)  # (M, d) int64

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.L

    @property
    def modes(self) -> np.ndarray:
        """Mode vectors in physical momentum units, shape (M, d)."""
        return self.coords * self.spacing

    @property
    def mode_count(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class FermiBall:
    """The closed ball |k| <= k_F inside a lattice; boundary modes included."""

    lattice: MomentumLattice
    k_F: float
    member_mask: np.ndarray = field(repr=False)  # (M,) bool over lattice modes

    @property
    def members(self) -> np.ndarray:
        return self.lattice.modes[self.member_mask]

    @property
    def member_coords(self) -> np.ndarray:
        return self.lattice.coords[self.member_mask]

    @property
    def N(self) -> int:
        return int(self.member_mask.sum())

    def density(self) -> float:
        """Fermion count per box volume, N / L^d."""
        return self.N / self.lattice.L**self.lattice.d


def build_lattice(d: int, L: float, cutoff: float) -> MomentumLattice:
    """Enumerate all lattice modes with |k| <= cutoff.

    Parameters
    ----------
    d : spatial dimension, one of 1, 2, 3
    L : box side length, > 0
    cutoff : largest retained |k|, > 0

    Returns
    -------
    MomentumLattice with modes ordered lexicographically in integer coords.
    """
    if d not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {d}")
    if L <= 0 or cutoff <= 0:
        raise ValueError("L and cutoff must be positive")
    spacing = 2.0 * np.pi / L
    zmax = int(np.floor(cutoff / spacing * (1.0 + TIE_GUARD)))
    if (2 * zmax + 1) ** d > 8 * MODE_CAP:
        raise ValueError(
            f"resource limit: requested cutoff implies ~{(2*zmax+1)**d} "
            f"candidate modes (cap {MODE_CAP})"
        )
    coords = _integer_ball(d, zmax)
    coords = coords[_radius_mask(coords, cutoff, spacing)]
    if coords.shape[0] > MODE_CAP:
        raise ValueError(f"resource limit: {coords.shape[0]} modes (cap {MODE_CAP})")
    coords.setflags(write=False)
    return MomentumLattice(d=d, L=float(L), cutoff=float(cutoff), coords=coords)


def fermi_ball(lattice: MomentumLattice, k_F: float) -> FermiBall:
    """Select the closed Fermi ball |k| <= k_F from the lattice."""
    if k_F > lattice.cutoff * (1.0 + TIE_GUARD):
        raise ValueError(f"cutoff too small: k_F={k_F} exceeds cutoff={lattice.cutoff}")
    mask = _radius_mask(lattice.coords, k_F, lattice.spacing)
    mask.setflags(write=False)
    return FermiBall(lattice=lattice, k_F=float(k_F), member_mask=mask)


def free_ground_energy(ball: FermiBall) -> float:
    """Kinetic energy of the filled ball, sum of |k|^2 over members."""
    k = ball.members
    return float((k**2).sum())


def excitation_pairs(lattice: MomentumLattice, ball: FermiBall):
    """Yield (l, k) with l outside the ball, k inside, l-major deterministic order.

    The pair count is (M - N) * N. Returns an iterator of (l, k) mode-vector
    pairs; bulk consumers should prefer `pair_arrays`.
    """
    outside = lattice.modes[~ball.member_mask]
    inside = ball.members
    for l in outside:
        for k in inside:
            yield l, k


def pair_arrays(lattice: MomentumLattice, ball: FermiBall):
    """Vectorized excitation pairs: (outside_modes, inside_modes) arrays.

    Every (l, k) in outside x inside is an excitation pair; callers broadcast
    over the product instead of materializing it.
    """
    return lattice.modes[~ball.member_mask], ball.members

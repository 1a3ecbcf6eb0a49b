"""Effective n-impurity dynamics on the periodic box.

The impurities evolve under a Hamiltonian whose kinetic part is diagonal
in momentum and whose pair part, direct w minus the fermion-mediated
attraction, is diagonal in position. States live on a pseudo-spectral
grid with M_imp modes per axis; propagation uses Strang splitting, which
is exactly unitary and second order in the step size. The reference
variant keeps only w plus the constant offset from the mediated
potential at contact, which at the theorem coupling matches the full
variant's constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .lattice import FermiBall, free_ground_energy
from .mediated import PotentialTable
from .potentials import ImpurityPotentialSpec, PotentialSpec

DEFAULT_STEPS = 2048
_NORM_TOL = 1e-6


def energy_shift(ball: FermiBall, lam: float, n: int, spec: PotentialSpec,
                 L: float) -> float:
    """Free Fermi-sea energy plus the mean-field offset n lam vhat(0) N/L^d."""
    density = ball.N / L**ball.lattice.d
    return float(free_ground_energy(ball)
                 + n * lam * float(spec.hat(0.0)) * density)


def _axis_momenta(L: float, M_imp: int) -> np.ndarray:
    return 2.0 * np.pi / L * np.fft.fftfreq(M_imp, d=1.0 / M_imp)


def _kinetic_grid(n: int, d: int, L: float, M_imp: int) -> np.ndarray:
    k_sq = _axis_momenta(L, M_imp) ** 2
    total = np.zeros((M_imp,) * (n * d))
    for axis in range(n * d):
        shape = [1] * (n * d)
        shape[axis] = M_imp
        total = total + k_sq.reshape(shape)
    return total


@dataclass(frozen=True)
class ImpurityState:
    """Momentum-space wavefunction of n impurities in d dimensions.

    Amplitudes are indexed by one FFT-ordered axis per impurity
    coordinate (impurity i, axis a at position i*d + a); the l2 norm of
    the amplitude array is the state norm.
    """

    n: int
    d: int
    L: float
    M_imp: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.M_imp,) * (self.n * self.d)
        if self.amplitudes.shape != expected:
            raise ValueError(
                f"amplitude shape {self.amplitudes.shape} does not match "
                f"{self.n} impurities in {self.d} dimensions")
        if abs(self.norm() - 1.0) > 1e-9:
            raise ValueError("impurity state must be normalized to one")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def position_density(self) -> np.ndarray:
        pos = np.fft.ifftn(self.amplitudes, norm="ortho")
        return np.abs(pos) ** 2


def kinetic_functional(state: ImpurityState) -> float:
    """Total kinetic expectation, summed over impurities and axes."""
    kin = _kinetic_grid(state.n, state.d, state.L, state.M_imp)
    return float((kin * np.abs(state.amplitudes) ** 2).sum())


def gaussian_product_state(n: int, d: int, L: float, M_imp: int,
                           centers, width: float = 0.5,
                           momenta=None) -> ImpurityState:
    """Product of periodically wrapped Gaussians, one per impurity.

    `centers` has shape (n, d); optional `momenta` boosts impurity i by a
    plane-wave factor with the given (n, d) wavevectors, rounded to the
    nearest box mode so the state stays periodic.
    """
    centers = np.asarray(centers, dtype=float).reshape(n, d)
    if momenta is None:
        momenta = np.zeros((n, d))
    momenta = np.asarray(momenta, dtype=float).reshape(n, d)
    boost = np.round(momenta * L / (2.0 * np.pi)) * 2.0 * np.pi / L
    y = np.arange(M_imp) * (L / M_imp)
    pos = np.ones((M_imp,) * (n * d), dtype=complex)
    for i in range(n):
        for a in range(d):
            delta = y - centers[i, a]
            delta -= L * np.round(delta / L)
            profile = (np.exp(-delta**2 / (4.0 * width**2))
                       * np.exp(1j * boost[i, a] * y))
            shape = [1] * (n * d)
            shape[i * d + a] = M_imp
            pos = pos * profile.reshape(shape)
    amp = np.fft.fftn(pos, norm="ortho")
    amp /= np.linalg.norm(amp)
    return ImpurityState(n=n, d=d, L=L, M_imp=M_imp, amplitudes=amp)


def momentum_packet_state(n: int, d: int, L: float, M_imp: int,
                          width: float, centers=None) -> ImpurityState:
    """Product state with a Gaussian amplitude profile over the momentum
    band, one packet per impurity.

    `width` and the optional per-impurity `centers` (shape (n, d)) are in
    integer mode units.  A narrow packet concentrates near its center
    modes while still mixing the neighbors, so no single propagation
    phase dominates an observable.
    """
    if width <= 0.0:
        raise ValueError("packet width must be positive")
    if centers is None:
        centers = np.zeros((n, d))
    centers = np.asarray(centers, dtype=float).reshape(n, d)
    z = np.fft.fftfreq(M_imp, d=1.0 / M_imp)
    amp = np.ones((M_imp,) * (n * d), dtype=complex)
    for i in range(n):
        for a in range(d):
            profile = np.exp(-(z - centers[i, a]) ** 2 / (4.0 * width**2))
            shape = [1] * (n * d)
            shape[i * d + a] = M_imp
            amp = amp * profile.reshape(shape)
    amp /= np.linalg.norm(amp)
    return ImpurityState(n=n, d=d, L=L, M_imp=M_imp, amplitudes=amp)


def random_band_state(n: int, d: int, L: float, M_imp: int, band: int,
                      seed: int) -> ImpurityState:
    """Seeded complex-Gaussian amplitudes on modes with |z| <= band."""
    rng = np.random.default_rng(seed)
    amp = (rng.standard_normal((M_imp,) * (n * d))
           + 1j * rng.standard_normal((M_imp,) * (n * d)))
    z = np.fft.fftfreq(M_imp, d=1.0 / M_imp)
    for axis in range(n * d):
        shape = [1] * (n * d)
        shape[axis] = M_imp
        amp = amp * (np.abs(z) <= band).reshape(shape)
    amp /= np.linalg.norm(amp)
    return ImpurityState(n=n, d=d, L=L, M_imp=M_imp, amplitudes=amp)


def pair_distance_sum(n: int, d: int, L: float, M_imp: int, f) -> np.ndarray:
    """Sum of f(minimal-image distance between impurities i and j) over
    all pairs i < j, on the full position grid."""
    y = np.arange(M_imp) * (L / M_imp)
    delta = y[:, None] - y[None, :]
    delta -= L * np.round(delta / L)
    delta_sq = delta**2
    total = np.zeros((M_imp,) * (n * d))
    for i in range(n):
        for j in range(i + 1, n):
            dist_sq = np.zeros((M_imp,) * (n * d))
            for a in range(d):
                shape = [1] * (n * d)
                shape[i * d + a] = M_imp
                shape[j * d + a] = M_imp
                dist_sq = dist_sq + delta_sq.reshape(shape)
            total = total + f(np.sqrt(dist_sq))
    return total


@dataclass(frozen=True)
class EffectiveHamiltonian:
    """Kinetic multipliers plus a position-diagonal pair grid and a
    constant offset; `variant` is "h_n" (full) or "h_tilde" (reference)."""

    n: int
    d: int
    L: float
    M_imp: int
    lam: float
    variant: str
    kinetic: np.ndarray = field(repr=False)
    pair_terms: np.ndarray = field(repr=False)
    constant: float


def build_effective_hamiltonian(n: int, d: int, L: float, M_imp: int,
                                lam: float, table: PotentialTable,
                                w_spec: ImpurityPotentialSpec,
                                variant: str = "h_n") -> EffectiveHamiltonian:
    if n < 1:
        raise ValueError("need at least one impurity")
    if M_imp < 2 or (M_imp & (M_imp - 1)) != 0:
        raise ValueError("M_imp must be a power of two")
    if table.d != d:
        raise ValueError("potential table dimension mismatch")
    reach = 0.5 * L * np.sqrt(d)
    if table.r_grid[-1] < reach - 1e-12:
        raise ValueError(
            f"potential table incomplete: needs separations up to "
            f"{reach:.6g}, covers {table.r_grid[-1]:.6g}")
    if variant == "h_n":
        pair = pair_distance_sum(
            n, d, L, M_imp,
            lambda r: w_spec.value(r) - lam**2 * table.w_value(r))
        constant = -n * lam**2 * table.w_value(0.0)
    elif variant == "h_tilde":
        pair = pair_distance_sum(n, d, L, M_imp, w_spec.value)
        constant = -n * float(table.interpolate(0.0))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    kinetic = _kinetic_grid(n, d, L, M_imp)
    return EffectiveHamiltonian(n=n, d=d, L=L, M_imp=M_imp, lam=lam,
                                variant=variant, kinetic=kinetic,
                                pair_terms=pair, constant=float(constant))


def evolve_effective(state: ImpurityState, H: EffectiveHamiltonian, t: float,
                     dt: float | None = None) -> ImpurityState:
    """Strang-split propagation of the state by e^{-iHt}."""
    if (state.n, state.d, state.L, state.M_imp) != (H.n, H.d, H.L, H.M_imp):
        raise ValueError("state and Hamiltonian grids do not match")
    if t == 0.0:
        return state
    kin_max = float(np.abs(H.kinetic).max())
    if dt is None:
        dt = abs(t) / DEFAULT_STEPS
        while dt * kin_max >= 0.5:
            dt *= 0.5
    if dt <= 0.0:
        raise ValueError("step size must be positive")
    if dt * kin_max >= 0.5:
        raise ValueError("step size does not resolve the kinetic phase")
    steps = max(1, int(round(abs(t) / dt)))
    h = t / steps
    half_kin = np.exp(-0.5j * h * H.kinetic)
    pot = np.exp(-1j * h * (H.pair_terms + H.constant))
    psi = state.amplitudes
    for _ in range(steps):
        psi = half_kin * psi
        psi = np.fft.fftn(pot * np.fft.ifftn(psi, norm="ortho"), norm="ortho")
        psi = half_kin * psi
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > _NORM_TOL:
        raise ValueError("unstable step size: norm drifted by "
                         f"{abs(norm - 1.0):.3e}")
    return replace(state, amplitudes=psi / norm)


def potential_expectation(state: ImpurityState, grid: np.ndarray) -> float:
    """Expectation of a position-diagonal observable given as a grid."""
    return float((state.position_density() * grid).sum())


def energy_expectation(state: ImpurityState, H: EffectiveHamiltonian) -> float:
    kinetic = float((H.kinetic * np.abs(state.amplitudes) ** 2).sum())
    return (kinetic + potential_expectation(state, H.pair_terms)
            + H.constant)


def mediated_pair_expectation(state: ImpurityState,
                              table: PotentialTable) -> float:
    """Sum over pairs of the scaled mediated potential's expectation,
    the coefficient driving the short-time splitting of the two
    propagator variants."""
    grid = pair_distance_sum(state.n, state.d, state.L, state.M_imp,
                             table.interpolate)
    return potential_expectation(state, grid)

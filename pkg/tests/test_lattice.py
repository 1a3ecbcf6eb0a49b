import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polaronlab.lattice import (
    build_lattice,
    excitation_pairs,
    fermi_ball,
    free_ground_energy,
    pair_arrays,
)

V_D = {1: 1 / np.pi, 2: 1 / (4 * np.pi), 3: 1 / (6 * np.pi**2)}


def brute_count(d, L, radius):
    """Independent integer-ball count by direct enumeration."""
    h = 2 * np.pi / L
    zmax = int(np.floor(radius / h)) + 2
    count = 0
    for z in itertools.product(range(-zmax, zmax + 1), repeat=d):
        if sum(c * c for c in z) * h * h <= radius**2 * (1 + 1e-12):
            count += 1
    return count


def test_mode_counts_match_spec_examples():
    assert build_lattice(1, 2 * np.pi, 1.0).mode_count == 3
    assert build_lattice(2, 2 * np.pi, 1.0).mode_count == 5
    assert build_lattice(3, 2 * np.pi, 2.0).mode_count == 33


def test_d1_modes_are_expected_integers():
    lat = build_lattice(1, 2 * np.pi, 1.0)
    assert lat.modes[:, 0].tolist() == [-1.0, 0.0, 1.0]


def test_lexicographic_ordering():
    lat = build_lattice(2, 2 * np.pi, 2.0)
    coords = [tuple(z) for z in lat.coords]
    assert coords == sorted(coords)


def test_negation_closure():
    lat = build_lattice(3, 4 * np.pi, 1.5)
    coords = {tuple(z) for z in lat.coords}
    assert all(tuple(-c for c in z) in coords for z in coords)


def test_boundary_modes_included():
    # k_F exactly on lattice sites: the full shell belongs to the closed ball
    lat = build_lattice(2, 2 * np.pi, 4.0)
    ball = fermi_ball(lat, 2.0)
    z2 = (ball.member_coords**2).sum(axis=1)
    assert (z2 == 4).sum() == 4  # (+-2,0),(0,+-2)
    assert ball.N == brute_count(2, 2 * np.pi, 2.0)


def test_fermi_ball_counts():
    assert fermi_ball(build_lattice(1, 2 * np.pi, 2.0), 1.0).N == 3
    assert fermi_ball(build_lattice(2, 2 * np.pi, 2.0), 1.0).N == 5


def test_density_approaches_limit():
    # d=2, L=40pi, k_F=1: N/L^2 within 5% of 1/(4pi)
    lat = build_lattice(2, 40 * np.pi, 1.0)
    ball = fermi_ball(lat, 1.0)
    target = V_D[2]
    assert abs(ball.density() - target) / target < 0.05


@pytest.mark.parametrize("d", [1, 2])
def test_density_error_shrinks_with_L(d):
    errs = []
    for L in (8 * np.pi, 16 * np.pi, 32 * np.pi):
        ball = fermi_ball(build_lattice(d, L, 2.0), 2.0)
        errs.append(abs(ball.density() - V_D[d] * 2.0**d))
    assert errs[2] < errs[0]


def test_free_ground_energy_examples():
    for d, expected in ((1, 2.0), (2, 4.0), (3, 6.0)):
        ball = fermi_ball(build_lattice(d, 2 * np.pi, 1.0), 1.0)
        assert free_ground_energy(ball) == pytest.approx(expected, abs=1e-12)


def test_excitation_pair_counts():
    lat = build_lattice(1, 2 * np.pi, 2.0)
    ball = fermi_ball(lat, 1.0)
    pairs = list(excitation_pairs(lat, ball))
    assert len(pairs) == 6
    lat2 = build_lattice(2, 2 * np.pi, 2.0)
    ball2 = fermi_ball(lat2, 1.0)
    assert len(list(excitation_pairs(lat2, ball2))) == (13 - 5) * 5


def test_excitation_pairs_empty_when_cutoff_equals_kF():
    lat = build_lattice(1, 2 * np.pi, 1.0)
    ball = fermi_ball(lat, 1.0)
    assert list(excitation_pairs(lat, ball)) == []


def test_pair_arrays_match_iterator():
    lat = build_lattice(2, 2 * np.pi, 2.0)
    ball = fermi_ball(lat, 1.0)
    outside, inside = pair_arrays(lat, ball)
    assert outside.shape[0] * inside.shape[0] == len(list(excitation_pairs(lat, ball)))
    norms = np.linalg.norm(outside, axis=1)
    assert (norms > 1.0).all()


def test_pair_negation_closure():
    lat = build_lattice(2, 2 * np.pi, 2.0)
    ball = fermi_ball(lat, 1.0)
    pairs = {(tuple(l), tuple(k)) for l, k in excitation_pairs(lat, ball)}
    assert all(
        (tuple(-x for x in l), tuple(-x for x in k)) in pairs for l, k in pairs
    )


def test_input_validation():
    with pytest.raises(ValueError):
        build_lattice(4, 2 * np.pi, 1.0)
    with pytest.raises(ValueError):
        build_lattice(1, -1.0, 1.0)
    with pytest.raises(ValueError):
        build_lattice(1, 2 * np.pi, 0.0)
    with pytest.raises(ValueError, match="cutoff too small"):
        fermi_ball(build_lattice(1, 2 * np.pi, 1.0), 2.0)


@settings(max_examples=40, deadline=None)
@given(
    d=st.integers(1, 2),
    Lfac=st.integers(1, 6),
    num=st.integers(1, 8),
)
def test_counts_match_brute_force(d, Lfac, num):
    L = Lfac * np.pi
    cutoff = num / 2.0
    lat = build_lattice(d, L, cutoff)
    assert lat.mode_count == brute_count(d, L, cutoff)
    k_F = cutoff / 2
    ball = fermi_ball(lat, k_F)
    assert ball.N == brute_count(d, L, k_F)
    outside, inside = pair_arrays(lat, ball)
    assert outside.shape[0] + inside.shape[0] == lat.mode_count

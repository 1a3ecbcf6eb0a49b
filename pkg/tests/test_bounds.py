"""Bound-functional tests: brute-force sum oracles, envelope formulas,
closed-form integral oracles, and dual-route quadrature checks."""

import itertools
import math

import numpy as np
import pytest

from polaronlab import bounds
from polaronlab.lattice import build_lattice, fermi_ball
from polaronlab.potentials import step_spec, yukawa_spec, zero_spec

LEMMA2_GOLDEN = np.array([
    0.017906503302880284, 0.003993519332357379,
    0.0009365393495889684, 0.0006987355732001089,
])
A1_GOLDEN = np.array([
    2.417034939669062e-05, 5.2131941137068905e-05, 0.000147645627486103,
    1.3474340354750181e-08, 1.3474340354750181e-08,
])
REPORT_SUMS_GOLDEN = np.array([
    0.02405293324583151, 0.0027318099526876215, 0.0003966800396494538,
    0.00020202696514852732, 1.2655624623254597e-05, 1.4562958997497496e-05,
    5.706199432348509e-05, 1.6284186133060962e-09, 2.4996750124385012e-09,
])


def _vhat(q):
    return 1.0 / (1.0 + q * q)


def test_lemma2_sums_against_enumeration():
    """d=1, L=2pi, k_F=1, cutoff=3: twelve pairs, summed explicitly."""
    L = 2.0 * np.pi
    acc = np.zeros(4)
    for l, k in itertools.product([-3, -2, 2, 3], [-1, 0, 1]):
        q, gap = l - k, l * l - k * k
        amp_sq = _vhat(abs(q)) ** 2
        acc += [amp_sq, amp_sq / (gap + 1), amp_sq / (gap + 1) ** 2,
                amp_sq * q * q / (gap + q * q + 1) ** 2]
    acc /= L**2
    lattice = build_lattice(1, L, 3.0)
    ball = fermi_ball(lattice, 1.0)
    values = bounds.lemma2_sums(lattice, ball, yukawa_spec(), tail_rel=10.0)
    assert values == pytest.approx(acc, rel=1e-13)
    assert values == pytest.approx(LEMMA2_GOLDEN, rel=1e-12)


def test_lemmaA1_sums_against_enumeration():
    """d=1, L=2pi, k_F=1, cutoff=2: outside {-2,2}, nested loops spelled
    out; the two quadruple sums coincide here by reflection symmetry."""
    L = 2.0 * np.pi
    outs, ins = [-2, 2], [-1, 0, 1]

    def E(l, k):
        return 1.0 / (l * l - k * k + 1.0)

    g5 = sum((sum(_vhat(abs(l - k)) * E(l, k) * _vhat(abs(n - l))
                  for l in outs) / L) ** 2
             for n in outs for k in ins) / L**2
    g6 = sum((sum(_vhat(abs(l - k)) * E(l, k) * _vhat(abs(m - k))
                  for k in ins) / L) ** 2
             for l in outs for m in ins) / L**2
    g7 = sum(_vhat(abs(l - k)) * E(l, k) * _vhat(abs(n - k)) * E(n, k)
             * _vhat(abs(l - n))
             for l in outs for k in ins for n in outs) / L**3
    g8 = sum((sum(_vhat(abs(l - k)) * E(l, k) * _vhat(abs(n - m)) * E(n, m)
                  * _vhat(abs(l - n))
                  for l in outs for n in outs) / L**2) ** 2
             for k in ins for m in ins) / L**2
    g9 = sum((sum(_vhat(abs(l - m)) * E(l, m) * _vhat(abs(n - m)) * E(n, m)
                  * _vhat(abs(r - n))
                  for n in outs for m in ins) / L**2) ** 2
             for r in outs for l in outs) / L**2
    lattice = build_lattice(1, L, 2.0)
    ball = fermi_ball(lattice, 1.0)
    values = bounds.lemmaA1_sums(lattice, ball, yukawa_spec(), tail_rel=1e9)
    assert values == pytest.approx([g5, g6, g7, g8, g9], rel=1e-13)
    assert values == pytest.approx(A1_GOLDEN, rel=1e-12)


def test_lemma2_denominator_ordering():
    lattice = build_lattice(1, 4.0 * np.pi, 12.0)
    ball = fermi_ball(lattice, 2.0)
    a, b, c, _ = bounds.lemma2_sums(lattice, ball, yukawa_spec(),
                                    tail_rel=1.0)
    assert a > b > c > 0.0


def test_zero_spec_sums_vanish():
    lattice = build_lattice(1, 4.0 * np.pi, 8.0)
    ball = fermi_ball(lattice, 2.0)
    assert bounds.lemma2_sums(lattice, ball, zero_spec()).max() == 0.0
    assert np.nanmax(bounds.lemmaA1_sums(lattice, ball, zero_spec())) == 0.0


def test_lemma2_cutoff_gate():
    lattice = build_lattice(1, 8.0 * np.pi, 8.0)
    ball = fermi_ball(lattice, 2.0)
    with pytest.raises(ValueError, match="cutoff too small"):
        bounds.lemma2_sums(lattice, ball, yukawa_spec())


def test_lemma2_compact_support_tail_is_exact():
    """Step amplitudes vanish beyond separation 1, so a cutoff one unit
    above the ball already carries zero tail and the gate stays quiet."""
    lattice = build_lattice(1, 8.0 * np.pi, 3.0)
    ball = fermi_ball(lattice, 2.0)
    values = bounds.lemma2_sums(lattice, ball, step_spec(), tail_rel=1e-12)
    assert values[0] > 0.0


def test_lemmaA1_cutoff_gate():
    lattice = build_lattice(1, 8.0 * np.pi, 3.5)
    ball = fermi_ball(lattice, 2.0)
    with pytest.raises(ValueError, match="cutoff too small"):
        bounds.lemmaA1_sums(lattice, ball, yukawa_spec())


def test_gamma_formula_values():
    assert bounds.gamma(2, 2.0) == pytest.approx(math.log(2.0) ** 3 / 2.0,
                                                 rel=1e-14)
    assert bounds.gamma(3, 2.0) == pytest.approx(2.0 * math.log(2.0) ** 3,
                                                 rel=1e-14)
    assert bounds.gamma(1, 2.0) == pytest.approx(math.log(2.0) ** 3 / 4.0,
                                                 rel=1e-14)
    with pytest.raises(ValueError, match="at least 2"):
        bounds.gamma(2, 1.5)
    with pytest.raises(ValueError, match="dimension"):
        bounds.gamma(4, 4.0)


def test_big_gamma_t_zero_reduction():
    for d in (1, 2, 3):
        for k_F, lam in [(2.0, 0.5), (8.0, 2.0)]:
            got = bounds.big_gamma(d, k_F, lam, 0.0)
            expect = (abs(lam) * k_F ** ((d - 3) / 2.0)
                      * math.sqrt(math.log(k_F))
                      + lam**2 * k_F ** (d - 3.0) * math.log(k_F))
            assert got["value"] == pytest.approx(expect, rel=1e-13)
            assert got["order3"] == 0.0


def test_big_gamma_zero_coupling_and_breakdown():
    assert bounds.big_gamma(2, 4.0, 0.0, 3.0)["value"] == 0.0
    got = bounds.big_gamma(3, 8.0, 1.5, 2.0)
    assert got["value"] == pytest.approx(
        got["order1"] + got["order2"] + got["order3"], rel=1e-14)


def test_big_gamma_independent_evaluator():
    """Scalar-arithmetic recoding of the three-line envelope."""
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        k_F = float(rng.uniform(2.0, 30.0))
        lam = float(rng.uniform(-2.0, 2.0))
        t = float(rng.uniform(-3.0, 3.0))
        ln = math.log(k_F)
        g = (k_F**-2.0 if d == 1 else k_F ** (2.0 * d - 5.0)) * ln**3
        grow = 1.0 + lam * lam * k_F ** (d - 2.0)
        ref = (abs(lam) * (1.0 + abs(t) * grow) * k_F ** ((d - 3.0) / 2.0)
               * math.sqrt(ln)
               + lam * lam * (k_F ** (d - 3.0) * ln
                              + abs(t) * grow * k_F ** (d - 3.0) * ln
                              + abs(t) * math.sqrt(g))
               + abs(lam) ** 3 * abs(t) * (k_F ** ((3.0 * d - 7.0) / 2.0) * ln
                                           + math.sqrt(g)
                                           * k_F ** ((d - 3.0) / 2.0)
                                           * math.sqrt(ln) + g))
        assert bounds.big_gamma(d, k_F, lam, t)["value"] == pytest.approx(
            ref, rel=1e-12)


def test_bound_report_shape_and_regression():
    rep = bounds.bound_report(1, 4.0, 4.0 * np.pi, yukawa_spec(), cutoff=16.0)
    assert rep.sums == pytest.approx(REPORT_SUMS_GOLDEN, rel=1e-10)
    records = rep.records()
    assert [r["sum_id"] for r in records] == list(bounds.SUM_IDS)
    assert all(np.isfinite(r["ratio"]) and r["ratio"] >= 0.0
               for r in records)
    assert records[0]["spec"] == "yukawa(R=1)"
    predicted = bounds.envelopes(1, 4.0)
    assert predicted[0] == pytest.approx(1.0)
    assert predicted[4] == pytest.approx(bounds.gamma(1, 4.0))


def test_bound_report_skip_quadruple():
    rep = bounds.bound_report(1, 4.0, 4.0 * np.pi, yukawa_spec(),
                              cutoff=16.0, include_quadruple=False)
    assert np.isnan(rep.sums[7]) and np.isnan(rep.sums[8])
    assert rep.sums[:7] == pytest.approx(REPORT_SUMS_GOLDEN[:7], rel=1e-10)


def test_elementary_integrals_match_closed_forms():
    """Antiderivatives of the corner integrals are elementary; both the
    quadrature values and the claimed upper bounds are checked."""
    for a, eps in [(2.0, 0.1), (10.0, 0.01), (100.0, 0.001)]:
        rep = bounds.elementary_integral_checks(a, eps)
        first = ((2 * a + eps) * math.log(2 * a + eps)
                 - 2 * (a + eps) * math.log(a + eps) + eps * math.log(eps))
        second = math.log((a + eps) ** 2 / (eps * (2 * a + eps)))
        assert rep["integral1"] == pytest.approx(first, rel=1e-9)
        assert rep["integral2"] == pytest.approx(second, rel=1e-9)
        assert rep["ok1"] and rep["margin1"] > 0.0
        assert rep["ok2"] and rep["margin2"] > 0.0


def test_elementary_integrals_domain():
    with pytest.raises(ValueError, match="a > 1 > 2"):
        bounds.elementary_integral_checks(0.5, 0.1)
    with pytest.raises(ValueError, match="a > 1 > 2"):
        bounds.elementary_integral_checks(2.0, 0.6)


def test_pair_integral_volume_normalization():
    """Constant kernel integrates to ball volume times shell volume,
    pinning the angular prefactors of the reduced rule."""
    r_max = 3.0
    targets = {
        1: (2.0 * 2.0) * (2.0 * (r_max - 2.0)),
        2: (np.pi * 4.0) * (np.pi * (r_max**2 - 4.0)),
        3: (4.0 * np.pi / 3.0 * 8.0) * (4.0 * np.pi / 3.0 * (r_max**3 - 8.0)),
    }
    for d, target in targets.items():
        got = bounds.pair_integral(lambda s, r, u: np.ones_like(u), d, 2.0,
                                   r_max)
        assert got == pytest.approx(target, rel=1e-8)


def test_j1_dual_route_agreement():
    """The exclusion-volume radial form and the generic reduced tensor
    rule evaluate the same geometric integral."""
    kernel = lambda s, r, u: 1.0 / (1.0 + u * u) ** 2
    for d, rel in [(1, 1e-4), (2, 5e-3), (3, 5e-2)]:
        radial = bounds.appendix_J_integrals(d, 2.0, yukawa_spec())["J1"]
        tensor = bounds.pair_integral(kernel, d, 2.0, 62.0)
        assert tensor == pytest.approx(radial, rel=rel)


def test_j1_ratio_stability():
    for d in (1, 2, 3):
        ratios = [bounds.appendix_J_integrals(d, k_F, yukawa_spec())
                  ["J1_ratio"] for k_F in (2.0, 4.0, 8.0, 16.0)]
        assert max(ratios) / min(ratios) < 3.0


def test_j2_zero_spec():
    rep = bounds.appendix_J_integrals(2, 4.0, zero_spec())
    assert rep["J2"] == 0.0 and rep["J3"] == 0.0 and rep["J4_kernel"] == 0.0
    assert rep["J1"] > 0.0


def test_j2_one_sided_lattice_check():
    """l^2 - k^2 + 1 >= k_F (|l| - |k| + 1/k_F) pointwise, so the second
    pair sum must stay below the continuum integral scaled to lattice
    normalization."""
    rhs = (bounds.appendix_J_integrals(2, 4.0, yukawa_spec())["J2"]
           / 4.0 / (2.0 * np.pi) ** 4)
    for L in (4.0 * np.pi, 8.0 * np.pi):
        lattice = build_lattice(2, L, 16.0)
        ball = fermi_ball(lattice, 4.0)
        b = bounds.lemma2_sums(lattice, ball, yukawa_spec(), tail_rel=1.0)[1]
        assert 0.0 < b <= rhs


def test_j_integrals_domain():
    with pytest.raises(ValueError, match="k_F"):
        bounds.appendix_J_integrals(2, 1.0, yukawa_spec())
    with pytest.raises(ValueError, match="dimension"):
        bounds.appendix_J_integrals(4, 4.0, yukawa_spec())

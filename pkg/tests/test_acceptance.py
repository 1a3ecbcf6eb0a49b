"""Acceptance gate: nine pinned criteria, one summary line each.

Each test prints `criterion N: PASS/FAIL - detail` and then asserts the
criterion exactly as pinned.  Three criteria (1, 2, and 7) measure
genuine finite-box effects at their pinned box sizes and are expected
to fail; the printed numbers are the honest measurements, and the
module suites demonstrate the convergence that the pinned boxes miss.
"""

import math
import time

import numpy as np
import pytest

from polaronlab import bounds, effective, fock
from polaronlab.lattice import build_lattice, fermi_ball
from polaronlab.mediated import (W_lattice_profile, W_profile, lemma1_scan,
                                 potential_table)
from polaronlab.potentials import (bounded_impurity, step_spec, yukawa_spec,
                                   zero_impurity)

TWO_PI = 2.0 * math.pi


def _line(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")


# --- criterion 1: mediated-potential oracle equivalence ----------------------


def test_criterion_1_oracle_equivalence():
    """Quadrature vs lattice-sum W at L=8*pi, cutoff=4*k_F, to 1% where
    W is nonzero; d in {1,2}, both specs, k_F in {2,4,8},
    r in {0,0.5,1,2}; under 5 minutes."""
    start = time.perf_counter()
    r_values = np.array([0.0, 0.5, 1.0, 2.0])
    worst = (0.0, "")
    cells = failures = 0
    for d in (1, 2):
        for spec in (yukawa_spec(1.0), step_spec()):
            for k_F in (2.0, 4.0, 8.0):
                quad, _ = W_profile(r_values, k_F, d, spec, rel_tol=1e-8)
                latt, _ = W_lattice_profile(r_values, k_F, 8.0 * math.pi, d,
                                            spec, cutoff=4.0 * k_F)
                for r, wq, wl in zip(r_values, quad, latt):
                    if abs(wq) < 1e-14:
                        continue
                    cells += 1
                    rel = abs(wq - wl) / abs(wq)
                    if rel >= 0.01:
                        failures += 1
                    if rel > worst[0]:
                        worst = (rel, f"d={d} {spec.kind} k_F={k_F:g} r={r:g}")
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 300.0
    _line(1, ok, f"{failures}/{cells} cells over 1%, worst "
                 f"{100 * worst[0]:.2f}% at {worst[1]}, {elapsed:.0f}s")
    assert elapsed < 300.0
    assert failures == 0, (
        f"{failures} of {cells} cells exceed 1% (worst {100 * worst[0]:.2f}% "
        f"at {worst[1]}); finite-box Riemann floor at L=8*pi, see the "
        "module-level ladder tests for the converged agreement")


# --- criterion 2: two-sided uniform bounds and profile shape -----------------


def test_criterion_2_uniform_bounds_and_shape():
    """Scaled-profile sup within factor 3 over k_F in {1,2,4,8,16} and a
    common positive core (yukawa, d=2); peak-plus-decaying-oscillation
    shape for the d=2 step profile."""
    ladder = [1.0, 2.0, 4.0, 8.0, 16.0]
    scan = lemma1_scan(ladder, 2, yukawa_spec(1.0))
    sup_ratio = float(scan.sup_abs.max() / scan.sup_abs.min())
    core_ok = scan.core_ok and scan.c_probe > 0.0 \
        and float(scan.core_inf.min()) > 0.0

    shape = lemma1_scan([8.0], 2, step_spec())
    profile = shape.profiles[0]
    r_grid = shape.r_grid
    peak_ok = profile[0] > 0.0 and profile[0] == np.abs(profile).max()
    nonpos = np.flatnonzero(profile <= 0.0)
    oscillation_ok = False
    if nonpos.size:
        first_zero = nonpos[0]
        tail = np.abs(profile[first_zero:]).max()
        signs = np.sign(profile[np.abs(profile) > 1e-12 * profile[0]])
        changes = int((signs[1:] != signs[:-1]).sum())
        oscillation_ok = changes >= 2 and tail < 0.3 * profile[0]

    ok = sup_ratio < 3.0 and core_ok and peak_ok and oscillation_ok
    _line(2, ok, f"sup ratio {sup_ratio:.3f} (<3 required), "
                 f"c_probe {scan.c_probe:.2f}, core inf "
                 f"{scan.core_inf.min():.2e}, d=2 step shape "
                 f"{'ok' if peak_ok and oscillation_ok else 'bad'}")
    assert core_ok, "no common positive core window"
    assert peak_ok and oscillation_ok, "d=2 step profile shape wrong"
    assert sup_ratio < 3.0, (
        f"sup ratio {sup_ratio:.4f} exceeds 3; the growth is saturating "
        "(consecutive ratios 1.63, 1.37, 1.22, 1.14) and the k_F=1 anchor "
        "drags max/min just over the band")
    assert r_grid[0] == 0.0


# --- criterion 3: propagator correctness -------------------------------------


def _small_micro(n, M_imp, lam, w_spec, m_max=3, k_F=2.0):
    lattice = build_lattice(1, TWO_PI, k_F + 4.0)
    ball = fermi_ball(lattice, k_F)
    basis = fock.enumerate_basis(lattice, ball, n, M_imp, m_max,
                                 (0,) * lattice.d)
    H = fock.build_hamiltonian(basis, lam, yukawa_spec(1.0), w_spec=w_spec)
    return lattice, ball, basis, H


def test_criterion_3_propagator_correctness():
    """Zero-coupling factorization to 1e-7 at t=1, norm conservation to
    1e-9 on both propagators, apply Hermiticity to 1e-10 on 100 seeded
    pairs, and relative energy drift under 1e-8 over t=1."""
    w_spec = bounded_impurity(lambda r: 0.3 * np.cos(r), sample_max=0.3)
    checks = {}

    # zero coupling: the truncated evolution factorizes exactly
    xi0 = effective.momentum_packet_state(2, 1, TWO_PI, 8, width=1.0)
    lattice = build_lattice(1, TWO_PI, 6.0)
    ball = fermi_ball(lattice, 2.0)
    res = fock.theorem1_deficit(lattice, ball, xi0, 0.0, 1.0,
                                yukawa_spec(1.0), None, m_max=3,
                                w_spec=w_spec)
    checks["zero-coupling deficit"] = (res.value, 1e-7)

    # norm conservation, both propagators, at live coupling; the micro
    # state is a seeded generic block vector (nonzero shifted energy)
    _, _, basis, H = _small_micro(1, 8, 0.9, w_spec)
    rng0 = np.random.default_rng(417)
    v = rng0.standard_normal(basis.dimension) \
        + 1j * rng0.standard_normal(basis.dimension)
    v /= np.linalg.norm(v)
    psi0 = fock.FockState(basis=basis, amplitudes=v)
    psi1 = fock.evolve_full(H, psi0, 1.0)
    checks["micro norm error"] = (abs(psi1.norm() - 1.0), 1e-9)
    xi1 = effective.momentum_packet_state(1, 1, TWO_PI, 8, width=1.0)

    table = potential_table(2.0, 1, yukawa_spec(1.0),
                            r_grid=np.linspace(0.0, 4.2, 85))
    H_eff = effective.build_effective_hamiltonian(1, 1, TWO_PI, 8, 0.9,
                                                  table, w_spec)
    eff1 = effective.evolve_effective(xi1, H_eff, 1.0)
    checks["effective norm error"] = (abs(eff1.norm() - 1.0), 1e-9)

    # Hermiticity of the matrix-free apply on 100 seeded pairs
    rng = np.random.default_rng(93)
    herm = 0.0
    dim = basis.dimension
    for _ in range(100):
        x = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
        y = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
        hx = fock.apply_H(H, fock.FockState(basis=basis, amplitudes=x))
        hy = fock.apply_H(H, fock.FockState(basis=basis, amplitudes=y))
        lhs = np.vdot(y, hx.amplitudes)
        rhs = np.vdot(hy.amplitudes, x)
        herm = max(herm, abs(lhs - rhs) / (np.linalg.norm(x)
                                           * np.linalg.norm(y)))
    checks["hermiticity residual"] = (herm, 1e-10)

    # energy conservation over t=1
    e0 = float(np.vdot(psi0.amplitudes,
                       fock.apply_H(H, psi0).amplitudes).real)
    e1 = float(np.vdot(psi1.amplitudes,
                       fock.apply_H(H, psi1).amplitudes).real)
    checks["relative energy drift"] = (abs(e1 - e0) / abs(e0), 1e-8)

    ok = all(value < tol for value, tol in checks.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, (v, _) in checks.items())
    _line(3, ok, detail)
    for name, (value, tol) in checks.items():
        assert value < tol, f"{name} {value:.3e} >= {tol:g}"


# --- criterion 4: deficit trend over the k_F ladder --------------------------

#: desk-scale resolution per impurity count: the single-impurity ladder
#: runs the 16-mode band; the pair ladder needs the 8-mode band to fit
#: the runtime budget, with a narrower packet so that band-edge mass
#: (which the truncation diagnostic charges) stays small.
LADDER_KF = (2.0, 4.0, 8.0)
LADDER_SETUP = {1: {"M_imp": 16, "width": 1.0}, 2: {"M_imp": 8, "width": 0.7}}


def test_criterion_4_deficit_trend():
    """d=1, L=2*pi, n in {1,2}, m_max=3, lam=k_F^((2-d)/2), t=0.5:
    deficit strictly decreasing over k_F in {2,4,8}, dropped weight
    under 10% of the deficit, negative log-log slope, under 30 min."""
    start = time.perf_counter()
    spec = yukawa_spec(1.0)
    summary = []
    ok = True
    for n in (1, 2):
        setup = LADDER_SETUP[n]
        xi0 = effective.momentum_packet_state(n, 1, TWO_PI, setup["M_imp"],
                                              width=setup["width"])
        deficits = []
        worst_ratio = 0.0
        for k_F in LADDER_KF:
            lattice = build_lattice(1, TWO_PI, k_F + 4.0)
            ball = fermi_ball(lattice, k_F)
            table = potential_table(k_F, 1, spec,
                                    r_grid=np.linspace(0.0, 4.2, 85))
            res = fock.theorem1_deficit(lattice, ball, xi0,
                                        lam=math.sqrt(k_F), t=0.5,
                                        spec=spec, table=table, m_max=3)
            deficits.append(res.value)
            worst_ratio = max(worst_ratio, res.dropped_weight / res.value)
        slope = float(np.polyfit(np.log(LADDER_KF), np.log(deficits), 1)[0])
        monotone = all(a > b for a, b in zip(deficits, deficits[1:]))
        ok = ok and monotone and worst_ratio < 0.10 and slope < 0.0
        summary.append(
            f"n={n}: " + "/".join(f"{v:.4f}" for v in deficits)
            + f" slope {slope:.2f} dropped<= {100 * worst_ratio:.1f}%")
        assert monotone, f"n={n} ladder not strictly decreasing: {deficits}"
        assert worst_ratio < 0.10, \
            f"n={n} dropped weight {100 * worst_ratio:.1f}% of deficit"
        assert slope < 0.0
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 1800.0
    _line(4, ok, "; ".join(summary) + f"; {elapsed:.0f}s")
    assert elapsed < 1800.0


# --- criterion 5: short-time rate bound --------------------------------------


def test_criterion_5_short_time_rate_bound():
    """deficit(t) <= 1.2 * t * ||(coupling + shift mismatch) initial||
    at t in {0.01, 0.02}."""
    spec = yukawa_spec(1.0)
    lattice = build_lattice(1, TWO_PI, 6.0)
    ball = fermi_ball(lattice, 2.0)
    xi0 = effective.momentum_packet_state(1, 1, TWO_PI, 8, width=1.0)
    table = potential_table(2.0, 1, spec, r_grid=np.linspace(0.0, 4.2, 85))
    rate = fock.duhamel_rate(lattice, ball, xi0, 0.8, spec, table, m_max=3)
    margins = []
    for t in (0.01, 0.02):
        res = fock.theorem1_deficit(lattice, ball, xi0, 0.8, t, spec, table,
                                    m_max=3)
        margins.append((t, res.value, 1.2 * t * rate))
    ok = all(v <= bound for _, v, bound in margins)
    _line(5, ok, ", ".join(f"t={t:g}: {v:.2e} <= {b:.2e}"
                           for t, v, b in margins))
    for t, value, bound in margins:
        assert value <= bound, f"rate bound violated at t={t}"


# --- criterion 6: linear splitting coefficient -------------------------------


def test_criterion_6_pair_splitting_coefficient():
    """Gaussian pair inside the probed core: c0 > 0 and the fitted
    linear coefficient of the propagator-variant splitting matches c0
    within 15%."""
    table = potential_table(2.0, 1, yukawa_spec(1.0),
                            r_grid=np.linspace(0.0, 12.0, 241))
    lam = math.sqrt(2.0)
    state = effective.gaussian_product_state(
        2, 1, TWO_PI, 64, centers=[[math.pi - 0.2], [math.pi + 0.2]],
        width=0.4)
    c0 = effective.mediated_pair_expectation(state, table)
    H = effective.build_effective_hamiltonian(2, 1, TWO_PI, 64, lam, table,
                                              zero_impurity())
    H_tilde = effective.build_effective_hamiltonian(2, 1, TWO_PI, 64, lam,
                                                    table, zero_impurity(),
                                                    variant="h_tilde")
    times = np.array([0.01, 0.02, 0.04])
    deficits = []
    for t in times:
        a = effective.evolve_effective(state, H, t, dt=t / 256)
        b = effective.evolve_effective(state, H_tilde, t, dt=t / 256)
        deficits.append(float(np.linalg.norm(a.amplitudes - b.amplitudes)))
    design = np.vstack([times, times**2]).T
    coef, *_ = np.linalg.lstsq(design, np.array(deficits), rcond=None)
    ratio = float(coef[0] / c0)
    ok = c0 > 0.0 and abs(ratio - 1.0) < 0.15
    _line(6, ok, f"c0 {c0:.4e}, fitted linear {coef[0]:.4e}, "
                 f"ratio {ratio:.3f}")
    assert c0 > 0.0
    assert ratio == pytest.approx(1.0, abs=0.15)


# --- criterion 7: error-sum ratio stability ----------------------------------


def test_criterion_7_sum_ratio_stability():
    """Nine sums at d=1, L=8*pi: value/envelope ratio within a factor-5
    band over k_F in {2,4,8,16} (k_F <= 8 for the two quadruple sums)
    and under 2% change at the final L doubling."""
    spec = yukawa_spec(1.0)
    ladder = (2.0, 4.0, 8.0, 16.0)
    reports = {}
    for L_mult in (8.0, 16.0):
        for k_F in ladder:
            reports[(L_mult, k_F)] = bounds.bound_report(
                1, k_F, L_mult * math.pi, spec,
                cutoff=max(4.0 * k_F, k_F + 12.0),
                include_quadruple=k_F <= 8.0)

    band_bad, double_bad = [], []
    for i, sid in enumerate(bounds.SUM_IDS):
        k_range = [k for k in ladder
                   if not (sid in ("A8", "A9") and k > 8.0)]
        ratios = [reports[(8.0, k)].ratios[i] for k in k_range]
        spread = max(ratios) / min(ratios)
        if spread >= 5.0:
            band_bad.append(f"{sid} {spread:.0f}x")
        rel = max(abs(reports[(16.0, k)].sums[i] - reports[(8.0, k)].sums[i])
                  / abs(reports[(16.0, k)].sums[i]) for k in k_range)
        if rel >= 0.02:
            double_bad.append(f"{sid} {100 * rel:.0f}%")
    ok = not band_bad and not double_bad
    _line(7, ok, f"band>5: [{', '.join(band_bad) or 'none'}]; "
                 f"doubling>2%: [{', '.join(double_bad) or 'none'}]")
    assert not band_bad, (
        f"ratio bands exceed factor 5: {band_bad}; the d=1 sums decay "
        "faster than their envelopes (all ratios < 1 and falling), so the "
        "two-sided stability band fails while the upper bounds hold")
    assert not double_bad, (
        f"final L doubling moves sums over 2%: {double_bad}; O(1/L) "
        "Fermi-surface staircase at d=1")


# --- criterion 8: elementary integral inequalities ---------------------------


def test_criterion_8_elementary_inequalities():
    """Both closed-form corner-integral bounds hold with positive margin
    at (a, eps) in {(2, 0.1), (10, 0.01), (100, 0.001)}."""
    margins = []
    for a, eps in ((2.0, 0.1), (10.0, 0.01), (100.0, 0.001)):
        out = bounds.elementary_integral_checks(a, eps)
        margins.append((a, eps, out["margin1"], out["margin2"],
                        out["ok1"] and out["ok2"]))
    ok = all(m1 > 0.0 and m2 > 0.0 and flags
             for _, _, m1, m2, flags in margins)
    _line(8, ok, ", ".join(f"(a={a:g},eps={e:g}): {m1:.2f}/{m2:.2f}"
                           for a, e, m1, m2, _ in margins))
    for a, eps, m1, m2, flags in margins:
        assert m1 > 0.0 and m2 > 0.0 and flags, f"margin at a={a}, eps={eps}"


# --- criterion 9: formula evaluators -----------------------------------------


def test_criterion_9_dual_formula_evaluators():
    """gamma and big_gamma against an independently coded scalar route,
    50 seeded samples, relative agreement 1e-12."""
    rng = np.random.default_rng(20260823)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 4))
        k_F = float(rng.uniform(2.0, 50.0))
        lam = float(rng.uniform(-3.0, 3.0))
        t = float(rng.uniform(-2.0, 2.0))
        ln = math.log(k_F)
        g_ref = (k_F**-2.0 if d == 1 else k_F ** (2.0 * d - 5.0)) * ln**3
        worst = max(worst, abs(bounds.gamma(d, k_F) - g_ref) / g_ref)

        grow = 1.0 + lam * lam * k_F ** (d - 2.0)
        ref = (abs(lam) * (1.0 + abs(t) * grow)
               * k_F ** ((d - 3.0) / 2.0) * math.sqrt(ln)
               + lam * lam * (k_F ** (d - 3.0) * ln
                              + abs(t) * grow * k_F ** (d - 3.0) * ln
                              + abs(t) * math.sqrt(g_ref))
               + abs(lam) ** 3 * abs(t)
               * (k_F ** ((3.0 * d - 7.0) / 2.0) * ln
                  + math.sqrt(g_ref) * k_F ** ((d - 3.0) / 2.0)
                  * math.sqrt(ln) + g_ref))
        got = bounds.big_gamma(d, k_F, lam, t)["value"]
        if ref > 0.0:
            worst = max(worst, abs(got - ref) / ref)
        else:
            worst = max(worst, abs(got))
    ok = worst < 1e-12
    _line(9, ok, f"worst relative disagreement {worst:.2e}")
    assert worst < 1e-12

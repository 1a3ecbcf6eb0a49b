"""Transition-amplitude sums and the scaling envelopes that control them.

The error analysis of the impurity dynamics rests on a family of
normalized lattice sums over excitation pairs (l outside, k inside the
Fermi ball): four single-pair sums with increasingly strong energy
denominators, and five nested sums mixing two or three interaction
factors. Each carries a claimed growth envelope in k_F; this module
evaluates the sums on finite boxes and the envelopes exactly, so ratio
stability over a k_F ladder renders the existence-of-constant claims
falsifiable at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import dblquad

from .lattice import FermiBall, MomentumLattice, build_lattice, fermi_ball, \
    pair_arrays
from .potentials import PotentialSpec
from .quadrature import NODES, WEIGHTS_K, integrate_panels

_ANGULAR_SUP = {1: 2.0, 2: 2.0 * np.pi, 3: 4.0 * np.pi}
_MATRIX_CHUNK = 4_000_000
SUM_IDS = ("a", "b", "c", "d", "A5", "A6", "A7", "A8", "A9")


# --- scaling envelopes -------------------------------------------------------


def gamma(d: int, k_F: float) -> float:
    """Piecewise envelope k_F^(2d-5) (ln k_F)^3 for d in {2,3} and
    k_F^(-2) (ln k_F)^3 for d=1; defined for k_F >= 2."""
    if d not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2, or 3")
    if k_F < 2:
        raise ValueError("k_F must be at least 2 (log factors change sign)")
    power = -2.0 if d == 1 else 2.0 * d - 5.0
    return float(k_F**power * np.log(k_F) ** 3)


def big_gamma(d: int, k_F: float, lam: float, t: float) -> dict:
    """Full deficit envelope, returned with its per-order breakdown.

    Three coupling orders: |lam| times a growing-in-t prefactor, lam^2
    times three error sums, |lam|^3 |t| times three more.
    """
    if d not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2, or 3")
    if k_F < 2:
        raise ValueError("k_F must be at least 2 (log factors change sign)")
    lam, t = float(lam), float(t)
    log = np.log(k_F)
    g = gamma(d, k_F)
    drive = 1.0 + lam * lam * k_F ** (d - 2.0)
    order1 = (abs(lam) * (1.0 + abs(t) * drive)
              * k_F ** ((d - 3.0) / 2.0) * log**0.5)
    order2 = lam * lam * (k_F ** (d - 3.0) * log
                          + abs(t) * drive * k_F ** (d - 3.0) * log
                          + abs(t) * np.sqrt(g))
    order3 = abs(lam) ** 3 * abs(t) * (k_F ** ((3.0 * d - 7.0) / 2.0) * log
                                       + np.sqrt(g) * k_F ** ((d - 3.0) / 2.0)
                                       * log**0.5
                                       + g)
    return {"value": float(order1 + order2 + order3), "order1": float(order1),
            "order2": float(order2), "order3": float(order3)}


# --- pair-sum machinery ------------------------------------------------------


def _amplitude_matrices(lattice: MomentumLattice, ball: FermiBall,
                        spec: PotentialSpec):
    """|v| amplitudes and energy denominators over (outside x inside)."""
    outside, inside = pair_arrays(lattice, ball)
    diff = outside[:, None, :] - inside[None, :, :]
    V = np.abs(spec.hat(np.sqrt((diff**2).sum(axis=2))))
    gap = ((outside**2).sum(axis=1)[:, None] - (inside**2).sum(axis=1)[None, :])
    E = 1.0 / (gap + 1.0)
    return outside, inside, V, E, gap


def _abs_hat_block(spec, left, right):
    diff = left[:, None, :] - right[None, :, :]
    return np.abs(spec.hat(np.sqrt((diff**2).sum(axis=2))))


def _envelope_pair_tail(ball: FermiBall, d: int, Q0: float, power: int) -> float:
    """Continuum envelope estimate of the neglected |l| > cutoff pairs for a
    summand bounded by (1+q^2)^(-2) q^(-power); Q0 = cutoff - k_F."""
    if Q0 <= 1.0:
        return np.inf
    L = ball.lattice.L
    drop = 4 + power - d
    return (ball.N * L ** (-d) * (2.0 * np.pi) ** (-d) * _ANGULAR_SUP[d]
            * Q0 ** (-drop) / drop)


def lemma2_sums(lattice: MomentumLattice, ball: FermiBall, spec: PotentialSpec,
                tail_rel: float = 0.01) -> np.ndarray:
    """Four normalized pair sums: |v|^2 weighted by 1, 1/(gap+1),
    1/(gap+1)^2, and q^2/(gap+q^2+1)^2 with q = l - k, gap = l^2 - k^2.

    Raises "cutoff too small" when the envelope tail estimate of any sum
    exceeds `tail_rel` of its value.
    """
    d, L = lattice.d, lattice.L
    outside, inside, V, E, gap = _amplitude_matrices(lattice, ball, spec)
    diff = outside[:, None, :] - inside[None, :, :]
    q_sq = (diff**2).sum(axis=2)
    V_sq = V * V
    norm = L ** (-2 * d)
    sums = np.array([
        norm * V_sq.sum(),
        norm * (V_sq * E).sum(),
        norm * (V_sq * E * E).sum(),
        norm * (V_sq * q_sq / (gap + q_sq + 1.0) ** 2).sum(),
    ])

    Q0 = lattice.cutoff - ball.k_F
    if np.isfinite(spec.support_radius) and Q0 >= spec.support_radius:
        tails = np.zeros(4)
    else:
        base = _envelope_pair_tail(ball, d, Q0, 0)
        shell = lattice.cutoff**2 - ball.k_F**2 + 1.0
        tails = np.array([base, base / shell, base / shell**2,
                          _envelope_pair_tail(ball, d, Q0, 2)])
    bad = tails > tail_rel * np.maximum(np.abs(sums), 1e-300)
    if bad.any() and sums.max() > 0.0:
        worst = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"cutoff too small: sum {SUM_IDS[worst]!r} tail estimate "
            f"{tails[worst]:.3e} versus value {sums[worst]:.3e}")
    return sums


def _nested_sums(lattice, ball, spec, include_quadruple):
    d, L = lattice.d, lattice.L
    outside, inside, V, E, _ = _amplitude_matrices(lattice, ball, spec)
    VE = V * E
    M, N = VE.shape
    chunk = max(1, _MATRIX_CHUNK // max(M, 1))

    # (5): Frobenius norm of (outside-outside amplitudes) @ VE, row-chunked
    # (7): contraction of the same amplitudes against VE VE^T
    frob5 = 0.0
    contract7 = 0.0
    gram_in = VE @ VE.T if M * M <= _MATRIX_CHUNK else None
    for start in range(0, M, chunk):
        block = _abs_hat_block(spec, outside[start:start + chunk], outside)
        rows = block @ VE
        frob5 += float((rows * rows).sum())
        gram_rows = (gram_in[start:start + chunk] if gram_in is not None
                     else VE[start:start + chunk] @ VE.T)
        contract7 += float((block * gram_rows).sum())

    Vin = _abs_hat_block(spec, inside, inside)
    prod6 = VE @ Vin
    frob6 = float((prod6 * prod6).sum())

    sums = [L ** (-4 * d) * frob5, L ** (-4 * d) * frob6,
            L ** (-3 * d) * contract7]

    if include_quadruple:
        # (8): ||VE^T Vout VE||_F^2 and (9): ||Vout VE VE^T||_F^2, both
        # contracted down to N x N Grams to avoid M x M storage
        H = np.zeros((M, N))
        for start in range(0, M, chunk):
            block = _abs_hat_block(spec, outside[start:start + chunk], outside)
            H[start:start + chunk] = block @ VE
        S8 = VE.T @ H
        sums.append(L ** (-6 * d) * float((S8 * S8).sum()))
        HtH = H.T @ H
        VEtVE = VE.T @ VE
        sums.append(L ** (-6 * d) * float((HtH * VEtVE).sum()))
    else:
        sums.extend([np.nan, np.nan])
    return np.array(sums)


def lemmaA1_sums(lattice: MomentumLattice, ball: FermiBall,
                 spec: PotentialSpec, tail_rel: float = 0.01,
                 include_quadruple: bool = True) -> np.ndarray:
    """Five nested transition sums. The first three carry a gamma envelope,
    the two quadruple sums a gamma^2 envelope.

    Truncation control re-evaluates at 3/4 of the cutoff; a relative jump
    above `tail_rel` signals "cutoff too small". `include_quadruple=False`
    skips the two heaviest sums (returned as NaN).
    """
    sums = _nested_sums(lattice, ball, spec, include_quadruple)
    smaller_cut = ball.k_F + 0.75 * (lattice.cutoff - ball.k_F)
    lat_small = build_lattice(lattice.d, lattice.L, smaller_cut)
    ball_small = fermi_ball(lat_small, ball.k_F)
    ref = _nested_sums(lat_small, ball_small, spec, include_quadruple)
    live = ~np.isnan(sums)
    jump = np.abs(sums[live] - ref[live])
    bad = jump > tail_rel * np.maximum(np.abs(sums[live]), 1e-300)
    if bad.any() and np.nanmax(sums) > 0.0:
        worst = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"cutoff too small: nested sum {SUM_IDS[4 + worst]!r} moved "
            f"{jump[worst]:.3e} under cutoff reduction")
    return sums


@dataclass(frozen=True)
class BoundReport:
    """All nine sums at one (d, k_F, L, cutoff) with envelopes and ratios."""

    d: int
    k_F: float
    L: float
    cutoff: float
    spec_id: str
    sums: np.ndarray
    predicted: np.ndarray
    ratios: np.ndarray

    def records(self) -> list:
        out = []
        for i, sid in enumerate(SUM_IDS):
            out.append({"sum_id": sid, "d": self.d, "k_F": self.k_F,
                        "L": self.L, "cutoff": self.cutoff,
                        "spec": self.spec_id, "value": float(self.sums[i]),
                        "predicted": float(self.predicted[i]),
                        "ratio": float(self.ratios[i])})
        return out


def envelopes(d: int, k_F: float) -> np.ndarray:
    """Claimed growth envelopes for the nine sums, in SUM_IDS order."""
    log = np.log(k_F)
    g = gamma(d, k_F)
    return np.array([k_F ** (d - 1.0), k_F ** (d - 2.0),
                     k_F ** (d - 3.0) * log, k_F ** (d - 3.0) * log**2,
                     g, g, g, g * g, g * g])


def bound_report(d: int, k_F: float, L: float, spec: PotentialSpec,
                 cutoff: float | None = None, tail_rel: float = 0.01,
                 include_quadruple: bool = True) -> BoundReport:
    """Evaluate all nine sums on one box and wire each to its envelope."""
    from .mediated import spec_label

    if cutoff is None:
        cutoff = 4.0 * k_F
    lattice = build_lattice(d, L, cutoff)
    ball = fermi_ball(lattice, k_F)
    four = lemma2_sums(lattice, ball, spec, tail_rel=tail_rel)
    five = lemmaA1_sums(lattice, ball, spec, tail_rel=tail_rel,
                        include_quadruple=include_quadruple)
    sums = np.concatenate([four, five])
    if (sums[~np.isnan(sums)] < 0).any():
        raise ValueError("bound sums must be nonnegative")
    predicted = envelopes(d, k_F)
    ratios = sums / predicted
    return BoundReport(d=d, k_F=k_F, L=L, cutoff=cutoff,
                       spec_id=spec_label(spec), sums=sums,
                       predicted=predicted, ratios=ratios)


# --- elementary double integrals ---------------------------------------------


def elementary_integral_checks(a: float, eps: float) -> dict:
    """Adaptive quadrature of the two corner integrals over [-a,0]x[0,a]
    against their closed upper bounds; margins must come out positive."""
    if not a > 1.0 > 2.0 * eps > 0.0:
        raise ValueError("need a > 1 > 2*eps > 0")
    first, err1 = dblquad(lambda r, s: 1.0 / (r - s + eps), -a, 0.0, 0.0, a,
                          epsabs=1e-11, epsrel=1e-11)
    second, err2 = dblquad(lambda r, s: 1.0 / (r - s + eps) ** 2, -a, 0.0,
                           0.0, a, epsabs=1e-11, epsrel=1e-11)
    bound1 = 5.0 * a * np.log(3.0 * a) + eps * np.log(1.0 / eps)
    bound2 = 2.0 * np.log(2.0 * a) + np.log(1.0 / eps)
    return {
        "a": a, "eps": eps,
        "integral1": first, "bound1": bound1, "margin1": bound1 - first,
        "ok1": bound1 - first > err1,
        "integral2": second, "bound2": bound2, "margin2": bound2 - second,
        "ok2": bound2 - second > err2,
    }


# --- continuum pair integrals (appendix reductions) --------------------------


def _graded_edges(a: float, b: float, n: int, toward_a: bool) -> np.ndarray:
    """n panel edges on [a, b], geometrically refined toward one end."""
    frac = 0.5 ** np.arange(n - 1, -1, -1)
    pts = a + (b - a) * frac if toward_a else b - (b - a) * frac[::-1]
    return np.concatenate([[a], pts]) if toward_a else np.concatenate([pts, [b]])


def _panel_nodes(edges: np.ndarray):
    lo, hi = edges[:-1], edges[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * NODES[None, :]).ravel()
    weights = (half[:, None] * WEIGHTS_K[None, :]).ravel()
    return nodes, weights


def pair_integral(kernel, d: int, k_F: float, r_max: float,
                  radial_panels: int = 14, angular_panels: int = 10) -> float:
    """Continuum integral over {|k| <= k_F} x {k_F <= |l| <= r_max} of a
    kernel f(s, r, u) depending on the two radii and the separation
    u = |l - k|; the angular integral is reduced to one variable.

    A fixed composite Kronrod tensor rule with edges graded toward the
    Fermi surface (where the energy denominators concentrate).
    """
    s_nodes, s_w = _panel_nodes(_graded_edges(0.0, k_F, radial_panels, False))
    r_nodes, r_w = _panel_nodes(_graded_edges(k_F, r_max, radial_panels, True))
    s_col = s_nodes[:, None]
    r_row = r_nodes[None, :]
    if d == 1:
        inner = (kernel(s_col, r_row, r_row - s_col)
                 + kernel(s_col, r_row, r_row + s_col))
        return 2.0 * float(s_w @ inner @ r_w)
    theta, t_w = _panel_nodes(np.linspace(0.0, np.pi, angular_panels + 1))
    total = np.zeros((s_nodes.size, r_nodes.size))
    metric = np.sin(theta) if d == 3 else np.ones_like(theta)
    for th, tw, mt in zip(theta, t_w, metric):
        u = np.sqrt(s_col**2 + r_row**2 - 2.0 * np.cos(th) * s_col * r_row)
        total += (tw * mt) * kernel(s_col, r_row, u)
    if d == 2:
        pref = 2.0 * np.pi * s_col * r_row * 2.0
    else:
        pref = 4.0 * np.pi * s_col**2 * r_row**2 * 2.0 * np.pi
    return float(s_w @ (pref * total) @ r_w)


def _exclusion_volume(d: int, k_F: float, q):
    """Volume of {|k| <= k_F, |k + q| >= k_F} as a function of |q|: the
    ball minus the lens-shaped overlap of two balls at center distance q."""
    q = np.asarray(q, dtype=float)
    ball = {1: 2.0 * k_F, 2: np.pi * k_F**2, 3: 4.0 * np.pi * k_F**3 / 3.0}[d]
    half = np.clip(q / (2.0 * k_F), 0.0, 1.0)
    if d == 1:
        overlap = 2.0 * k_F * (1.0 - half)
    elif d == 2:
        overlap = 2.0 * k_F**2 * (np.arccos(half)
                                  - half * np.sqrt(1.0 - half**2))
    else:
        overlap = (np.pi / 12.0) * (4.0 * k_F + q) * np.maximum(
            2.0 * k_F - q, 0.0) ** 2
    return ball - overlap


def _lorentz_sq_tail(d: int, A: float) -> float:
    """Closed form of int_A^inf q^(d-1) (1+q^2)^(-2) dq."""
    if d == 1:
        return np.pi / 4.0 - A / (2.0 * (1.0 + A * A)) - np.arctan(A) / 2.0
    if d == 2:
        return 1.0 / (2.0 * (1.0 + A * A))
    return np.pi / 4.0 - np.arctan(A) / 2.0 + A / (2.0 * (1.0 + A * A))


def appendix_J_integrals(d: int, k_F: float, spec: PotentialSpec,
                         r_max_pad: float = 60.0) -> dict:
    """The four continuum integrals behind the a-priori sum bounds, with
    their claimed envelopes and ratios.

    J1: geometric pair integral of (1+u^2)^(-2), envelope k_F^(d-1).
    J2: |v(u)|^2 / (r - s + 1/k_F), envelope k_F^(d-1).
    J3: |v(u)|^2 u^2 / (r^2-s^2+u^2+1)^2 on u >= 1, envelope
        k_F^(d-3) (1+ln k_F)^2.
    J4_kernel: k_F^(-2) times the ball integral of the squared inner
        transfer integral, with the inner separation windowed to
        u < 10 k_F as in the layered estimate (the outer layer carries
        its own envelope and, for Lorentzian-decay profiles at d=3, the
        unwindowed inner integral diverges logarithmically). Envelope
        gamma(d, k_F).
    """
    if d not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2, or 3")
    if not 2.0 <= k_F <= 32.0:
        raise ValueError("k_F must lie in [2, 32]")
    r_max = k_F + r_max_pad
    eps = 1.0 / k_F

    # beyond q = 2 k_F the exclusion volume is the whole ball; that tail
    # decays only like q^(d-5), so integrate it in closed form
    def j1_radial(q):
        return q ** (d - 1) / (1.0 + q * q) ** 2 * _exclusion_volume(d, k_F, q)

    res = integrate_panels(j1_radial, 0.0, 2.0 * k_F, rel_tol=1e-9)
    ball = {1: 2.0 * k_F, 2: np.pi * k_F**2, 3: 4.0 * np.pi * k_F**3 / 3.0}[d]
    J1 = _ANGULAR_SUP[d] * (float(res.value)
                            + ball * _lorentz_sq_tail(d, 2.0 * k_F))

    def j2_kernel(s, r, u):
        return spec.hat_sq(u) / (r - s + eps)

    J2 = pair_integral(j2_kernel, d, k_F, r_max)

    def j3_kernel(s, r, u):
        weight = np.where(u >= 1.0, u * u, 0.0)
        return (spec.hat_sq(u) * weight
                / (r * r - s * s + u * u + 1.0) ** 2)

    J3 = pair_integral(j3_kernel, d, k_F, r_max)

    # inner transfer integral per |k| = s, then squared over the ball
    u_cap = 10.0 * k_F
    s_nodes, s_w = _panel_nodes(_graded_edges(0.0, k_F, 16, False))
    r_nodes, r_w = _panel_nodes(_graded_edges(k_F, k_F + u_cap, 16, True))
    s_col, r_row = s_nodes[:, None], r_nodes[None, :]
    if d == 1:
        amp = np.where(r_row - s_col < u_cap,
                       np.abs(spec.hat(r_row - s_col)), 0.0)
        amp_far = np.where(r_row + s_col < u_cap,
                           np.abs(spec.hat(r_row + s_col)), 0.0)
        inner = 2.0 * (((amp + amp_far) / (r_row - s_col + eps)) @ r_w)
    else:
        theta, t_w = _panel_nodes(np.linspace(0.0, np.pi, 11))
        acc = np.zeros((s_nodes.size, r_nodes.size))
        metric = np.sin(theta) if d == 3 else np.ones_like(theta)
        for th, tw, mt in zip(theta, t_w, metric):
            u = np.sqrt(s_col**2 + r_row**2 - 2.0 * np.cos(th) * s_col * r_row)
            acc += (tw * mt) * np.where(u < u_cap, np.abs(spec.hat(u)), 0.0)
        ang = 2.0 if d == 2 else 2.0 * np.pi
        inner = (ang * r_row ** (d - 1) * acc / (r_row - s_col + eps)) @ r_w
    J4_kernel = k_F ** (-2.0) * float(
        s_w @ (_ANGULAR_SUP[d] * s_nodes ** (d - 1) * inner**2))

    log = np.log(k_F)
    report = {
        "d": d, "k_F": k_F,
        "J1": J1, "J1_envelope": k_F ** (d - 1.0),
        "J2": J2, "J2_envelope": k_F ** (d - 1.0),
        "J3": J3, "J3_envelope": k_F ** (d - 3.0) * (1.0 + log) ** 2,
        "J4_kernel": J4_kernel, "J4_envelope": gamma(d, k_F),
    }
    for name in ("J1", "J2", "J3", "J4"):
        key = name if name != "J4" else "J4_kernel"
        report[f"{name}_ratio"] = report[key] / report[f"{name}_envelope"]
    return report

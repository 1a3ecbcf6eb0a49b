"""Fermion-mediated pair potential between impurities.

The gas ground state transmits an effective interaction between two
impurities at separation r. It is a double momentum integral over occupied
modes k inside the Fermi ball and empty modes l outside:

    W(r) = (2 pi)^(-2d) iint |v(|l-k|)|^2 cos((l-k) . r e1)
                        / (l^2 - k^2 + (l-k)^2 + 1) dk dl.

Substituting q = l - k turns the denominator into 2 k.q + 2 q^2 + 1 and
confines k to the lens {|k| <= k_F, |k+q| > k_F}. The angular lens
integrals have closed forms, so W reduces to at most two nested radial
quadratures handled by the adaptive panel rule.

A finite-box Riemann sum over the momentum lattice provides an
independent brute-force oracle; the two routes agree as the box grows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import j0

from .lattice import build_lattice, fermi_ball, pair_arrays
from .potentials import PotentialSpec
from .quadrature import NODES, WEIGHTS_G, WEIGHTS_K, integrate_panels

DEFAULT_REL_TOL = 1e-6
DEFAULT_TRANSFER_SPLIT = 10.0
LATTICE_TAIL_REL = 1e-3
_PAIR_CHUNK = 4_000_000

# sup over x >= 0 of the angular transform magnitude, per dimension
_ANGULAR_SUP = {1: 2.0, 2: 2.0 * np.pi, 3: 4.0 * np.pi}
_BALL_VOLUME = {1: 2.0, 2: np.pi, 3: 4.0 * np.pi / 3.0}

# fixed inner rule: 8 Kronrod panels on [0, 1] after a smoothstep map that
# flattens both endpoints, absorbing the square-root edge behavior of the
# arc integrals into an analytic integrand
_INNER_PANELS = 8
_edges = np.linspace(0.0, 1.0, _INNER_PANELS + 1)
_half = 0.5 * (_edges[1] - _edges[0])
_SIGMA = (0.5 * (_edges[:-1] + _edges[1:])[:, None] + _half * NODES[None, :]).ravel()
_W_INNER_K = np.tile(WEIGHTS_K * _half, _INNER_PANELS)
_W_INNER_G = np.tile(WEIGHTS_G * _half, _INNER_PANELS)
_SMOOTH = _SIGMA**2 * (3.0 - 2.0 * _SIGMA)
_SMOOTH_JAC = 6.0 * _SIGMA * (1.0 - _SIGMA)
del _edges, _half


def angular_transform(d: int, x):
    """Angular average of cos(q . r e1) over directions of q, times the
    surface measure: 2cos(x), 2 pi J0(x), 4 pi sin(x)/x for d = 1, 2, 3."""
    x = np.asarray(x, dtype=float)
    if d == 1:
        return 2.0 * np.cos(x)
    if d == 2:
        return 2.0 * np.pi * j0(x)
    return 4.0 * np.pi * np.sinc(x / np.pi)


def _line_lens(q, k_F):
    """d=1 lens integral of 1/(2kq + 2q^2 + 1) over k in (k_F - q, k_F]
    (or the whole segment once q > 2 k_F); closed form."""
    q = np.asarray(q, dtype=float)
    hi = 2.0 * k_F * q + 2.0 * q * q + 1.0
    lo = np.where(q <= 2.0 * k_F, 2.0 * k_F * q + 1.0,
                  2.0 * q * q - 2.0 * k_F * q + 1.0)
    out = np.zeros_like(q)
    pos = q > 0
    out[pos] = np.log(hi[pos] / lo[pos]) / (2.0 * q[pos])
    return out


def _stable_ratio(y):
    """g(y) with arctan(sqrt(y))/sqrt(y) for y > 0 and the artanh analogue
    for y < 0; series near 0 where both forms lose digits."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    small = np.abs(y) < 1e-8
    ys = y[small]
    out[small] = 1.0 - ys / 3.0 + ys * ys / 5.0
    pos = (y >= 1e-8)
    rp = np.sqrt(y[pos])
    out[pos] = np.arctan(rp) / rp
    neg = (y <= -1e-8)
    rn = np.sqrt(-y[neg])
    # the argument is < 1 whenever the arc stays clear of the integrand
    # pole, which the lens guarantees; clip rounding overshoot
    rn = np.minimum(rn, 1.0 - 1e-15)
    out[neg] = np.arctanh(rn) / rn
    return out


def _arc_integral(u, q, k_F):
    """d=2: circular-arc integral of 1/(A + B cos phi) over the directions
    of k with |k| = u that leave |k + q| > k_F; A = 2q^2+1, B = 2uq."""
    A = 2.0 * q * q + 1.0
    B = 2.0 * u * q
    cstar = (k_F * k_F - u * u - q * q) / B
    out = np.zeros(np.broadcast_shapes(u.shape, np.shape(A)))
    full = cstar <= -1.0
    if full.any():
        Af, Bf = np.broadcast_to(A, out.shape)[full], B[full]
        out[full] = 2.0 * np.pi / np.sqrt((Af - Bf) * (Af + Bf))
    mid = (cstar > -1.0) & (cstar < 1.0)
    if mid.any():
        c = cstar[mid]
        Am, Bm = np.broadcast_to(A, out.shape)[mid], B[mid]
        t0_sq = (1.0 - c) / (1.0 + c)
        y = (Am - Bm) / (Am + Bm) * t0_sq
        out[mid] = 4.0 * np.sqrt(t0_sq) * _stable_ratio(y) / (Am + Bm)
    return out


def _solid_angle_integral(u, q, k_F):
    """d=3: polar integral 2 pi int dc / (A + B c) over the lens cap."""
    A = 2.0 * q * q + 1.0
    B = 2.0 * u * q
    cstar = (k_F * k_F - u * u - q * q) / B
    out = np.zeros(np.broadcast_shapes(u.shape, np.shape(A)))
    live = cstar < 1.0
    if live.any():
        clo = np.maximum(cstar[live], -1.0)
        Al = np.broadcast_to(A, out.shape)[live]
        Bl = B[live]
        ratio = np.log1p(Bl / Al) - np.log1p(Bl * clo / Al)
        out[live] = 2.0 * np.pi * ratio / Bl
    return out


def lens_weight(q, k_F: float, d: int):
    """Inner lens integral I_d(q) over k, and its quadrature error.

    I_d(q) = int over the lens {|k| <= k_F, |k+q| > k_F} of
    1/(2 k.q + 2q^2 + 1) d^d k, reduced to a radial integral in u = |k|
    with the angular part in closed form. Vectorized over the q array; the
    radial rule is a fixed smoothstep-mapped Kronrod composite with the
    kink at u = q - k_F placed on a piece boundary.
    """
    q = np.asarray(q, dtype=float)
    if d == 1:
        return _line_lens(q, k_F), np.zeros_like(q)

    pos = np.flatnonzero(q > 0)
    qp = q[pos]
    lo_u = np.maximum(0.0, k_F - qp)
    kink = qp - k_F
    has_kink = (kink > lo_u) & (kink < k_F)
    # pieces: (lo_u, k_F) whole, or split at the kink
    piece_a = np.concatenate([lo_u, np.where(has_kink, kink, lo_u)[has_kink]])
    piece_b = np.concatenate([np.where(has_kink, kink, k_F),
                              np.full(int(has_kink.sum()), k_F)])
    piece_q = np.concatenate([qp, qp[has_kink]])
    owner = np.concatenate([np.arange(qp.size), np.flatnonzero(has_kink)])

    width = (piece_b - piece_a)[:, None]
    u = piece_a[:, None] + width * _SMOOTH[None, :]
    angular = _arc_integral if d == 2 else _solid_angle_integral
    g = u ** (d - 1) * angular(u, piece_q[:, None], k_F) * _SMOOTH_JAC[None, :]
    vals = width[:, 0] * (g @ _W_INNER_K)
    errs = np.abs(vals - width[:, 0] * (g @ _W_INNER_G))

    out = np.zeros_like(q)
    err = np.zeros_like(q)
    np.add.at(out, pos[owner], vals)
    np.add.at(err, pos[owner], errs)
    return out, err


def _transfer_tail_bound(Q: float, k_F: float, d: int) -> float:
    """Envelope bound on the neglected transfer integral beyond Q >= 2k_F+1:
    |v|^2 <= q^-4 and I_d <= vol(ball)/q^2 there."""
    return ((2.0 * np.pi) ** (-2 * d) * _ANGULAR_SUP[d]
            * _BALL_VOLUME[d] * k_F**d * Q ** (d - 6) / (6 - d))


def _profile_segment(r_grid, k_F, d, spec, a, b, rel_tol, abs_tol):
    r_max = float(r_grid.max())
    inner_rel = 0.0

    def integrand(q):
        weight, werr = lens_weight(q, k_F, d)
        nonlocal inner_rel
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(weight > 0, werr / np.maximum(weight, 1e-300), 0.0)
        inner_rel = max(inner_rel, float(rel.max(initial=0.0)))
        base = spec.hat_sq(q) * q ** (d - 1) * weight
        return base[:, None] * angular_transform(d, q[:, None] * r_grid[None, :])

    breaks = [k_F, 2.0 * k_F]
    if np.isfinite(spec.support_radius):
        breaks.append(spec.support_radius)
    max_width = (b - a) / 8.0
    if r_max > 0:
        max_width = min(max_width, np.pi / r_max)
    try:
        res = integrate_panels(integrand, a, b, breakpoints=breaks,
                               rel_tol=rel_tol, abs_tol=abs_tol,
                               max_width=max_width, max_panels=8192)
    except ValueError as exc:
        raise ValueError(f"quadrature failed: {exc}") from exc
    value = np.atleast_1d(res.value)
    error = np.atleast_1d(res.error) + inner_rel * np.abs(value)
    return value, error, res.converged


def W_profile(r_grid, k_F: float, d: int, spec: PotentialSpec,
              rel_tol: float = DEFAULT_REL_TOL, max_transfer: float | None = None):
    """Mediated potential W at each separation in r_grid, with error
    estimates. One call shares the expensive lens integrals across the
    whole grid. `max_transfer` truncates the momentum-transfer magnitude
    |l - k| (the low-transfer part of the proof's splitting)."""
    r_grid = np.asarray(r_grid, dtype=float)
    if r_grid.ndim != 1 or r_grid.size == 0:
        raise ValueError("r_grid must be a non-empty 1-d array")
    if (r_grid < 0).any():
        raise ValueError("separations must be non-negative")
    if d not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2, or 3")
    if k_F < 1:
        raise ValueError("k_F must be at least 1")
    if not 1e-10 <= rel_tol <= 1e-3:
        raise ValueError("rel_tol must lie in [1e-10, 1e-3]")

    prefactor = (2.0 * np.pi) ** (-2 * d)
    end = spec.support_radius
    if max_transfer is not None:
        end = min(end, float(max_transfer))
    if end == 0.0:
        return np.zeros_like(r_grid), np.zeros_like(r_grid)

    if np.isfinite(end):
        values, errors, ok = _profile_segment(r_grid, k_F, d, spec, 0.0, end,
                                              rel_tol, 0.0)
        if not ok:
            raise ValueError(
                f"quadrature failed: error estimate {errors.max():.3e} "
                f"after panel budget")
        return prefactor * values, prefactor * errors

    # infinite support: integrate to Q, then double Q until the increment
    # and the envelope tail bound both fall below the target
    Q = max(4.0 * k_F, 20.0)
    values, errors, ok = _profile_segment(r_grid, k_F, d, spec, 0.0, Q,
                                          rel_tol, 0.0)
    if not ok:
        raise ValueError(
            f"quadrature failed: error estimate {errors.max():.3e} "
            f"after panel budget")
    for _ in range(12):
        target = rel_tol * np.abs(values).max()
        if _transfer_tail_bound(Q, k_F, d) <= 0.25 * target:
            tail = _transfer_tail_bound(Q, k_F, d)
            return prefactor * values, prefactor * (errors + tail)
        inc, inc_err, ok = _profile_segment(r_grid, k_F, d, spec, Q, 2.0 * Q,
                                            rel_tol, 0.1 * target)
        if not ok:
            raise ValueError(
                f"quadrature failed: error estimate {inc_err.max():.3e} "
                f"after panel budget")
        values = values + inc
        errors = errors + inc_err
        Q *= 2.0
    raise ValueError("quadrature failed: transfer tail does not close")


def W_quadrature(r: float, k_F: float, d: int, spec: PotentialSpec,
                 rel_tol: float = DEFAULT_REL_TOL,
                 max_transfer: float | None = None):
    """W at a single separation r >= 0; returns (value, err_est)."""
    values, errors = W_profile(np.array([float(r)]), k_F, d, spec,
                               rel_tol=rel_tol, max_transfer=max_transfer)
    return float(values[0]), float(errors[0])


def _support_pairs(outside, inside, radius):
    """Index pairs (i_out, i_in) with |l - k| within the profile support;
    skips the provably zero summands of a compactly supported profile."""
    from scipy.spatial import cKDTree

    tree = cKDTree(inside)
    neighbors = tree.query_ball_point(outside, r=radius * (1.0 + 1e-9))
    counts = np.fromiter((len(n) for n in neighbors), dtype=np.int64,
                         count=len(neighbors))
    i_out = np.repeat(np.arange(outside.shape[0]), counts)
    i_in = np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbors]) \
        if i_out.size else np.zeros(0, dtype=np.int64)
    return i_out, i_in


def _lattice_profile(r_grid, k_F, L, d, spec, cutoff, max_transfer=None):
    lattice = build_lattice(d, L, cutoff)
    ball = fermi_ball(lattice, k_F)
    outside, inside = pair_arrays(lattice, ball)
    if outside.shape[0] == 0 or inside.shape[0] == 0:
        return np.zeros(r_grid.size), 0.0, 0.0

    values = np.zeros(r_grid.size)
    scale = 0.0
    reach = spec.support_radius
    if max_transfer is not None:
        reach = min(reach, float(max_transfer))

    if np.isfinite(reach):
        i_out, i_in = _support_pairs(outside, inside, reach)
        chunk = _PAIR_CHUNK
        for start in range(0, i_out.size, chunk):
            lo = outside[i_out[start:start + chunk]]
            ki = inside[i_in[start:start + chunk]]
            q = lo - ki
            q_sq = (q**2).sum(axis=1)
            den = (lo**2).sum(axis=1) - (ki**2).sum(axis=1) + q_sq + 1.0
            weight = spec.hat_sq(np.sqrt(q_sq))
            if max_transfer is not None:
                weight = np.where(q_sq <= max_transfer**2, weight, 0.0)
            base = weight / den
            scale += float(base.sum())
            for j, r in enumerate(r_grid):
                values[j] += float(base @ np.cos(q[:, 0] * r))
    else:
        n_in = inside.shape[0]
        chunk = max(1, _PAIR_CHUNK // max(n_in, 1))
        in_sq = (inside**2).sum(axis=1)
        for start in range(0, outside.shape[0], chunk):
            lo = outside[start:start + chunk]
            q_sq = np.zeros((lo.shape[0], n_in))
            for axis in range(d):
                diff = lo[:, axis, None] - inside[None, :, axis]
                q_sq += diff * diff
                if axis == 0:
                    q_first = diff
            den = ((lo**2).sum(axis=1)[:, None] - in_sq[None, :]) + q_sq + 1.0
            weight = spec.hat_sq(np.sqrt(q_sq))
            if max_transfer is not None:
                weight = np.where(q_sq <= max_transfer**2, weight, 0.0)
            base = weight / den
            scale += float(base.sum())
            flat_base = base.ravel()
            flat_q = q_first.ravel()
            for j, r in enumerate(r_grid):
                values[j] += float(flat_base @ np.cos(flat_q * r))

    norm = L ** (-2 * d)
    Q0 = cutoff - k_F
    reach = spec.support_radius
    if max_transfer is not None:
        reach = min(reach, max_transfer)
    if np.isfinite(reach) and Q0 >= reach:
        # every pair with nonzero weight satisfies |l| <= k_F + reach <= cutoff
        tail = 0.0
    elif Q0 <= 1.0:
        tail = np.inf
    else:
        tail = (ball.N * L ** (-d) * (2.0 * np.pi) ** (-d)
                * _ANGULAR_SUP[d] * Q0 ** (d - 6) / (6 - d))
    return norm * values, norm * scale, tail


def W_lattice_sum(r: float, k_F: float, L: float, d: int, spec: PotentialSpec,
                  cutoff: float, max_transfer: float | None = None,
                  tail_rel: float = LATTICE_TAIL_REL) -> float:
    """Riemann-sum oracle: L^(-2d) sum over (l outside, k inside the Fermi
    ball, |l| <= cutoff) of |v(l-k)|^2 cos((l-k).r e1) / (l^2-k^2+(l-k)^2+1).

    Raises when the envelope estimate of the neglected |l| > cutoff tail
    exceeds a `tail_rel` fraction of the positive-term mass.
    """
    if r < 0:
        raise ValueError("separations must be non-negative")
    if L < 2.0 * np.pi:
        raise ValueError("box length must be at least 2 pi")
    values, scale, tail = _lattice_profile(np.array([float(r)]), k_F, L, d,
                                           spec, cutoff, max_transfer)
    if tail > tail_rel * max(scale, 1e-300) and scale > 0.0:
        raise ValueError(
            f"cutoff too small: tail estimate {tail:.3e} versus "
            f"summand mass {scale:.3e}")
    return float(values[0])


def W_lattice_profile(r_grid, k_F: float, L: float, d: int,
                      spec: PotentialSpec, cutoff: float,
                      max_transfer: float | None = None,
                      tail_rel: float = LATTICE_TAIL_REL):
    """Vectorized lattice oracle over a separation grid; one pair sweep
    serves every r. Returns (values, tail_estimate)."""
    r_grid = np.asarray(r_grid, dtype=float)
    if (r_grid < 0).any():
        raise ValueError("separations must be non-negative")
    if L < 2.0 * np.pi:
        raise ValueError("box length must be at least 2 pi")
    values, scale, tail = _lattice_profile(r_grid, k_F, L, d, spec, cutoff,
                                           max_transfer)
    if tail > tail_rel * max(scale, 1e-300) and scale > 0.0:
        raise ValueError(
            f"cutoff too small: tail estimate {tail:.3e} versus "
            f"summand mass {scale:.3e}")
    return values, tail


def spec_label(spec: PotentialSpec) -> str:
    if spec.kind in ("step", "zero"):
        return spec.kind
    return f"{spec.kind}(R={spec.R:g})"


@dataclass(frozen=True)
class PotentialTable:
    """Scaled profile k_F^(2-d) W(r) on a separation grid.

    `values` carry the k_F^(2-d) scaling that makes profiles comparable
    across k_F; `w_value` undoes it for use in dynamics.
    """

    d: int
    k_F: float
    r_grid: np.ndarray
    values: np.ndarray
    err_est: np.ndarray
    method: str
    spec_id: str

    def interpolate(self, r):
        """Scaled value at arbitrary separations, linear between grid points."""
        return np.interp(np.abs(r), self.r_grid, self.values)

    def w_value(self, r):
        """Unscaled W(r)."""
        return self.k_F ** (self.d - 2) * self.interpolate(r)

    def validate(self) -> None:
        peak = float(np.abs(self.values).max(initial=0.0))
        if peak == 0.0:
            return
        if self.values[0] <= 0.0:
            raise ValueError("potential table invalid: value at r=0 not positive")
        slack = 1e-9 * peak + float(self.err_est.max(initial=0.0))
        if (np.abs(self.values) > self.values[0] + slack).any():
            raise ValueError("potential table invalid: |W(r)| exceeds W(0)")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.d, self.k_F, self.method, self.spec_id])
            for row in zip(self.r_grid, self.values, self.err_est):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "PotentialTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        d, k_F, method, spec_id = rows[0]
        data = np.array([[float(x) for x in row] for row in rows[1:]])
        return cls(d=int(d), k_F=float(k_F), r_grid=data[:, 0],
                   values=data[:, 1], err_est=data[:, 2], method=method,
                   spec_id=spec_id)


def potential_table(k_F: float, d: int, spec: PotentialSpec, r_grid=None,
                    rel_tol: float = DEFAULT_REL_TOL, method: str = "quadrature",
                    L: float | None = None, cutoff: float | None = None
                    ) -> PotentialTable:
    """Tabulate the scaled profile k_F^(2-d) W over a separation grid."""
    if r_grid is None:
        r_grid = np.linspace(0.0, 10.0, 200)
    r_grid = np.asarray(r_grid, dtype=float)
    scaling = k_F ** (2 - d)
    if method == "quadrature":
        raw, err = W_profile(r_grid, k_F, d, spec, rel_tol=rel_tol)
        table = PotentialTable(d=d, k_F=k_F, r_grid=r_grid,
                               values=scaling * raw, err_est=scaling * err,
                               method="quadrature", spec_id=spec_label(spec))
    elif method == "lattice_sum":
        if L is None or cutoff is None:
            raise ValueError("lattice_sum tables need L and cutoff")
        raw, scale, tail = _lattice_profile(r_grid, k_F, L, d, spec, cutoff)
        if tail > LATTICE_TAIL_REL * max(scale, 1e-300) and scale > 0.0:
            raise ValueError(
                f"cutoff too small: tail estimate {tail:.3e} versus "
                f"summand mass {scale:.3e}")
        table = PotentialTable(d=d, k_F=k_F, r_grid=r_grid,
                               values=scaling * raw,
                               err_est=np.full(r_grid.size, scaling * tail),
                               method=f"lattice_sum(L={L:g})",
                               spec_id=spec_label(spec))
    else:
        raise ValueError(f"unknown method {method!r}")
    table.validate()
    return table


@dataclass(frozen=True)
class Lemma1Report:
    """Uniform-in-k_F summary of the scaled profiles.

    `sup_abs` is the per-k_F sup of |k_F^(2-d) W|; `core_inf` the per-k_F
    infimum over the common positive core [0, c_probe]; `core_ok` says
    whether a common core radius with positive infimum exists at all.
    `doubling_diffs` records the relative profile change between
    consecutive k_F entries (a convergence diagnostic).
    """

    k_F_list: tuple
    d: int
    spec_id: str
    c_probe: float
    sup_abs: np.ndarray
    core_inf: np.ndarray
    core_ok: bool
    doubling_diffs: np.ndarray
    r_grid: np.ndarray
    profiles: np.ndarray


def lemma1_scan(k_F_list, d: int, spec: PotentialSpec, r_max: float = 10.0,
                grid_points: int = 200,
                rel_tol: float = DEFAULT_REL_TOL) -> Lemma1Report:
    """Scan scaled profiles over a k_F list and probe the two-sided bounds:
    a k_F-uniform sup and a positive infimum on a common core window."""
    k_F_list = tuple(float(k) for k in k_F_list)
    if any(k < 1 for k in k_F_list):
        raise ValueError("k_F must be at least 1")
    r_grid = np.linspace(0.0, r_max, grid_points)
    profiles = np.empty((len(k_F_list), grid_points))
    for i, k_F in enumerate(k_F_list):
        raw, _ = W_profile(r_grid, k_F, d, spec, rel_tol=rel_tol)
        profiles[i] = k_F ** (2 - d) * raw

    sup_abs = np.abs(profiles).max(axis=1)
    pointwise_min = profiles.min(axis=0)
    positive = pointwise_min > 0.0
    prefix = 0
    while prefix < grid_points and positive[prefix]:
        prefix += 1
    if prefix == 0:
        c_probe, core_ok = 0.0, False
        core_inf = np.zeros(len(k_F_list))
    else:
        c_probe, core_ok = float(r_grid[prefix - 1]), True
        core_inf = profiles[:, :prefix].min(axis=1)

    if len(k_F_list) > 1:
        denom = np.abs(profiles[1:]).max(axis=1)
        doubling_diffs = (np.abs(profiles[1:] - profiles[:-1]).max(axis=1)
                          / np.maximum(denom, 1e-300))
    else:
        doubling_diffs = np.zeros(0)
    return Lemma1Report(k_F_list=k_F_list, d=d, spec_id=spec_label(spec),
                        c_probe=c_probe, sup_abs=sup_abs, core_inf=core_inf,
                        core_ok=core_ok, doubling_diffs=doubling_diffs,
                        r_grid=r_grid, profiles=profiles)

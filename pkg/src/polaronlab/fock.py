"""Truncated particle-hole dynamics of the full microscopic system.

States are expanded over configurations with up to m_max particle-hole
pairs on top of the filled Fermi ball, tensored with an impurity
momentum tuple; the generator, shifted so the undisturbed product state
carries no residual phase, acts matrix-free through four transition
classes: pair creation, pair annihilation, hole relocation, and
particle relocation, each recoiling one impurity by the transferred
momentum.

Fermionic signs follow from the convention that a configuration is the
ordered product of particle creators (ascending mode order) and sea
annihilators (ascending) applied to the filled ball; matrix elements
convert to the occupation representation and count crossings there.

Impurity recoil wraps around the periodic momentum band, matching the
split-step convention of the effective propagator and the pair term
below.  Transitions leaving the particle-hole truncation (more pairs
than m_max, particle modes beyond the lattice cutoff) are dropped;
their squared amplitude flux feeds a diagnostic that time-integrates to
the reported dropped weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from numba import njit
from scipy.linalg import eigh_tridiagonal

from .effective import ImpurityState
from .lattice import FermiBall, MomentumLattice, build_lattice
from .potentials import ImpurityPotentialSpec, PotentialSpec, zero_impurity

DEFAULT_KRYLOV_TOL = 1e-10
DEFAULT_BASIS_CAP = 20_000_000
_MAX_KRYLOV = 40
_MIN_SUBSTEP_FRACTION = 2.0**-20
_TAIL_PAD = 3.0


def _colex_combinations(pool_size: int, m: int):
    combos = list(combinations(range(pool_size), m))
    combos.sort(key=lambda c: c[::-1])
    return combos


def _binom_table(n_max: int, k_max: int = 3) -> np.ndarray:
    table = np.zeros((n_max + 2, k_max + 2), dtype=np.int64)
    for n in range(n_max + 2):
        for k in range(min(n, k_max + 1) + 1):
            table[n, k] = math.comb(n, k)
    return table


@dataclass(frozen=True, eq=False)
class FockBasis:
    """One total-momentum block of the truncated particle-hole basis.

    Configurations are ordered by pair count, then hole combination,
    then particle combination (colex within each pool), so the basis for
    a smaller m_max is a prefix of the one for a larger. Rows pair each
    configuration with the impurity tuples closing the block's total
    momentum; `row_start` delimits each configuration's contiguous
    fiber, ordered by ascending tuple id.
    """

    lattice: MomentumLattice
    ball: FermiBall
    n: int
    M_imp: int
    m_max: int
    total_z: tuple
    ball_z: np.ndarray = field(repr=False)   # (Nb, d) integer modes
    out_z: np.ndarray = field(repr=False)    # (No, d)
    gidx_ball: np.ndarray = field(repr=False)
    gidx_out: np.ndarray = field(repr=False)
    ball_below: np.ndarray = field(repr=False)
    holes: np.ndarray = field(repr=False)    # (C, 3) ball-local, pad -1
    parts: np.ndarray = field(repr=False)    # (C, 3) out-local, pad -1
    m_of: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    cfg_offset: np.ndarray = field(repr=False)
    pos_in_class: np.ndarray = field(repr=False)
    row_start: np.ndarray = field(repr=False)
    row_tau: np.ndarray = field(repr=False)
    binom: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return int(self.row_tau.size)

    @property
    def config_count(self) -> int:
        return int(self.m_of.size)

    @property
    def d(self) -> int:
        return self.lattice.d

    def row_config(self) -> np.ndarray:
        """Configuration index of every row."""
        return np.repeat(np.arange(self.config_count),
                         np.diff(self.row_start))


def _band_digits(M_imp: int):
    z_axis = np.fft.fftfreq(M_imp, d=1.0 / M_imp).astype(np.int64)
    lo, hi = -(M_imp // 2), (M_imp - 1) // 2
    return z_axis, lo, hi


def _sea_sign(gidx_ball, gidx_out, hole_combo, part_combo) -> int:
    """Sign relating the ordered-product configuration to the
    occupation-ordered state, by explicit operator application."""
    occupied = sorted(gidx_ball.tolist())
    sign = 1
    for h in reversed(hole_combo):
        g = int(gidx_ball[h])
        pos = occupied.index(g)
        if pos % 2:
            sign = -sign
        occupied.pop(pos)
    for p in reversed(part_combo):
        g = int(gidx_out[p])
        pos = int(np.searchsorted(occupied, g))
        if pos % 2:
            sign = -sign
        occupied.insert(pos, g)
    return sign


def enumerate_basis(lattice: MomentumLattice, ball: FermiBall, n: int,
                    M_imp: int, m_max: int, total_z,
                    cap: int = DEFAULT_BASIS_CAP) -> FockBasis:
    """Deterministic basis of one momentum block. `total_z` is the
    conserved integer total (impurity sum plus particles minus holes),
    one entry per axis, taken modulo the impurity band size M_imp: the
    impurity grid is periodic, so its momentum is defined as a residue.
    """
    if m_max not in (0, 1, 2, 3):
        raise ValueError("m_max must be between 0 and 3")
    if n < 1 or M_imp < 1:
        raise ValueError("need at least one impurity and one grid mode")
    d = lattice.d
    total_z = tuple(int(v) % M_imp for v in np.atleast_1d(total_z))
    if len(total_z) != d:
        raise ValueError("total momentum needs one entry per axis")

    mask = ball.member_mask
    gidx_ball = np.flatnonzero(mask).astype(np.int64)
    gidx_out = np.flatnonzero(~mask).astype(np.int64)
    ball_z = lattice.coords[gidx_ball].astype(np.int64)
    out_z = lattice.coords[gidx_out].astype(np.int64)
    ball_below = np.concatenate([[0], np.cumsum(mask)]).astype(np.int64)
    Nb, No = len(ball_z), len(out_z)

    z_axis, _, _ = _band_digits(M_imp)
    grids = np.meshgrid(*([z_axis] * (n * d)), indexing="ij")
    tau_z = np.stack([g.ravel() for g in grids], axis=1)
    T = tau_z.shape[0]
    tau_sum = tau_z.reshape(T, n, d).sum(axis=1)

    class_key: dict = {}
    class_members: list = []
    for t_id in range(T):
        key = tuple(int(v) % M_imp for v in tau_sum[t_id])
        if key not in class_key:
            class_key[key] = len(class_members)
            class_members.append([])
        class_members[class_key[key]].append(t_id)
    pos_in_class = np.empty(T, dtype=np.int64)
    for members in class_members:
        for pos, t_id in enumerate(members):
            pos_in_class[t_id] = pos

    holes_rows, parts_rows, m_rows, sigma_rows = [], [], [], []
    cfg_offset = [0]
    fiber_tau: list = []
    row_start = [0]
    total = np.array(total_z, dtype=np.int64)
    for m in range(m_max + 1):
        hole_combos = _colex_combinations(Nb, m)
        part_combos = _colex_combinations(No, m)
        cfg_offset.append(cfg_offset[-1] + len(hole_combos) * len(part_combos))
        for hc in hole_combos:
            ball_part = (ball_z[list(hc)].sum(axis=0) if m
                         else np.zeros(d, dtype=np.int64))
            for pc in part_combos:
                ferm = (out_z[list(pc)].sum(axis=0) if m
                        else np.zeros(d, dtype=np.int64)) - ball_part
                holes_rows.append(list(hc) + [-1] * (3 - m))
                parts_rows.append(list(pc) + [-1] * (3 - m))
                m_rows.append(m)
                sigma_rows.append(_sea_sign(gidx_ball, gidx_out, hc, pc))
                need = tuple(int(v) % M_imp for v in (total - ferm))
                members = (class_members[class_key[need]]
                           if need in class_key else [])
                fiber_tau.extend(members)
                row_start.append(row_start[-1] + len(members))
                if row_start[-1] > cap:
                    raise ValueError(
                        f"basis too large: over {cap} rows at "
                        f"configuration {len(m_rows)}")

    return FockBasis(
        lattice=lattice, ball=ball, n=n, M_imp=M_imp, m_max=m_max,
        total_z=total_z, ball_z=ball_z, out_z=out_z,
        gidx_ball=gidx_ball, gidx_out=gidx_out, ball_below=ball_below,
        holes=np.array(holes_rows, dtype=np.int64).reshape(-1, 3),
        parts=np.array(parts_rows, dtype=np.int64).reshape(-1, 3),
        m_of=np.array(m_rows, dtype=np.int64),
        sigma=np.array(sigma_rows, dtype=np.int64),
        cfg_offset=np.array(cfg_offset, dtype=np.int64),
        pos_in_class=pos_in_class,
        row_start=np.array(row_start, dtype=np.int64),
        row_tau=np.array(fiber_tau, dtype=np.int64),
        binom=_binom_table(max(Nb, No)))


@dataclass(frozen=True, eq=False)
class FockState:
    basis: FockBasis
    amplitudes: np.ndarray = field(repr=False)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def total_momentum(self) -> tuple:
        return self.basis.total_z


def hole_sector_weights(psi: FockState) -> np.ndarray:
    """Squared norm per pair-count sector, m = 0 .. m_max."""
    basis = psi.basis
    weights = np.zeros(basis.m_max + 1)
    np.add.at(weights, basis.m_of[basis.row_config()],
              np.abs(psi.amplitudes) ** 2)
    return weights


def project_holes(psi: FockState, m: int) -> FockState:
    """Component with exactly m particle-hole pairs."""
    if not 0 <= m <= psi.basis.m_max:
        raise ValueError("pair sector out of range")
    sector = psi.basis.m_of[psi.basis.row_config()]
    return replace(psi, amplitudes=np.where(sector == m, psi.amplitudes, 0.0))


def impurity_block_decomposition(xi: ImpurityState):
    """Split an impurity state by total momentum modulo the band size;
    returns (total_z, weight, restricted amplitudes) triples, heaviest
    first."""
    n, d, M = xi.n, xi.d, xi.M_imp
    z_axis, _, _ = _band_digits(M)
    grids = np.meshgrid(*([z_axis] * (n * d)), indexing="ij")
    sums = np.stack(
        [sum(grids[i * d + a] for i in range(n)) % M for a in range(d)],
        axis=-1).reshape(-1, d)
    amp = xi.amplitudes.ravel()
    keys, inverse = np.unique(sums, axis=0, return_inverse=True)
    blocks = []
    for idx in range(len(keys)):
        mask = inverse == idx
        weight = float((np.abs(amp[mask]) ** 2).sum())
        if weight > 0.0:
            restricted = np.where(mask, amp, 0.0).reshape(xi.amplitudes.shape)
            blocks.append((tuple(int(v) for v in keys[idx]), weight,
                           restricted))
    blocks.sort(key=lambda b: (-b[1], b[0]))
    return blocks


def _sea_fiber_vector(basis: FockBasis, flat_xi: np.ndarray) -> np.ndarray:
    """Amplitudes of xi tensor the undisturbed sea, on this block."""
    out = np.zeros(basis.dimension, dtype=complex)
    fs, fe = basis.row_start[0], basis.row_start[1]
    out[fs:fe] = flat_xi[basis.row_tau[fs:fe]]
    return out


def fermi_sea_state(basis: FockBasis, xi: ImpurityState) -> FockState:
    """Product of an impurity state with the undisturbed sea; the
    impurity content must lie inside the basis block."""
    if (xi.n, xi.d, xi.M_imp) != (basis.n, basis.d, basis.M_imp):
        raise ValueError("impurity grid does not match the basis")
    flat = xi.amplitudes.ravel()
    out = _sea_fiber_vector(basis, flat)
    covered = float(np.linalg.norm(out) ** 2)
    if abs(covered - float(np.linalg.norm(flat) ** 2)) > 1e-12:
        raise ValueError(
            "impurity state is not contained in this momentum block")
    return FockState(basis=basis, amplitudes=out)


# --- generator ---------------------------------------------------------------


@njit(cache=True)
def _occ_below(g, ball_below, holes_g, parts_g, m):
    """Occupied modes strictly below global index g."""
    cnt = ball_below[g]
    for a in range(m):
        if holes_g[a] < g:
            cnt -= 1
        if parts_g[a] < g:
            cnt += 1
    return cnt


@njit(cache=True)
def _apply_kernel(x, y, n, d, M_imp, m_max,
                  holes, parts, m_of, sigma, cfg_offset, binom,
                  ball_z, out_z, gidx_ball, gidx_out, ball_below,
                  pos_in_class, row_start, row_tau,
                  diag, A_create, A_ball, A_out,
                  tail_ball, tail_out, tail2_ball, tail2_out,
                  zsq_ball, zsq_out, create_mass, pref, horizon):
    C = m_of.size
    Nb = ball_z.shape[0]
    No = out_z.shape[0]
    max_tr = Nb * No + 3 * Nb + 3 * No + 9
    t_cfg = np.empty(max_tr, dtype=np.int64)
    t_amp = np.empty(max_tr, dtype=np.float64)
    t_dz = np.empty((max_tr, d), dtype=np.int64)
    holes_g = np.empty(3, dtype=np.int64)
    parts_g = np.empty(3, dtype=np.int64)
    new_h = np.empty(4, dtype=np.int64)
    new_p = np.empty(4, dtype=np.int64)
    act_b = np.empty(Nb, dtype=np.int64)
    digits = np.empty(n * d, dtype=np.int64)
    new_dig = np.empty(d, dtype=np.int64)
    inv_t2 = 4.0 / (horizon * horizon) if horizon > 0.0 else 0.0
    dropped = 0.0

    for c in range(C):
        fs = row_start[c]
        fe = row_start[c + 1]
        if fs == fe:
            continue
        any_amp = False
        for r in range(fs, fe):
            if x[r] != 0.0:
                any_amp = True
                break
        if not any_amp:
            continue
        m = m_of[c]
        for a in range(m):
            holes_g[a] = gidx_ball[holes[c, a]]
            parts_g[a] = gidx_out[parts[c, a]]

        n_tr = 0
        drop_rate = 0.0
        nb_act = 0
        for kb in range(Nb):
            is_hole = False
            for a in range(m):
                if holes[c, a] == kb:
                    is_hole = True
            if not is_hole:
                act_b[nb_act] = kb
                nb_act += 1
        raw_tail = 0.0
        for ib in range(nb_act):
            raw_tail += tail_ball[act_b[ib]]
        for a in range(m):
            raw_tail += tail_out[parts[c, a]]

        # pair creation: sea fermion at ball mode kb scatters out to lo
        if m == m_max:
            drop_rate += create_mass[c]
        else:
            for ib in range(nb_act):
                kb = act_b[ib]
                for lo in range(No):
                    occupied = False
                    for a in range(m):
                        if parts[c, a] == lo:
                            occupied = True
                    if occupied:
                        continue
                    amp = A_create[kb, lo]
                    if amp == 0.0:
                        continue
                    g_k = gidx_ball[kb]
                    g_l = gidx_out[lo]
                    par = (_occ_below(g_k, ball_below, holes_g, parts_g, m)
                           + _occ_below(g_l, ball_below, holes_g, parts_g, m))
                    if g_k < g_l:
                        par += 1
                    cnt = 0
                    for a in range(m):
                        if holes[c, a] < kb:
                            new_h[cnt] = holes[c, a]
                            cnt += 1
                    new_h[cnt] = kb
                    cnt += 1
                    for a in range(m):
                        if holes[c, a] > kb:
                            new_h[cnt] = holes[c, a]
                            cnt += 1
                    cnt = 0
                    for a in range(m):
                        if parts[c, a] < lo:
                            new_p[cnt] = parts[c, a]
                            cnt += 1
                    new_p[cnt] = lo
                    cnt += 1
                    for a in range(m):
                        if parts[c, a] > lo:
                            new_p[cnt] = parts[c, a]
                            cnt += 1
                    rh = 0
                    rp = 0
                    for a in range(m + 1):
                        rh += binom[new_h[a], a + 1]
                        rp += binom[new_p[a], a + 1]
                    c2 = cfg_offset[m + 1] + rh * binom[No, m + 1] + rp
                    t_cfg[n_tr] = c2
                    sgn = -1.0 if (par & 1) else 1.0
                    t_amp[n_tr] = amp * sgn * sigma[c] * sigma[c2]
                    for a in range(d):
                        t_dz[n_tr, a] = ball_z[kb, a] - out_z[lo, a]
                    n_tr += 1

        # hole relocation: sea fermion at kb fills the hole at hb
        for ih in range(m):
            hb = holes[c, ih]
            for ib in range(nb_act):
                kb = act_b[ib]
                amp = A_ball[kb, hb]
                if amp == 0.0:
                    continue
                g_k = gidx_ball[kb]
                g_l = gidx_ball[hb]
                par = (_occ_below(g_k, ball_below, holes_g, parts_g, m)
                       + _occ_below(g_l, ball_below, holes_g, parts_g, m))
                if g_k < g_l:
                    par += 1
                cnt = 0
                for a in range(m):
                    if a != ih and holes[c, a] < kb:
                        new_h[cnt] = holes[c, a]
                        cnt += 1
                new_h[cnt] = kb
                cnt += 1
                for a in range(m):
                    if a != ih and holes[c, a] > kb:
                        new_h[cnt] = holes[c, a]
                        cnt += 1
                rh = 0
                rp = 0
                for a in range(m):
                    rh += binom[new_h[a], a + 1]
                    rp += binom[parts[c, a], a + 1]
                c2 = cfg_offset[m] + rh * binom[No, m] + rp
                t_cfg[n_tr] = c2
                sgn = -1.0 if (par & 1) else 1.0
                t_amp[n_tr] = amp * sgn * sigma[c] * sigma[c2]
                for a in range(d):
                    t_dz[n_tr, a] = ball_z[kb, a] - ball_z[hb, a]
                n_tr += 1

        # particle relocation: particle at pb hops to empty out mode lo
        for ip in range(m):
            pb = parts[c, ip]
            for lo in range(No):
                occupied = False
                for a in range(m):
                    if parts[c, a] == lo:
                        occupied = True
                if occupied:
                    continue
                amp = A_out[lo, pb]
                if amp == 0.0:
                    continue
                g_k = gidx_out[pb]
                g_l = gidx_out[lo]
                par = (_occ_below(g_k, ball_below, holes_g, parts_g, m)
                       + _occ_below(g_l, ball_below, holes_g, parts_g, m))
                if g_k < g_l:
                    par += 1
                cnt = 0
                for a in range(m):
                    if a != ip and parts[c, a] < lo:
                        new_p[cnt] = parts[c, a]
                        cnt += 1
                new_p[cnt] = lo
                cnt += 1
                for a in range(m):
                    if a != ip and parts[c, a] > lo:
                        new_p[cnt] = parts[c, a]
                        cnt += 1
                rh = 0
                rp = 0
                for a in range(m):
                    rh += binom[holes[c, a], a + 1]
                    rp += binom[new_p[a], a + 1]
                c2 = cfg_offset[m] + rh * binom[No, m] + rp
                t_cfg[n_tr] = c2
                sgn = -1.0 if (par & 1) else 1.0
                t_amp[n_tr] = amp * sgn * sigma[c] * sigma[c2]
                for a in range(d):
                    t_dz[n_tr, a] = out_z[pb, a] - out_z[lo, a]
                n_tr += 1

        # pair annihilation: particle at pb falls back into the hole hb
        for ip in range(m):
            pb = parts[c, ip]
            for ih in range(m):
                hb = holes[c, ih]
                amp = A_create[hb, pb]
                if amp == 0.0:
                    continue
                g_k = gidx_out[pb]
                g_l = gidx_ball[hb]
                par = (_occ_below(g_k, ball_below, holes_g, parts_g, m)
                       + _occ_below(g_l, ball_below, holes_g, parts_g, m))
                if g_k < g_l:
                    par += 1
                cnt = 0
                for a in range(m):
                    if a != ih:
                        new_h[cnt] = holes[c, a]
                        cnt += 1
                cnt = 0
                for a in range(m):
                    if a != ip:
                        new_p[cnt] = parts[c, a]
                        cnt += 1
                rh = 0
                rp = 0
                for a in range(m - 1):
                    rh += binom[new_h[a], a + 1]
                    rp += binom[new_p[a], a + 1]
                c2 = cfg_offset[m - 1] + rh * binom[No, m - 1] + rp
                t_cfg[n_tr] = c2
                sgn = -1.0 if (par & 1) else 1.0
                t_amp[n_tr] = amp * sgn * sigma[c] * sigma[c2]
                for a in range(d):
                    t_dz[n_tr, a] = out_z[pb, a] - ball_z[hb, a]
                n_tr += 1

        # each transition acts once per impurity on every fiber row
        for r in range(fs, fe):
            xr = x[r]
            y[r] += diag[r] * xr
            if xr == 0.0:
                continue
            ax2 = xr.real * xr.real + xr.imag * xr.imag
            base = row_tau[r]
            for a in range(n * d - 1, -1, -1):
                digits[a] = base % M_imp
                base //= M_imp
            if horizon > 0.0:
                tail_term = 0.0
                for i in range(n):
                    pcol = 0
                    for a in range(d):
                        pcol = pcol * M_imp + digits[i * d + a]
                    for ib in range(nb_act):
                        kb = act_b[ib]
                        tw = inv_t2 * tail2_ball[kb, pcol]
                        tail_term += tw if tw < tail_ball[kb] \
                            else tail_ball[kb]
                    for a in range(m):
                        pb = parts[c, a]
                        tw = inv_t2 * tail2_out[pb, pcol]
                        tail_term += tw if tw < tail_out[pb] \
                            else tail_out[pb]
            else:
                tail_term = n * raw_tail
            dropped += (tail_term + n * drop_rate) * pref * pref * ax2
            for it in range(n_tr):
                c2 = t_cfg[it]
                val = t_amp[it] * pref
                for i in range(n):
                    for a in range(d):
                        new_dig[a] = (digits[i * d + a]
                                      + t_dz[it, a]) % M_imp
                    t2 = 0
                    for a in range(n * d):
                        if i * d <= a and a < (i + 1) * d:
                            t2 = t2 * M_imp + new_dig[a - i * d]
                        else:
                            t2 = t2 * M_imp + digits[a]
                    r2 = row_start[c2] + pos_in_class[t2]
                    y[r2] += val * xr
    return dropped


@dataclass(frozen=True, eq=False)
class MicroHamiltonian:
    """Shifted generator on one basis block: impurity kinetic plus w,
    excitation kinetic relative to the filled ball, and the
    impurity-gas coupling with amplitude lam / L^d per channel."""

    basis: FockBasis
    lam: float
    spec_id: str
    diag: np.ndarray = field(repr=False)
    A_create: np.ndarray = field(repr=False)
    A_ball: np.ndarray = field(repr=False)
    A_out: np.ndarray = field(repr=False)
    tail_ball: np.ndarray = field(repr=False)
    tail_out: np.ndarray = field(repr=False)
    tail2_ball: np.ndarray = field(repr=False)
    tail2_out: np.ndarray = field(repr=False)
    zsq_ball: np.ndarray = field(repr=False)
    zsq_out: np.ndarray = field(repr=False)
    create_mass: np.ndarray = field(repr=False)
    pref: float
    w_pairs: tuple = field(repr=False, default=())


def _hat_matrix(spec: PotentialSpec, za, zb, spacing: float) -> np.ndarray:
    diff = (za[:, None, :] - zb[None, :, :]) * spacing
    return np.asarray(spec.hat(np.sqrt((diff**2).sum(axis=2))), dtype=float)


def _cutoff_tail_mass(spec: PotentialSpec, source_z,
                      lattice: MomentumLattice, M_imp: int):
    """Squared coupling into lattice modes beyond the cutoff, enumerated
    over a guard shell; exact when the profile's support fits inside the
    shell, an estimate otherwise.

    Returns the raw mass per source mode together with a table of the
    same sums divided by the squared energy detuning of each channel,
    resolved over the impurity momentum that absorbs the recoil. Rows
    follow the source modes, columns the digit-major impurity momentum
    tuples of the band. The table feeds the off-shell attenuation used
    when a propagation horizon is known.
    """
    d, L = lattice.d, lattice.L
    spacing = 2.0 * np.pi / L
    pad = _TAIL_PAD
    if np.isfinite(spec.support_radius):
        pad = min(pad, float(spec.support_radius) + spacing)
    big = build_lattice(d, L, lattice.cutoff + pad)
    norms = np.sqrt((big.coords.astype(float)**2).sum(axis=1)) * spacing
    shell = big.coords[norms > lattice.cutoff * (1.0 + 1e-12)]
    ns = len(source_z)
    if shell.shape[0] == 0:
        return np.zeros(ns), np.zeros((ns, M_imp**d))
    src = np.asarray(source_z)
    amp_sq = _hat_matrix(spec, src, shell.astype(np.int64), spacing) ** 2
    z_axis, _, _ = _band_digits(M_imp)
    digit_p = spacing * np.stack(
        [g.ravel() for g in np.meshgrid(*([z_axis] * d), indexing="ij")],
        axis=1).astype(float)
    tail2 = np.empty((ns, M_imp**d))
    shell_en = ((shell.astype(float) * spacing) ** 2).sum(axis=1)
    for s in range(ns):
        delta = (src[s][None, :] - shell).astype(float) * spacing
        ferm_de = shell_en - float(((src[s].astype(float) * spacing)**2
                                    ).sum())
        recoil = (2.0 * digit_p @ delta.T) + (delta**2).sum(axis=1)[None, :]
        de = np.maximum(spacing**2, np.abs(ferm_de[None, :] + recoil))
        tail2[s] = (amp_sq[s][None, :] / de**2).sum(axis=1)
    return amp_sq.sum(axis=1), tail2


def build_hamiltonian(basis: FockBasis, lam: float, spec: PotentialSpec,
                      w_spec: ImpurityPotentialSpec | None = None
                      ) -> MicroHamiltonian:
    from .mediated import spec_label

    lattice = basis.lattice
    d, L = lattice.d, lattice.L
    spacing = lattice.spacing
    A_create = _hat_matrix(spec, basis.ball_z, basis.out_z, spacing)
    A_ball = _hat_matrix(spec, basis.ball_z, basis.ball_z, spacing)
    np.fill_diagonal(A_ball, 0.0)
    A_out = _hat_matrix(spec, basis.out_z, basis.out_z, spacing)
    np.fill_diagonal(A_out, 0.0)

    C = basis.config_count
    ferm_energy = np.zeros(C)
    create_mass = np.zeros(C)
    for c in range(C):
        m = basis.m_of[c]
        hs = basis.holes[c, :m]
        ps = basis.parts[c, :m]
        ferm_energy[c] = spacing**2 * float(
            (basis.out_z[ps].astype(float)**2).sum()
            - (basis.ball_z[hs].astype(float)**2).sum())
        keep_b = np.ones(len(basis.ball_z), dtype=bool)
        keep_b[hs] = False
        keep_o = np.ones(len(basis.out_z), dtype=bool)
        keep_o[ps] = False
        create_mass[c] = float((A_create[keep_b][:, keep_o] ** 2).sum())

    z_axis, _, _ = _band_digits(basis.M_imp)
    grids = np.meshgrid(*([z_axis] * (basis.n * d)), indexing="ij")
    kin_tau = sum(((g.ravel().astype(float) * spacing) ** 2) for g in grids)
    diag = (np.repeat(ferm_energy, np.diff(basis.row_start))
            + kin_tau[basis.row_tau])

    tail_ball, tail2_ball = _cutoff_tail_mass(spec, basis.ball_z, lattice,
                                              basis.M_imp)
    tail_out, tail2_out = _cutoff_tail_mass(spec, basis.out_z, lattice,
                                            basis.M_imp)
    zsq_ball = ((basis.ball_z.astype(float) * spacing) ** 2).sum(axis=1)
    zsq_out = ((basis.out_z.astype(float) * spacing) ** 2).sum(axis=1)

    w_pairs = ()
    if w_spec is not None and w_spec.kind != "zero":
        w_pairs = _impurity_coupling(basis, w_spec)

    return MicroHamiltonian(
        basis=basis, lam=float(lam), spec_id=spec_label(spec), diag=diag,
        A_create=A_create, A_ball=A_ball, A_out=A_out,
        tail_ball=tail_ball, tail_out=tail_out,
        tail2_ball=tail2_ball, tail2_out=tail2_out,
        zsq_ball=zsq_ball, zsq_out=zsq_out, create_mass=create_mass,
        pref=float(lam) / L**d, w_pairs=w_pairs)


def _impurity_coupling(basis: FockBasis, w_spec: ImpurityPotentialSpec):
    """Momentum-transfer table of the direct pair potential w on the
    impurity tuples, from its discrete Fourier coefficients on the
    position grid. Transfers wrap around the periodic band, exactly as
    pointwise multiplication on the position grid does, so the action
    matches the effective propagator's and momentum classes (residues
    modulo the band size) stay closed."""
    n, d, M, L = basis.n, basis.d, basis.M_imp, basis.lattice.L
    y = np.arange(M) * (L / M)
    disp = [np.minimum(g, L - g) for g in np.meshgrid(*([y] * d),
                                                      indexing="ij")]
    w_samples = np.asarray(
        w_spec.value(np.sqrt(sum(v**2 for v in disp)).ravel())
    ).reshape((M,) * d)
    w_hat = np.fft.fftn(w_samples) / M**d

    used = np.unique(basis.row_tau)
    entries = []
    for t_id in used:
        rem, digs = int(t_id), []
        for _ in range(n * d):
            digs.append(rem % M)
            rem //= M
        digs = np.array(digs[::-1]).reshape(n, d)
        targets = []
        for i in range(n):
            for j in range(i + 1, n):
                for flat_q in range(M**d):
                    q = np.array(np.unravel_index(flat_q, (M,) * d))
                    coeff = w_hat[tuple(q)]
                    if abs(coeff) < 1e-15:
                        continue
                    d2 = digs.copy()
                    d2[i] = (d2[i] + q) % M
                    d2[j] = (d2[j] - q) % M
                    t2 = 0
                    for v in d2.ravel():
                        t2 = t2 * M + int(v)
                    targets.append((t2, complex(coeff)))
        if targets:
            entries.append((int(t_id), tuple(targets)))
    return tuple(entries)


def _apply_w(H: MicroHamiltonian, x: np.ndarray) -> np.ndarray:
    basis = H.basis
    transfers = dict(H.w_pairs)
    row_cfg = basis.row_config()
    y = np.zeros_like(x)
    for r in range(x.size):
        if x[r] == 0.0:
            continue
        lst = transfers.get(int(basis.row_tau[r]))
        if lst is None:
            continue
        base = basis.row_start[row_cfg[r]]
        for t2, coeff in lst:
            y[base + basis.pos_in_class[t2]] += coeff * x[r]
    return y


def apply_H(H: MicroHamiltonian, psi: FockState, with_dropped: bool = False,
            horizon: float = 0.0):
    """Matrix-free action of the shifted generator on a block state.

    With `with_dropped` the squared out-of-basis coupling flux is
    returned alongside (a diagonal estimate; interference between
    dropped channels is not resolved). A positive `horizon` attenuates
    each dropped channel by the first-order propagation bound
    min(1, 2 / (|energy detuning| * horizon))^2, the worst case of the
    oscillatory time integral a detuned channel accumulates over that
    horizon; with the default the raw flux is reported.
    """
    basis = H.basis
    if psi.basis is not basis:
        raise ValueError("state does not live on this Hamiltonian's basis")
    x = np.ascontiguousarray(psi.amplitudes, dtype=complex)
    y = np.zeros_like(x)
    dropped = _apply_kernel(
        x, y, basis.n, basis.d, basis.M_imp, basis.m_max,
        basis.holes, basis.parts, basis.m_of, basis.sigma,
        basis.cfg_offset, basis.binom, basis.ball_z, basis.out_z,
        basis.gidx_ball, basis.gidx_out, basis.ball_below,
        basis.pos_in_class, basis.row_start, basis.row_tau,
        H.diag, H.A_create, H.A_ball, H.A_out,
        H.tail_ball, H.tail_out, H.tail2_ball, H.tail2_out,
        H.zsq_ball, H.zsq_out, H.create_mass, H.pref, float(horizon))
    if H.w_pairs:
        y = y + _apply_w(H, x)
    out = FockState(basis=basis, amplitudes=y)
    return (out, float(dropped)) if with_dropped else out


def interaction_only(H: MicroHamiltonian) -> MicroHamiltonian:
    """The coupling term alone (no kinetic diagonal, no w)."""
    return replace(H, diag=np.zeros_like(H.diag), w_pairs=())


# --- propagation -------------------------------------------------------------


def _lanczos_step(H: MicroHamiltonian, v: np.ndarray, dt: float, tol: float,
                  horizon: float = 0.0):
    """One Krylov approximation of e^{-iH dt} v with full
    reorthogonalization; returns (vector or None, error estimate,
    out-of-basis coupling rate at the step's start)."""
    beta0 = float(np.linalg.norm(v))
    V = [v / beta0]
    alphas: list = []
    betas: list = []
    dropped_rate = 0.0
    err = np.inf
    for j in range(_MAX_KRYLOV):
        out, dr = apply_H(H, FockState(basis=H.basis, amplitudes=V[j]),
                          with_dropped=True, horizon=horizon)
        if j == 0:
            dropped_rate = math.sqrt(max(dr, 0.0))
        u = out.amplitudes
        a = float(np.real(np.vdot(V[j], u)))
        u = u - a * V[j]
        if j > 0:
            u = u - betas[-1] * V[j - 1]
        for q in V:
            u = u - np.vdot(q, u) * q
        b = float(np.linalg.norm(u))
        alphas.append(a)
        betas.append(b)
        evals, evecs = eigh_tridiagonal(np.array(alphas),
                                        np.array(betas[:-1]))
        small = evecs @ (np.exp(-1j * evals * dt) * evecs[0])
        err = abs(b * small[-1] * dt)
        if err <= tol or b < 1e-14:
            w = beta0 * (np.stack(V, axis=1) @ small)
            return w, err, dropped_rate
        V.append(u / b)
    return None, err, dropped_rate


def evolve_full(H: MicroHamiltonian, psi: FockState, t: float,
                krylov_tol: float = DEFAULT_KRYLOV_TOL,
                return_diagnostics: bool = False):
    """Krylov propagation with adaptive substep halving; the dropped
    weight integrates the out-of-basis coupling rate along the path,
    each channel attenuated by its off-shell propagation bound over the
    full horizon |t|."""
    if psi.basis is not H.basis:
        raise ValueError("state does not live on this Hamiltonian's basis")
    if abs(psi.norm() - 1.0) > 1e-9:
        raise ValueError("initial state must be normalized")
    if t == 0.0:
        if return_diagnostics:
            return psi, {"dropped_weight": 0.0, "substeps": 0}
        return psi
    diag_span = float(H.diag.max() - H.diag.min()) + 1e-12
    dt = math.copysign(min(abs(t), 20.0 / diag_span), t)
    remaining = float(t)
    v = psi.amplitudes.astype(complex)
    dropped_integral = 0.0
    substeps = 0
    while abs(remaining) > 1e-14 * abs(t):
        step = math.copysign(min(abs(dt), abs(remaining)), t)
        w, err, rate = _lanczos_step(H, v, step, krylov_tol, horizon=abs(t))
        if w is None:
            if abs(step) < abs(t) * _MIN_SUBSTEP_FRACTION:
                raise ValueError(
                    f"propagation stalled: residual {err:.3e} above "
                    "tolerance at the minimal substep")
            dt = step / 2.0
            continue
        dropped_integral += abs(step) * rate
        v = w
        remaining -= step
        substeps += 1
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"propagation lost unitarity: norm {norm:.12f}")
    out = FockState(basis=psi.basis, amplitudes=v / norm)
    if return_diagnostics:
        return out, {"dropped_weight": float(dropped_integral),
                     "substeps": substeps}
    return out


# --- theorem-level comparison ------------------------------------------------


def _flat_table(ball: FermiBall, L: float, d: int):
    from .mediated import PotentialTable
    reach = 0.5 * L * np.sqrt(d) + 1.0
    grid = np.linspace(0.0, reach, 8)
    return PotentialTable(d=d, k_F=ball.k_F, r_grid=grid,
                          values=np.zeros(8), err_est=np.zeros(8),
                          method="zero", spec_id="zero")


@dataclass(frozen=True)
class DeficitResult:
    value: float
    dropped_weight: float
    block_weights: tuple
    dimension: int


def theorem1_deficit(lattice: MomentumLattice, ball: FermiBall,
                     xi0: ImpurityState, lam: float, t: float,
                     spec: PotentialSpec, table, m_max: int = 3,
                     w_spec: ImpurityPotentialSpec | None = None,
                     krylov_tol: float = DEFAULT_KRYLOV_TOL,
                     block_weight_floor: float = 1e-14) -> DeficitResult:
    """Distance between the truncated microscopic evolution and the
    effective product evolution, in the shifted picture where the
    reference carries no residual phase.

    Momentum blocks below `block_weight_floor` in weight are not
    propagated; their weight is charged to the deficit and recorded in
    the dropped diagnostic.
    """
    from . import effective as eff

    if w_spec is None:
        w_spec = zero_impurity()
    n, d, M_imp, L = xi0.n, xi0.d, xi0.M_imp, lattice.L
    if table is None:
        if lam != 0.0:
            raise ValueError(
                "a mediated potential table is required at nonzero coupling")
        table = _flat_table(ball, L, d)
    H_eff = eff.build_effective_hamiltonian(n, d, L, M_imp, lam, table,
                                            w_spec)
    xi_t = eff.evolve_effective(xi0, H_eff, t)
    flat_xi_t = xi_t.amplitudes.ravel()

    deficit_sq = 0.0
    ref_covered = 0.0
    skipped_ref = 0.0
    dropped = 0.0
    dim_total = 0
    weights = []
    for total_z, weight, restricted in impurity_block_decomposition(xi0):
        weights.append(weight)
        if weight < block_weight_floor:
            dropped += weight
            deficit_sq += weight
            continue
        basis = enumerate_basis(lattice, ball, n, M_imp, m_max, total_z)
        dim_total += basis.dimension
        H = build_hamiltonian(basis, lam, spec, w_spec=w_spec)
        block_xi = ImpurityState(
            n=n, d=d, L=L, M_imp=M_imp,
            amplitudes=restricted / math.sqrt(weight))
        psi_t, diaginfo = evolve_full(H, fermi_sea_state(basis, block_xi), t,
                                      krylov_tol=krylov_tol,
                                      return_diagnostics=True)
        dropped += math.sqrt(weight) * diaginfo["dropped_weight"]
        ref_block = _sea_fiber_vector(basis, flat_xi_t)
        ref_covered += float(np.linalg.norm(ref_block) ** 2)
        diff = math.sqrt(weight) * psi_t.amplitudes - ref_block
        deficit_sq += float(np.vdot(diff, diff).real)
    # reference weight in blocks never propagated (band aliasing of the
    # effective pair term can move a little mass across blocks)
    deficit_sq += max(0.0, float(np.linalg.norm(flat_xi_t) ** 2)
                      - ref_covered - skipped_ref)
    return DeficitResult(value=float(np.sqrt(max(deficit_sq, 0.0))),
                         dropped_weight=float(dropped),
                         block_weights=tuple(weights),
                         dimension=dim_total)


def duhamel_rate(lattice: MomentumLattice, ball: FermiBall,
                 xi0: ImpurityState, lam: float, spec: PotentialSpec,
                 table, m_max: int = 3,
                 w_spec: ImpurityPotentialSpec | None = None) -> float:
    """Norm of (coupling plus mediated-shift mismatch) applied to the
    product initial state; deficit growth is bounded by t times this
    rate to first order."""
    from .effective import pair_distance_sum

    if w_spec is None:
        w_spec = zero_impurity()
    n, d, M_imp, L = xi0.n, xi0.d, xi0.M_imp, lattice.L
    if table is None:
        table = _flat_table(ball, L, d)

    mismatch_grid = (lam**2 * pair_distance_sum(
        n, d, L, M_imp, lambda r: table.w_value(r))
        + n * lam**2 * table.w_value(0.0))
    xi_pos = np.fft.ifftn(xi0.amplitudes, norm="ortho")
    mism_sq = float(np.linalg.norm(mismatch_grid * xi_pos) ** 2)

    coupling_sq = 0.0
    for total_z, weight, restricted in impurity_block_decomposition(xi0):
        basis = enumerate_basis(lattice, ball, n, M_imp, m_max, total_z)
        H = build_hamiltonian(basis, lam, spec, w_spec=w_spec)
        block_xi = ImpurityState(n=n, d=d, L=L, M_imp=M_imp,
                                 amplitudes=restricted / math.sqrt(weight))
        psi0 = fermi_sea_state(basis, block_xi)
        v_psi = apply_H(interaction_only(H), psi0)
        coupling_sq += weight * float(np.linalg.norm(v_psi.amplitudes) ** 2)
    return float(np.sqrt(coupling_sq + mism_sq))

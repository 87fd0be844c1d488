"""TPFA discretization, residuals and Jacobians for the oil-water model.

Unknowns are ordered per active cell as ``(pressure, water saturation)``.
Each cell contributes two rows: the total (oil + water) balance first, then
the water balance. The combination keeps a nonzero pressure pivot even when
water is immobile, which ILU(0) needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .model import FluidModel, SimulationCase, WellSpec

# m3/day per (mD * m2 / m * bar / cP)
DARCY = 0.00852702


@dataclass
class SimState:
    p: np.ndarray
    sw: np.ndarray

    def copy(self) -> "SimState":
        return SimState(self.p.copy(), self.sw.copy())


def harmonic_transmissibility(k1, k2, d1, d2, area):
    """Face transmissibility from the two half-cell conductances."""
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    return DARCY * area / (0.5 * d1 / k1 + 0.5 * d2 / k2)


class _Pattern:
    """Fixed sparsity with a precomputed COO-to-CSR data permutation."""

    def __init__(self, rows, cols, n):
        order = np.lexsort((cols, rows))
        self.order = order
        self.indices = cols[order].astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int32)
        self.n = n

        self.indptr64 = self.indptr.astype(np.int64)
        self.indices64 = self.indices.astype(np.int64)

    def matrix(self, data) -> sp.csr_matrix:
        return sp.csr_matrix((data[self.order], self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def arrays(self, data):
        """``(indptr, indices, data)`` of the CSR matrix without building it."""
        return self.indptr64, self.indices64, data[self.order]


class Discretization:
    """Static geometry of a case restricted to its active cells."""

    def __init__(self, case: SimulationCase):
        g = case.grid
        self.case = case
        self.fluid = case.fluid
        act = np.flatnonzero(g.active_mask)
        self.active = act
        self.n = act.size
        local = np.full(g.total_blocks, -1, dtype=np.int64)
        local[act] = np.arange(self.n)
        self.local = local
        self.volume = np.full(self.n, g.cell_volume)
        self.phi0 = g.porosity[act].copy()

        a_list, b_list, t_list = [], [], []
        idx = np.arange(g.total_blocks).reshape(g.ny, g.nx)
        if g.nx > 1:
            left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
            t = harmonic_transmissibility(g.perm_x[left], g.perm_x[right], g.dx, g.dx, g.dy * g.dz)
            a_list.append(left), b_list.append(right), t_list.append(t)
        if g.ny > 1:
            low, up = idx[:-1, :].ravel(), idx[1:, :].ravel()
            t = harmonic_transmissibility(g.perm_y[low], g.perm_y[up], g.dy, g.dy, g.dx * g.dz)
            a_list.append(low), b_list.append(up), t_list.append(t)
        if a_list:
            fa, fb, ft = (np.concatenate(v) for v in (a_list, b_list, t_list))
            keep = g.active_mask[fa] & g.active_mask[fb]
            self.fa, self.fb, self.trans = local[fa[keep]], local[fb[keep]], ft[keep]
        else:
            self.fa = self.fb = np.zeros(0, dtype=np.int64)
            self.trans = np.zeros(0)
        self.n_faces = self.fa.size
        self.wells = list(case.wells)
        self.well_cells = np.array([local[w.cell] for w in case.wells], dtype=np.int64)
        self.fluid_vec = _fluid_vector(case.fluid)
        self.vphi0 = self.volume * self.phi0

        n, fa, fb = self.n, self.fa, self.fb
        # fully implicit: 2x2 blocks on the diagonal and on both face couplings
        blk_r = np.concatenate([np.arange(n), fa, fb])
        blk_c = np.concatenate([np.arange(n), fb, fa])
        r2 = (2 * blk_r[:, None] + np.array([0, 0, 1, 1])[None, :]).ravel()
        c2 = (2 * blk_c[:, None] + np.array([0, 1, 0, 1])[None, :]).ravel()
        self.pattern_fi = _Pattern(r2, c2, 2 * n)
        self.pattern_p = _Pattern(blk_r, blk_c, n)

    def initial_state(self) -> SimState:
        c = self.case
        return SimState(c.p_init[self.active].copy(), c.sw_init[self.active].copy())


# fluid and rock properties ------------------------------------------------

def fluid_props(p, sw, fluid: FluidModel):
    dp = p - fluid.p_ref
    span = 1.0 - fluid.swc - fluid.sor
    se_raw = (sw - fluid.swc) / span
    se = np.clip(se_raw, 0.0, 1.0)
    inside = (se_raw > 0.0) & (se_raw < 1.0)
    dse = np.where(inside, 1.0 / span, 0.0)
    krw = fluid.krw_max * se ** fluid.n_w
    dkrw = fluid.krw_max * fluid.n_w * se ** (fluid.n_w - 1.0) * dse
    kro = fluid.kro_max * (1.0 - se) ** fluid.n_o
    dkro = -fluid.kro_max * fluid.n_o * (1.0 - se) ** (fluid.n_o - 1.0) * dse
    return {
        "bw": 1.0 + fluid.c_w * dp,
        "bo": 1.0 + fluid.c_o * dp,
        "lw": krw / fluid.mu_w,
        "lo": kro / fluid.mu_o,
        "dlw": dkrw / fluid.mu_w,
        "dlo": dkro / fluid.mu_o,
    }


def pore_factor(p, fluid: FluidModel):
    return 1.0 + fluid.c_r * (p - fluid.p_ref)


# wells --------------------------------------------------------------------

@numba.njit(cache=True)
def _cell_props(p, sw, fl):
    n = p.size
    bw, bo = np.empty(n), np.empty(n)
    lw, lo, dlw, dlo = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        bw[i] = 1.0 + fl[0] * (p[i] - fl[3])
        bo[i] = 1.0 + fl[1] * (p[i] - fl[3])
        lw[i], lo[i], dlw[i], dlo[i] = _corey(sw[i], fl[4], fl[5], fl[6], fl[7], fl[8], fl[9], fl[10], fl[11])
    return bw, bo, lw, lo, dlw, dlo


def well_terms(disc: Discretization, p, sw, t: float, lagged_sw=None):
    """Per-well phase production rates (injection negative) and derivatives.

    Returns ``(qw, qo, dqw_dp, dqw_ds, dqo_dp, dqo_ds)`` indexed by well.
    With ``lagged_sw`` the mobilities are frozen at that saturation, as the
    IMPES pressure equation requires (saturation derivatives are then zero).
    """
    fl = disc.fluid
    nw = len(disc.wells)
    out = np.zeros((6, nw))
    if nw == 0:
        return out
    c = disc.well_cells
    pc = p[c]
    s_mob = sw[c] if lagged_sw is None else lagged_sw[c]
    bw, bo, lw, lo, dlw, dlo = _cell_props(pc, s_mob, disc.fluid_vec)
    if lagged_sw is not None:
        dlw, dlo = np.zeros(nw), np.zeros(nw)
    mw, mo = lw * bw, lo * bo
    dmw_dp, dmo_dp = lw * fl.c_w, lo * fl.c_o
    dmw_ds, dmo_ds = dlw * bw, dlo * bo
    for k, w in enumerate(disc.wells):
        ctl = w.control_at(t)
        if ctl is None:
            continue
        wi = w.well_index
        if w.kind == "producer":
            if ctl.mode == "bhp":
                dd = pc[k] - ctl.target
                if dd >= 0:
                    out[0, k] = wi * mw[k] * dd
                    out[1, k] = wi * mo[k] * dd
                    out[2, k] = wi * (dmw_dp[k] * dd + mw[k])
                    out[3, k] = wi * dmw_ds[k] * dd
                    out[4, k] = wi * (dmo_dp[k] * dd + mo[k])
                    out[5, k] = wi * dmo_ds[k] * dd
            else:
                mt = mw[k] + mo[k]
                if mt > 0:
                    q = ctl.target
                    fw, fo = mw[k] / mt, mo[k] / mt
                    dmt_dp, dmt_ds = dmw_dp[k] + dmo_dp[k], dmw_ds[k] + dmo_ds[k]
                    out[0, k] = q * fw
                    out[1, k] = q * fo
                    out[2, k] = q * (dmw_dp[k] * mt - mw[k] * dmt_dp) / mt**2
                    out[3, k] = q * (dmw_ds[k] * mt - mw[k] * dmt_ds) / mt**2
                    out[4, k] = q * (dmo_dp[k] * mt - mo[k] * dmt_dp) / mt**2
                    out[5, k] = q * (dmo_ds[k] * mt - mo[k] * dmt_ds) / mt**2
        else:
            if ctl.mode == "rate":
                out[0, k] = -ctl.target
            else:
                dd = ctl.target - pc[k]
                if dd >= 0:
                    lt = lw[k] + lo[k]
                    dlt = dlw[k] + dlo[k]
                    out[0, k] = -wi * lt * bw[k] * dd
                    out[2, k] = -wi * (lt * fl.c_w * dd - lt * bw[k])
                    out[3, k] = -wi * dlt * bw[k] * dd
    return out


# fully implicit -----------------------------------------------------------

def accumulation(disc: Discretization, state: SimState):
    pf = pore_factor(state.p, disc.fluid)
    pr = fluid_props(state.p, state.sw, disc.fluid)
    pv = disc.volume * disc.phi0 * pf
    return pv * pr["bw"] * state.sw, pv * pr["bo"] * (1.0 - state.sw)


def phase_residuals(disc: Discretization, state: SimState, old: SimState, dt: float, t: float):
    """Water and oil mass residuals per cell in reference m3/day."""
    aw, ao = accumulation(disc, state)
    aw0, ao0 = accumulation(disc, old)
    rw = (aw - aw0) / dt
    ro = (ao - ao0) / dt
    p, fa, fb = state.p, disc.fa, disc.fb
    if disc.n_faces:
        pr = fluid_props(p, state.sw, disc.fluid)
        mw, mo = pr["lw"] * pr["bw"], pr["lo"] * pr["bo"]
        dpf = p[fa] - p[fb]
        up = np.where(dpf >= 0, fa, fb)
        fw = disc.trans * mw[up] * dpf
        fo = disc.trans * mo[up] * dpf
        n = disc.n
        rw += np.bincount(fa, fw, n) - np.bincount(fb, fw, n)
        ro += np.bincount(fa, fo, n) - np.bincount(fb, fo, n)
    wt = well_terms(disc, p, state.sw, t)
    np.add.at(rw, disc.well_cells, wt[0])
    np.add.at(ro, disc.well_cells, wt[1])
    return rw, ro


def residual_vector(disc: Discretization, state: SimState, old: SimState, dt: float, t: float):
    rw, ro = phase_residuals(disc, state, old, dt, t)
    r = np.empty(2 * disc.n)
    r[0::2] = rw + ro
    r[1::2] = rw
    return r


@numba.njit(cache=True)
def _corey(sw, swc, sor, n_w, n_o, krw_max, kro_max, mu_w, mu_o):
    span = 1.0 - swc - sor
    se_raw = (sw - swc) / span
    se = min(max(se_raw, 0.0), 1.0)
    dse = 1.0 / span if 0.0 < se_raw < 1.0 else 0.0
    lw = krw_max * se**n_w / mu_w
    lo = kro_max * (1.0 - se) ** n_o / mu_o
    dlw = krw_max * n_w * se ** (n_w - 1.0) * dse / mu_w
    dlo = -kro_max * n_o * (1.0 - se) ** (n_o - 1.0) * dse / mu_o
    return lw, lo, dlw, dlo


@numba.njit(cache=True)
def _fi_kernel(p, s, p0, s0, vphi0, fa, fb, T, fl, dt, wc, wt):
    """Residuals and Jacobian block data in ``Discretization.pattern_fi`` order."""
    c_w, c_o, c_r, p_ref = fl[0], fl[1], fl[2], fl[3]
    n = p.size
    nf = fa.size
    rw = np.empty(n)
    ro = np.empty(n)
    dw_p = np.empty(n)
    dw_s = np.empty(n)
    do_p = np.empty(n)
    do_s = np.empty(n)
    mw = np.empty(n)
    mo = np.empty(n)
    mw_p = np.empty(n)
    mo_p = np.empty(n)
    mw_s = np.empty(n)
    mo_s = np.empty(n)
    for i in range(n):
        dp = p[i] - p_ref
        bw, bo = 1.0 + c_w * dp, 1.0 + c_o * dp
        pv = vphi0[i] * (1.0 + c_r * dp)
        dp0 = p0[i] - p_ref
        pv0 = vphi0[i] * (1.0 + c_r * dp0)
        rw[i] = (pv * bw * s[i] - pv0 * (1.0 + c_w * dp0) * s0[i]) / dt
        ro[i] = (pv * bo * (1.0 - s[i]) - pv0 * (1.0 + c_o * dp0) * (1.0 - s0[i])) / dt
        dpv = vphi0[i] * c_r
        dw_p[i] = (dpv * bw + pv * c_w) * s[i] / dt
        dw_s[i] = pv * bw / dt
        do_p[i] = (dpv * bo + pv * c_o) * (1.0 - s[i]) / dt
        do_s[i] = -pv * bo / dt
        lw, lo, dlw, dlo = _corey(s[i], fl[4], fl[5], fl[6], fl[7], fl[8], fl[9], fl[10], fl[11])
        mw[i], mo[i] = lw * bw, lo * bo
        mw_p[i], mo_p[i] = lw * c_w, lo * c_o
        mw_s[i], mo_s[i] = dlw * bw, dlo * bo
    off_ab = np.zeros((nf, 4))
    off_ba = np.zeros((nf, 4))
    for f in range(nf):
        a, b = fa[f], fb[f]
        dpf = p[a] - p[b]
        if dpf >= 0:
            u, ua, ub = a, 1.0, 0.0
        else:
            u, ua, ub = b, 0.0, 1.0
        t = T[f]
        fw = t * mw[u] * dpf
        fo = t * mo[u] * dpf
        rw[a] += fw
        rw[b] -= fw
        ro[a] += fo
        ro[b] -= fo
        fw_pa = t * (mw[u] + mw_p[u] * dpf * ua)
        fw_pb = t * (-mw[u] + mw_p[u] * dpf * ub)
        fw_sa = t * mw_s[u] * dpf * ua
        fw_sb = t * mw_s[u] * dpf * ub
        fo_pa = t * (mo[u] + mo_p[u] * dpf * ua)
        fo_pb = t * (-mo[u] + mo_p[u] * dpf * ub)
        fo_sa = t * mo_s[u] * dpf * ua
        fo_sb = t * mo_s[u] * dpf * ub
        dw_p[a] += fw_pa
        dw_p[b] -= fw_pb
        dw_s[a] += fw_sa
        dw_s[b] -= fw_sb
        do_p[a] += fo_pa
        do_p[b] -= fo_pb
        do_s[a] += fo_sa
        do_s[b] -= fo_sb
        off_ab[f, 0], off_ab[f, 1], off_ab[f, 2], off_ab[f, 3] = fw_pb, fw_sb, fo_pb, fo_sb
        off_ba[f, 0], off_ba[f, 1], off_ba[f, 2], off_ba[f, 3] = -fw_pa, -fw_sa, -fo_pa, -fo_sa
    for k in range(wc.size):
        c = wc[k]
        rw[c] += wt[0, k]
        ro[c] += wt[1, k]
        dw_p[c] += wt[2, k]
        dw_s[c] += wt[3, k]
        do_p[c] += wt[4, k]
        do_s[c] += wt[5, k]
    # rows: (total, water); cols: (p, s)
    data = np.empty(4 * (n + 2 * nf))
    for i in range(n):
        data[4 * i] = dw_p[i] + do_p[i]
        data[4 * i + 1] = dw_s[i] + do_s[i]
        data[4 * i + 2] = dw_p[i]
        data[4 * i + 3] = dw_s[i]
    for f in range(nf):
        for side in range(2):
            o = off_ab if side == 0 else off_ba
            q = 4 * (n + side * nf + f)
            data[q] = o[f, 0] + o[f, 2]
            data[q + 1] = o[f, 1] + o[f, 3]
            data[q + 2] = o[f, 0]
            data[q + 3] = o[f, 1]
    return rw, ro, data


def _fluid_vector(fl: FluidModel) -> np.ndarray:
    return np.array([fl.c_w, fl.c_o, fl.c_r, fl.p_ref, fl.swc, fl.sor, fl.n_w, fl.n_o,
                     fl.krw_max, fl.kro_max, fl.mu_w, fl.mu_o], dtype=float)


def assemble_system(disc: Discretization, state: SimState, old: SimState, dt: float, t: float,
                    as_arrays: bool = False):
    """Fully implicit Newton system ``(J, -R)`` plus the phase residuals.

    With ``as_arrays`` the Jacobian comes back as raw CSR arrays
    ``(indptr, indices, data)``, which skips building a scipy matrix.
    """
    wt = well_terms(disc, state.p, state.sw, t)
    rw, ro, data = _fi_kernel(
        state.p, state.sw, old.p, old.sw, disc.vphi0, disc.fa, disc.fb,
        disc.trans, disc.fluid_vec, float(dt), disc.well_cells, wt,
    )
    J = disc.pattern_fi.arrays(data) if as_arrays else disc.pattern_fi.matrix(data)
    r = np.empty(2 * disc.n)
    r[0::2] = rw + ro
    r[1::2] = rw
    return J, -r, rw, ro


# IMPES pressure system ----------------------------------------------------

def impes_pressure_residual(disc: Discretization, p, old: SimState, dt: float, t: float, with_jacobian=True):
    """Pressure equation with saturations eliminated and mobilities lagged.

    The water and oil balances are divided by their own volume factors and
    summed, so the new saturations cancel out. Returns ``(R, J)`` where ``J``
    is ``None`` when ``with_jacobian`` is false.
    """
    fl = disc.fluid
    n = disc.n
    vphi0 = disc.volume * disc.phi0
    s0 = old.sw
    pf0 = pore_factor(old.p, fl)
    pr0 = fluid_props(old.p, s0, fl)
    a_w = vphi0 * pf0 * pr0["bw"] * s0
    a_o = vphi0 * pf0 * pr0["bo"] * (1.0 - s0)

    bw = 1.0 + fl.c_w * (p - fl.p_ref)
    bo = 1.0 + fl.c_o * (p - fl.p_ref)
    pf = pore_factor(p, fl)
    R = (vphi0 * pf - a_w / bw - a_o / bo) / dt
    dR = (vphi0 * fl.c_r + a_w * fl.c_w / bw**2 + a_o * fl.c_o / bo**2) / dt

    lw0, lo0 = pr0["lw"], pr0["lo"]
    fa, fb, T = disc.fa, disc.fb, disc.trans
    gw = np.zeros(n)  # water outflow (flux + wells)
    go = np.zeros(n)
    dgw = np.zeros(n)
    dgo = np.zeros(n)
    off_ab = off_ba = None
    if disc.n_faces:
        dpf = p[fa] - p[fb]
        a_up = dpf >= 0
        up = np.where(a_up, fa, fb)
        ua = a_up.astype(float)
        ub = 1.0 - ua
        mw, mo = lw0[up] * bw[up], lo0[up] * bo[up]
        fw, fo = T * mw * dpf, T * mo * dpf
        gw += np.bincount(fa, fw, n) - np.bincount(fb, fw, n)
        go += np.bincount(fa, fo, n) - np.bincount(fb, fo, n)
        fw_pa = T * (mw + lw0[up] * fl.c_w * dpf * ua)
        fw_pb = T * (-mw + lw0[up] * fl.c_w * dpf * ub)
        fo_pa = T * (mo + lo0[up] * fl.c_o * dpf * ua)
        fo_pb = T * (-mo + lo0[up] * fl.c_o * dpf * ub)
        dgw += np.bincount(fa, fw_pa, n) - np.bincount(fb, fw_pb, n)
        dgo += np.bincount(fa, fo_pa, n) - np.bincount(fb, fo_pb, n)
        # off-diagonal: row a depends on p_b, row b on p_a (weights use own b)
        off_ab = fw_pb / bw[fa] + fo_pb / bo[fa]
        off_ba = -(fw_pa / bw[fb] + fo_pa / bo[fb])

    wt = well_terms(disc, p, s0, t, lagged_sw=s0)
    c = disc.well_cells
    np.add.at(gw, c, wt[0])
    np.add.at(go, c, wt[1])
    np.add.at(dgw, c, wt[2])
    np.add.at(dgo, c, wt[4])

    R = R + gw / bw + go / bo
    if not with_jacobian:
        return R, None
    diag = dR + dgw / bw - gw * fl.c_w / bw**2 + dgo / bo - go * fl.c_o / bo**2
    if off_ab is None:
        data = diag
    else:
        data = np.concatenate([diag, off_ab, off_ba])
    return R, disc.pattern_p.matrix(data)


def impes_water_outflow(disc: Discretization, p, old: SimState, t: float):
    """Explicit water outflow per cell (flux plus wells) at pressure ``p``."""
    fl = disc.fluid
    n = disc.n
    s0 = old.sw
    pr0 = fluid_props(old.p, s0, fl)
    bw = 1.0 + fl.c_w * (p - fl.p_ref)
    gw = np.zeros(n)
    if disc.n_faces:
        fa, fb = disc.fa, disc.fb
        dpf = p[fa] - p[fb]
        up = np.where(dpf >= 0, fa, fb)
        fw = disc.trans * pr0["lw"][up] * bw[up] * dpf
        gw += np.bincount(fa, fw, n) - np.bincount(fb, fw, n)
    wt = well_terms(disc, p, s0, t, lagged_sw=s0)
    np.add.at(gw, disc.well_cells, wt[0])
    return gw, wt


def active_well_rates(disc: Discretization, state: SimState, t: float, lagged_sw=None):
    """Per-well (qw, qo) production rates; injection is negative ``qw``."""
    wt = well_terms(disc, state.p, state.sw, t, lagged_sw=lagged_sw)
    return wt[0], wt[1]


def well_by_name(wells: list[WellSpec], name: str) -> WellSpec:
    for w in wells:
        if w.name == name:
            return w
    raise KeyError(name)

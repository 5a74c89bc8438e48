"""Margulis-function experiments on G^3 = SL(2,R)^3.

phi(g) = Delta_3(g)^-1 rho_3(g)^-beta on raw bottom rows and its reduced
version tilde_alpha(g) = phi(gamma(g) g); exceptional sets; local and global
contraction checks along g n(xi) a(s); unipotent orbit averages.

Along xi -> g n(xi) a(s) the shortest vector of each factor is piecewise
constant. `orbit_cells` computes that partition exactly (lower envelope of
quadratics), which drives exceptional-set membership and gives quadrature
panels that never straddle a jump of tilde_alpha.
"""
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import sl2geom as sg
from .errors import BudgetExceeded, PreconditionViolated, QuadratureFailure
from .quadrature import adaptive, ordered_sum

DEFAULT_BETA = 1.05
DEFAULT_ETA = 0.05
DEFAULT_BUDGET = 5 * 10 ** 6
SHORT_BOUND = sg.HERMITE_BOUND * (1 + 1e-9)
VARIANTS = ("E", "Etilde", "Eprime-rank2", "E(i,j,k)")
CHECKS = ("measbound-4.1", "rho-4.2", "phi-4.3", "crude-rho-4.4", "crude-alpha-4.5", "global-4.6")


@dataclass(frozen=True)
class MargulisParams:
    beta: float = DEFAULT_BETA
    s: float = 1.0
    K: float = 2.0
    shape: object = None

    def __post_init__(self):
        if not 1.0 < self.beta < 2.0:
            raise PreconditionViolated(f"beta must lie in (1, 2), got {self.beta}")
        if not self.s > 0:
            raise PreconditionViolated("s must be positive")
        if not self.K > 1:
            raise PreconditionViolated("K must exceed 1")


# ------------------------------------------------------------ height functions

def _norms(rows):
    return np.hypot(rows[..., 0], rows[..., 1])


def phi_rows(rows, beta):
    """phi for a stack of bottom rows (N, 3, 2)."""
    rows = np.asarray(rows, dtype=float)
    rho3 = np.prod(_norms(rows), axis=-1)
    return 1.0 / (sg.delta3_batch(rows) * rho3 ** beta)


def phi(g, beta):
    return float(phi_rows(g.bottom[None], beta)[0])


def reduced_bottoms(stack):
    """Bottom rows of gamma(g) g for a stack of tuples (N, d, 2, 2)."""
    stack = np.asarray(stack, dtype=float)
    n, d = stack.shape[:2]
    flat = stack.reshape(-1, 2, 2)
    gam = sg.reduce_matrices(flat)
    red = np.einsum("nab,nbc->nac", gam.astype(float), flat)
    return red[:, 1, :].reshape(n, d, 2)


def tilde_alpha(g, beta):
    return float(phi_rows(reduced_bottoms(g.factors[None]), beta)[0])


def alpha_rows(short_rows, beta, l=None):
    """alpha_l^beta from reduced bottom rows (l = d by default)."""
    nr = np.sort(_norms(short_rows), axis=-1)
    l = nr.shape[-1] if l is None else l
    return np.prod(nr[..., :l], axis=-1) ** (-beta)


# ---------------------------------------------------------------- orbit stacks

def translate_stack(g, xi, s):
    """Factors of g n(xi) a(s) for an array of xi, shape (N, d, 2, 2)."""
    f = g.factors
    xi = np.asarray(xi, dtype=float).ravel()
    out = np.empty((xi.size,) + f.shape)
    out[..., 0] = f[None, :, :, 0] * math.exp(-s)
    out[..., 1] = (f[None, :, :, 0] * xi[:, None, None] + f[None, :, :, 1]) * math.exp(s)
    return out


def orbit_stack(coeffs, xi, t):
    """Factors Gamma-equivalent to g0 n(xi) a(t), unipotent part reduced mod 1."""
    x = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)
    xi = np.asarray(xi, dtype=float).ravel()
    u = np.mod(np.outer(xi, x), 1.0)
    sx = np.sqrt(x)
    et = math.exp(t)
    out = np.zeros((xi.size, x.size, 2, 2))
    out[..., 0, 0] = sx / et
    out[..., 0, 1] = u * et / sx
    out[..., 1, 1] = et / sx
    return out


# ------------------------------------------------------- shortest-vector cells

def _quad_roots(a, b, c):
    """Real roots of a t^2 + b t + c (two columns, nan when absent), stable form."""
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        q = -0.5 * (b + np.where(b >= 0, sq, -sq))
        quad = np.abs(a) > 1e-300
        r1 = np.where(quad, q / a, np.where(np.abs(b) > 0, -c / b, np.nan))
        r2 = np.where(quad, c / q, np.nan)
    return r1, r2


@dataclass
class FactorCells:
    edges: np.ndarray
    cd: np.ndarray
    rows: np.ndarray


def factor_cells(m, s, lo, hi, budget=DEFAULT_BUDGET):
    """Exact partition of [lo, hi] by the shortest primitive vector of Z^2 m n(xi) a(s).

    Candidates are rows w = (c, d) m that reach norm <= the Hermite bound
    somewhere in the range; the envelope of their squared norms
    e^{-2s} c'^2 + e^{2s} (c' xi + d')^2 gives the cells.
    """
    es = math.exp(s)
    R = max(abs(lo), abs(hi))
    H = SHORT_BOUND
    cd, rows = sg.lattice_points_in_box(m, H * es, H * es * R + H / es, True, budget)
    keep = (rows[:, 0] > 0) | ((rows[:, 0] == 0) & (rows[:, 1] > 0))
    cd, rows = cd[keep], rows[keep]
    c, d = rows[:, 0], rows[:, 1]
    room = H * H - (c / es) ** 2
    nz = c != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        half = np.sqrt(np.maximum(room, 0.0)) / (es * np.abs(np.where(nz, c, 1.0)))
        center = np.where(nz, -d / np.where(nz, c, 1.0), 0.0)
    a_w = np.where(nz, center - half, lo)
    b_w = np.where(nz, center + half, hi)
    ok = np.where(nz, room >= 0, es * np.abs(d) <= H)
    a_w, b_w = np.maximum(a_w, lo), np.minimum(b_w, hi)
    ok &= a_w < b_w
    cd, rows, a_w, b_w = cd[ok], rows[ok], a_w[ok], b_w[ok]
    c, d = rows[:, 0], rows[:, 1]
    if not rows.size:
        raise BudgetExceeded("no shortest-vector candidates found")
    E = np.unique(np.concatenate([a_w, b_w, [lo, hi]]))
    E = E[(E >= lo) & (E <= hi)]
    nseg = E.size - 1
    i0 = np.searchsorted(E, a_w, side="left")
    i1 = np.searchsorted(E, b_w, side="left")
    cnt = i1 - i0
    seg = np.repeat(i0, cnt) + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
    cand = np.repeat(np.arange(rows.shape[0]), cnt)
    order = np.argsort(seg, kind="stable")
    seg, cand = seg[order], cand[order]
    per = np.bincount(seg, minlength=nseg)
    if np.any(per == 0):
        raise BudgetExceeded("shortest-vector envelope has an uncovered segment")
    W = int(per.max())
    slot = np.arange(seg.size) - np.repeat(np.cumsum(per) - per, per)
    act = np.full((nseg, W), -1, dtype=np.int64)
    act[seg, slot] = cand
    mid = 0.5 * (E[:-1] + E[1:])
    valid = act >= 0
    ci = np.where(valid, c[np.maximum(act, 0)], 0.0)
    di = np.where(valid, d[np.maximum(act, 0)], 0.0)
    lin = ci * mid[:, None] + di           # c' xi + d' at the segment midpoint
    A = es ** 2 * ci ** 2
    B = 2 * es ** 2 * ci * lin
    C = ci ** 2 / es ** 2 + es ** 2 * lin ** 2
    splits = []
    for p in range(W):
        for q in range(p + 1, W):
            both = valid[:, p] & valid[:, q]
            r1, r2 = _quad_roots(A[:, p] - A[:, q], B[:, p] - B[:, q], C[:, p] - C[:, q])
            for r in (r1, r2):
                splits.append(np.where(both, r + mid, np.nan))
    lo_s, hi_s = E[:-1, None], E[1:, None]
    if splits:
        S = np.stack(splits, axis=1)
        S = np.where((S > lo_s) & (S < hi_s), S, np.nan)
        S = np.sort(S, axis=1)
        S = np.where(np.isnan(S), hi_s, S)
        pts = np.concatenate([lo_s, S, hi_s], axis=1)
    else:
        pts = np.concatenate([lo_s, hi_s], axis=1)
    sub_lo, sub_hi = pts[:, :-1], pts[:, 1:]
    sub_mid = 0.5 * (sub_lo + sub_hi) - mid[:, None]
    val = (A[:, None, :] * sub_mid[..., None] + B[:, None, :]) * sub_mid[..., None] + C[:, None, :]
    val = np.where(valid[:, None, :], val, np.inf)
    win = np.take_along_axis(act, np.argmin(val, axis=2), axis=1)
    keep = sub_hi > sub_lo
    x0, x1, w = sub_lo[keep], sub_hi[keep], win[keep]
    change = np.concatenate([[True], w[1:] != w[:-1]])
    starts = np.nonzero(change)[0]
    edges = np.concatenate([x0[starts], [x1[-1]]])
    idx = w[starts]
    return FactorCells(edges, cd[idx], rows[idx])


@dataclass
class OrbitCells:
    edges: np.ndarray
    cd: np.ndarray       # (C, d, 2) integer bottom rows of gamma(xi)
    rows: np.ndarray     # (C, d, 2) rows (c, d) g_j, constant on each cell
    s: float

    @property
    def count(self):
        return self.edges.size - 1

    def troughs(self):
        """Centres -d'/c' of the shortest rows that fall inside their own cell."""
        c, d = self.rows[..., 0], self.rows[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(c != 0, -d / np.where(c != 0, c, 1.0), np.nan)
        inside = (t > self.edges[:-1, None]) & (t < self.edges[1:, None])
        return np.unique(t[inside])

    def locate(self, xi):
        return np.clip(np.searchsorted(self.edges, xi, side="right") - 1, 0, self.count - 1)

    def rows_at(self, xi):
        """Bottom rows of gamma(xi) g n(xi) a(s) at the given xi, shape (N, d, 2)."""
        xi = np.asarray(xi, dtype=float).ravel()
        r = self.rows[self.locate(xi)]
        es = math.exp(self.s)
        out = np.empty_like(r)
        out[..., 0] = r[..., 0] / es
        out[..., 1] = (r[..., 0] * xi[:, None] + r[..., 1]) * es
        return out


def orbit_cells(g, s, lo=-1.0, hi=1.0, budget=DEFAULT_BUDGET):
    """Common refinement of the per-factor shortest-vector partitions."""
    fc = [factor_cells(f, s, lo, hi, budget) for f in g.factors]
    edges = np.unique(np.concatenate([c.edges for c in fc]))
    mid = 0.5 * (edges[:-1] + edges[1:])
    cd, rows = [], []
    for c in fc:
        k = np.clip(np.searchsorted(c.edges, mid, side="right") - 1, 0, c.cd.shape[0] - 1)
        cd.append(c.cd[k])
        rows.append(c.rows[k])
    return OrbitCells(edges, np.stack(cd, axis=1), np.stack(rows, axis=1), s)


# ----------------------------------------------------------- exceptional sets

def complete_bottom(c, d):
    """An integer matrix [[a, b], [c, d]] of determinant 1 for coprime (c, d)."""
    c, d = int(c), int(d)

    def egcd(x, y):
        if y == 0:
            return (x, 1, 0) if x >= 0 else (-x, -1, 0)
        q, r = divmod(x, y)
        g, u, v = egcd(y, r)
        return g, v, u - q * v

    g, x, y = egcd(d, c)        # x d + y c = g
    if g != 1:
        raise ValueError(f"({c}, {d}) is not primitive")
    return [[x, -y], [c, d]]


@dataclass
class Membership:
    member: bool
    variant: str
    s: float
    K: float
    witness: dict = None
    examined: int = 0

    def __bool__(self):
        return bool(self.member)

    def to_json(self):
        return json.dumps({"schema": "margulis/1", "kind": "Membership", "member": self.member,
                           "variant": self.variant, "s": self.s, "K": self.K,
                           "witness": self.witness, "examined": self.examined})


def _witness(cd_triple, rows_triple, **extra):
    gam = [complete_bottom(c, d) for c, d in np.asarray(cd_triple).tolist()]
    w = {"gamma": gam, "rows": np.asarray(rows_triple, dtype=float).tolist()}
    w.update(extra)
    return w


def _member_E(g, s, K, budget):
    cells = orbit_cells(g, s, -1.0, 1.0, budget)
    gam0 = sg.reduce_matrices(g.factors)
    v0 = gam0[:, 1, :]
    same = np.all(np.all(cells.cd == v0[None], axis=2) | np.all(cells.cd == -v0[None], axis=2), axis=1)
    d3 = sg.delta3_batch(cells.rows.copy())
    bad = (~same) & (d3 < math.exp(-K * s))
    if not bad.any():
        return Membership(False, "E", s, K, None, cells.count)
    k = int(np.nonzero(bad)[0][0])
    xi = 0.5 * (cells.edges[k] + cells.edges[k + 1])
    return Membership(True, "E", s, K, _witness(
        cells.cd[k], cells.rows[k], xi=float(xi),
        interval=[float(cells.edges[k]), float(cells.edges[k + 1])], delta3=float(d3[k])),
        cells.count)


class _RatioIndex:
    """Sorted ratios d'/c' of a factor's window with nearest-gap queries."""

    def __init__(self, rows, mask=None):
        rows = rows if mask is None else rows[mask]
        self.idx = np.arange(rows.shape[0]) if mask is None else np.nonzero(mask)[0]
        nz = rows[:, 0] != 0
        r = rows[nz, 1] / rows[nz, 0]
        order = np.argsort(r, kind="stable")
        self.r = r[order]
        self.pos = self.idx[nz][order]
        zero = self.idx[~nz]
        self.zero = int(zero[0]) if zero.size else -1

    def nearest(self, q, at_least=None):
        """(gap, member index) of the closest ratio to each q, optionally with gap >= at_least.

        A member with c' = 0 contributes the conventional gap 1.
        """
        q = np.asarray(q, dtype=float)
        n = self.r.size
        if at_least is None:
            at_least = np.zeros_like(q)
        gap = np.full(q.shape, np.inf)
        who = np.full(q.shape, -1, dtype=np.int64)
        if n:
            L = np.searchsorted(self.r, q - at_least, side="right") - 1
            Rr = np.searchsorted(self.r, q + at_least, side="left")
            if np.all(at_least == 0):
                L = np.searchsorted(self.r, q, side="right") - 1
                Rr = L + 1
            okL = L >= 0
            gL = np.where(okL, q - self.r[np.clip(L, 0, n - 1)], np.inf)
            okR = Rr < n
            gR = np.where(okR, self.r[np.clip(Rr, 0, n - 1)] - q, np.inf)
            gL = np.where(gL >= at_least, np.abs(gL), np.inf)
            gR = np.where(gR >= at_least, np.abs(gR), np.inf)
            useL = gL <= gR
            gap = np.where(useL, gL, gR)
            who = np.where(useL, self.pos[np.clip(L, 0, n - 1)], self.pos[np.clip(Rr, 0, n - 1)])
            who = np.where(np.isfinite(gap), who, -1)
        if self.zero >= 0:
            z = (1.0 < gap) & (1.0 >= at_least)
            gap = np.where(z, 1.0, gap)
            who = np.where(z, self.zero, who)
        return gap, who


def _windows(g, radius, budget):
    out = []
    for f in g.factors:
        cd, rows, nr = sg.primitive_in_disk(f, radius, budget)
        keep = (rows[:, 0] > 0) | ((rows[:, 0] == 0) & (rows[:, 1] > 0))
        out.append((cd[keep], rows[keep], nr[keep]))
    return out


def _member_Etilde(g, s, K, budget):
    eps = math.exp(-K * s)
    win = _windows(g, 10 * math.exp(s), budget)
    small = math.exp(-s) / 10
    examined = sum(w[0].shape[0] for w in win)
    full = [_RatioIndex(w[1]) for w in win]
    big = [_RatioIndex(w[1], w[2] > small) for w in win]
    best = None
    for j in range(3):
        cd_j, rows_j, nr_j = win[j]
        nz = rows_j[:, 0] != 0
        if not nz.any():
            continue
        q = rows_j[nz, 1] / rows_j[nz, 0]
        jj = np.nonzero(nz)[0]
        i, l = [k for k in range(3) if k != j]
        Ai, wAi = full[i].nearest(q)
        Al, wAl = full[l].nearest(q)
        Bi, wBi = big[i].nearest(q)
        Bl, wBl = big[l].nearest(q)
        jbig = nr_j[nz] > small
        opts = [
            (np.where(jbig, np.minimum(Ai, 1) * np.minimum(Al, 1), np.inf), wAi, wAl),
            (np.minimum(Bi, 1) * np.minimum(Al, 1), wBi, wAl),
            (np.minimum(Ai, 1) * np.minimum(Bl, 1), wAi, wBl),
        ]
        for prod, wi, wl in opts:
            hit = np.nonzero((prod < eps) & (wi >= 0) & (wl >= 0))[0]
            if hit.size:
                k = hit[np.argmin(prod[hit])]
                if best is None or prod[k] < best[0]:
                    trip = [None] * 3
                    trip[j] = jj[k]
                    trip[i] = wi[k]
                    trip[l] = wl[k]
                    best = (float(prod[k]), trip)
    if best is None:
        return Membership(False, "Etilde", s, K, None, examined)
    trip = best[1]
    cd = [win[f][0][trip[f]] for f in range(3)]
    rows = [win[f][1][trip[f]] for f in range(3)]
    return Membership(True, "Etilde", s, K, _witness(cd, rows, delta3=best[0]), examined)


def _member_Eprime(g, s, K, budget, pair):
    eps = math.exp(-K * s)
    h = g.project(pair) if g.d != 2 else g
    radius = 10 * math.exp(s)
    win = _windows(h, radius, budget)
    # the window is strict: max rho < 10 e^s
    win = [(cd[nr < radius], rows[nr < radius], nr[nr < radius]) for cd, rows, nr in win]
    examined = sum(w[0].shape[0] for w in win)
    idx = _RatioIndex(win[1][1])
    rows0 = win[0][1]
    nz = rows0[:, 0] != 0
    if not nz.any():
        return Membership(False, "Eprime-rank2", s, K, None, examined)
    q = rows0[nz, 1] / rows0[nz, 0]
    gap, who = idx.nearest(q)
    gap = np.minimum(gap, 1.0)
    hit = np.nonzero((gap <= eps) & (who >= 0))[0]
    if not hit.size:
        return Membership(False, "Eprime-rank2", s, K, None, examined)
    k = hit[np.argmin(gap[hit])]
    a = np.nonzero(nz)[0][k]
    cd = [win[0][0][a], win[1][0][who[k]]]
    rows = [win[0][1][a], win[1][1][who[k]]]
    return Membership(True, "Eprime-rank2", s, K, _witness(cd, rows, delta2=float(gap[k]), pair=list(pair)),
                      examined)


def _member_Eijk(g, s, K, budget, ijk):
    i, j, k = ijk
    if len({i, j}) != 2 or not all(0 <= v < 3 for v in ijk):
        raise ValueError("need distinct i, j and indices in 0..2")
    eps = math.exp(-K * s)
    small = math.exp(-s) / 10
    win = _windows(g, math.exp(s) / 10, budget)
    win[k] = tuple(a[win[k][2] >= small] for a in win[k])
    examined = sum(w[0].shape[0] for w in win)
    l = 3 - i - j
    rows_j = win[j][1]
    nz = rows_j[:, 0] != 0
    if not nz.any():
        return Membership(False, "E(i,j,k)", s, K, None, examined)
    q = rows_j[nz, 1] / rows_j[nz, 0]
    gi, wi = _RatioIndex(win[i][1]).nearest(q)
    gl, wl = _RatioIndex(win[l][1]).nearest(q, at_least=np.where(np.isfinite(gi), gi, np.inf))
    dj = gi * gl
    hit = np.nonzero((dj < eps) & (wi >= 0) & (wl >= 0))[0]
    if not hit.size:
        return Membership(False, "E(i,j,k)", s, K, None, examined)
    h = hit[np.argmin(dj[hit])]
    a = np.nonzero(nz)[0][h]
    pick = {j: a, i: wi[h], l: wl[h]}
    cd = [win[f][0][pick[f]] for f in range(3)]
    rows = [win[f][1][pick[f]] for f in range(3)]
    return Membership(True, "E(i,j,k)", s, K, _witness(
        cd, rows, delta_j=float(dj[h]), delta_ij=float(gi[h]), ijk=[i, j, k]), examined)


def in_exceptional_set(g, s, K, variant="E", ijk=None, pair=(0, 1), budget=DEFAULT_BUDGET):
    """Exceptional-set membership by exhaustive enumeration, with a witness when a member.

    E         Delta_3(gamma(g n(xi) a(s)) g) < e^{-Ks} for some xi in [-1, 1] where
              gamma(g n(xi) a(s)) differs from gamma(g) beyond upper-triangular factors.
    Etilde    Delta_3(gamma g) < e^{-Ks} for some gamma with
              e^{-s}/10 < max_k rho(gamma_k g_k) <= 10 e^s.
    Eprime-rank2   on a pair of factors: Delta_2(gamma g) <= e^{-Ks} with max rho < 10 e^s.
    E(i,j,k)  Delta_ij^2 <= Delta_j < e^{-Ks} with e^{-s}/10 <= rho(gamma_k g_k) and
              max rho <= e^s / 10 (Delta_j, Delta_ij unclipped).
    """
    if variant == "E":
        return _member_E(g, s, K, budget)
    if variant == "Etilde":
        return _member_Etilde(g, s, K, budget)
    if variant == "Eprime-rank2":
        return _member_Eprime(g, s, K, budget, tuple(pair))
    if variant == "E(i,j,k)":
        if ijk is None:
            raise ValueError("variant E(i,j,k) needs ijk")
        return _member_Eijk(g, s, K, budget, tuple(ijk))
    raise ValueError(f"unknown variant {variant!r}")


# ------------------------------------------------------------ orbit integrals

def _raw_kernel(g, s, beta, kind, k=None):
    def f(xi):
        rows = translate_stack(g, xi, s)[:, :, 1, :]
        if kind == "rho":
            nr = np.sort(_norms(rows), axis=-1)
            kk = nr.shape[-1] if k is None else k
            return np.prod(nr[:, :kk], axis=-1) ** (-beta)
        if kind == "phi":
            return phi_rows(rows, beta)
        raise ValueError(kind)
    return f


def _raw_troughs(g):
    c, d = g.bottom[:, 0], g.bottom[:, 1]
    return (-d[c != 0] / c[c != 0]).tolist()


def _depth_width(s, lo, hi):
    depth = math.ceil(2 * s / math.log(2))
    return (hi - lo) * 2.0 ** (-depth)


def raw_integral(g, s, beta, kind, k=None, lo=-1.0, hi=1.0, tol=1e-8, max_panels=2_000_000):
    """Integral over [lo, hi] of rho_k^-beta or phi along g n(xi) a(s) (no reduction)."""
    w = _depth_width(s, lo, hi)
    return adaptive(_raw_kernel(g, s, beta, kind, k), lo, hi, seeds=_raw_troughs(g), tol=tol,
                    min_depth_width=w, seed_halo=8 * w, max_panels=max_panels)


def _cell_kernel(cells, beta, kind):
    d3 = sg.delta3_batch(cells.rows.copy()) if kind == "tilde_alpha" else None
    es = math.exp(cells.s)

    def f(xi):
        xi = np.asarray(xi, dtype=float).ravel()
        k = cells.locate(xi)
        r = cells.rows[k]
        c = r[..., 0]
        n2 = (c / es) ** 2 + ((c * xi[:, None] + r[..., 1]) * es) ** 2
        if kind == "one":
            return np.ones(xi.size)
        p = np.prod(n2, axis=-1)
        if kind == "alpha":
            return p ** (-0.5 * beta)
        if kind == "alpha2":
            if n2.shape[-1] == 3:
                p = p / n2.max(axis=-1)
            else:
                p = np.prod(np.sort(n2, axis=-1)[:, :2], axis=-1)
            return p ** (-0.5 * beta)
        if kind == "tilde_alpha":
            return p ** (-0.5 * beta) / d3[k]
        raise ValueError(kind)
    return f


def reduced_integral(g, s, beta, kind, lo=-1.0, hi=1.0, tol=1e-8, cells=None,
                     budget=DEFAULT_BUDGET, max_panels=4_000_000):
    """Integral of alpha^beta, alpha_2^beta or tilde_alpha along g n(xi) a(s).

    Panels follow the exact shortest-vector cells and are seeded at each cell's trough.
    """
    cells = orbit_cells(g, s, lo, hi, budget) if cells is None else cells
    w = _depth_width(s, lo, hi)
    res = adaptive(_cell_kernel(cells, beta, kind), lo, hi, seeds=cells.troughs(), tol=tol,
                   min_depth_width=w, seed_halo=4 * w, breaks=cells.edges, max_panels=max_panels)
    res.cells = cells.count
    return res


# ----------------------------------------------------------- measure bounds

def sublevel_measure(g, s, delta, lo=-1.0, hi=1.0, grid=4001):
    """Measure of {xi in [lo, hi] : rho_3(g n(xi) a(s)) <= delta} via bracketed roots."""
    from scipy.optimize import brentq

    def F(x):
        rows = translate_stack(g, x, s)[:, :, 1, :]
        return np.sum(np.log(_norms(rows)), axis=-1) - math.log(delta)

    pts = [np.linspace(lo, hi, grid)]
    w = math.exp(-2 * s)
    loc = w * np.geomspace(1e-4, 1e4, 161)
    for t in _raw_troughs(g):
        pts.append(t + np.concatenate([[0.0], loc, -loc]))
    x = np.unique(np.concatenate(pts))
    x = x[(x >= lo) & (x <= hi)]
    v = F(x)
    below = v <= 0
    cross = np.nonzero(below[1:] != below[:-1])[0]
    roots = [brentq(lambda z: float(F(np.array([z]))[0]), x[i], x[i + 1], xtol=1e-15, rtol=1e-14)
             for i in cross]
    bounds = np.concatenate([[lo], roots, [hi]])
    # walk the segments between consecutive boundaries, toggling at each crossing
    total, state = 0.0, bool(below[0])
    for a, b in zip(bounds[:-1], bounds[1:]):
        if state:
            total += b - a
        state = not state
    return total, len(roots)


# ------------------------------------------------------------ contraction

@dataclass
class ContractionReport:
    which: str
    s: float
    beta: float
    lhs: float
    rhs: float
    ratio: float
    branch: str = None
    details: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"schema": "margulis/1", "kind": "ContractionReport", "which": self.which,
                           "s": self.s, "beta": self.beta, "lhs": self.lhs, "rhs": self.rhs,
                           "ratio": self.ratio, "branch": self.branch, "details": self.details})


def contraction_check(g, s, beta, which, delta=None, k=3, K=None, tol=1e-8, budget=DEFAULT_BUDGET):
    """Left and right sides of one contraction inequality along g n(xi) a(s), and their ratio."""
    if which not in CHECKS:
        raise ValueError(f"unknown check {which!r}")
    dl = sg.deltas(g)
    rho3 = float(np.prod(_norms(g.bottom)))
    if which == "measbound-4.1":
        if delta is None:
            # twice the smallest value at a trough, so the sublevel set is not empty
            tr = np.array(_raw_troughs(g) or [0.0])
            rows = translate_stack(g, np.clip(tr, -1, 1), s)[:, :, 1, :]
            delta = 2.0 * float(np.prod(_norms(rows), axis=-1).min())
        lhs, nroots = sublevel_measure(g, s, delta)
        branches = {
            "cube-root": delta ** (1 / 3) * math.exp(-s),
            "delta2": delta / dl.delta2 * math.exp(-s) if dl.delta2 > 0 else math.inf,
            "delta3": delta / dl.delta3 * math.exp(-3 * s) if dl.delta3 > 0 else math.inf,
        }
        name = min(branches, key=branches.get)
        rhs = branches[name]
        return ContractionReport(which, s, beta, lhs, rhs, lhs / rhs, name,
                                 {"delta": delta, "branches": branches, "roots": nroots,
                                  "delta2": dl.delta2, "delta3": dl.delta3})
    if which in ("phi-4.3", "global-4.6") and not 1 < beta < 2:
        raise PreconditionViolated(f"{which} needs 1 < beta < 2")
    if which == "rho-4.2":
        res = raw_integral(g, s, beta, "rho", tol=tol)
        terms = {
            "plain": math.exp((3 * beta - 2) * s),
            "delta2": math.exp((3 * beta - 4) * s) / dl.delta2 if dl.delta2 > 0 else math.inf,
            "delta3": math.exp((3 * beta - 6) * s) / dl.delta3 if dl.delta3 > 0 else math.inf,
        }
        name = min(terms, key=terms.get)
        rhs = terms[name] * rho3 ** (-beta)
        return ContractionReport(which, s, beta, res.value, rhs, res.value / rhs, name,
                                 {"panels": res.panels, "terms": terms})
    if which == "phi-4.3":
        res = raw_integral(g, s, beta, "phi", tol=tol)
        rhs = math.exp(-3 * (2 - beta) * s) * phi(g, beta)
        return ContractionReport(which, s, beta, res.value, rhs, res.value / rhs, None,
                                 {"panels": res.panels, "phi": phi(g, beta)})
    if which == "crude-rho-4.4":
        if not beta > 1.0 / k:
            raise PreconditionViolated("crude rho contraction needs beta > 1/k")
        res = raw_integral(g, s, beta, "rho", k=k, tol=tol)
        rk = float(np.prod(np.sort(_norms(g.bottom))[:k]))
        rhs = math.exp(-(2 - beta * k) * s) * rk ** (-beta)
        return ContractionReport(which, s, beta, res.value, rhs, res.value / rhs, None,
                                 {"panels": res.panels, "k": k})
    if which == "crude-alpha-4.5":
        res = reduced_integral(g, s, beta, "alpha", tol=tol, budget=budget)
        d = g.d
        a_g = float(alpha_rows(reduced_bottoms(g.factors[None]), beta)[0])
        rhs = math.exp((beta * d - 2) * s) * a_g + math.exp(beta * d * s)
        return ContractionReport(which, s, beta, res.value, rhs, res.value / rhs, None,
                                 {"panels": res.panels, "cells": res.cells, "alpha_beta": a_g})
    # global-4.6
    if K is None:
        raise ValueError("global-4.6 needs K")
    mem = in_exceptional_set(g, s, K, "E", budget=budget)
    if mem.member:
        raise PreconditionViolated(f"g lies in the exceptional set at s={s}, K={K}")
    cells = orbit_cells(g, s, -1.0, 1.0, budget)
    res = reduced_integral(g, s, beta, "tilde_alpha", tol=tol, cells=cells)
    res2 = reduced_integral(g, s, beta, "alpha2", tol=tol, cells=cells)
    ta = tilde_alpha(g, beta)
    rhs = math.exp(-3 * (2 - beta) * s) * ta + math.exp((K + 2) * s) * res2.value
    return ContractionReport(which, s, beta, res.value, rhs, res.value / rhs, None,
                             {"panels": res.panels, "tilde_alpha": ta, "alpha2_integral": res2.value,
                              "K": K})


# ------------------------------------------------------- fitted constants

def freeze_constant(ratios, margin=1.5):
    """A constant fitted on one ensemble: the largest ratio times a safety margin."""
    r = np.asarray(ratios, dtype=float)
    if not r.size or not np.all(np.isfinite(r)):
        raise ValueError("ratios must be finite and non-empty")
    return float(r.max() * margin)


def violations(ratios, constant):
    r = np.asarray(ratios, dtype=float)
    return np.nonzero(~(r <= constant))[0].tolist()


def log_slope(x, y):
    """Least-squares slope of y against x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    return float(np.linalg.lstsq(A, y, rcond=None)[0][0])


def random_rotation_tuple(rng, d=3):
    return sg.k_matrix(rng.uniform(0, math.pi, size=d), d)


# ----------------------------------------------------------- orbit averages

class OrbitFunction:
    """A function on G^3 evaluated on stacks of tuples (N, d, 2, 2)."""

    def __init__(self, batch, name="fn"):
        self.batch = batch
        self.name = name

    def __call__(self, stack):
        return self.batch(stack)

    @classmethod
    def wrap(cls, fn):
        if isinstance(fn, OrbitFunction):
            return fn
        return cls(lambda stack: np.array([fn(sg.GroupTuple(m)) for m in stack], dtype=float),
                   getattr(fn, "__name__", "fn"))


def alpha_power(beta, l=None):
    return OrbitFunction(lambda st: alpha_rows(reduced_bottoms(st), beta, l), f"alpha^{beta}")


def tilde_alpha_fn(beta):
    return OrbitFunction(lambda st: phi_rows(reduced_bottoms(st), beta), f"tilde_alpha[{beta}]")


def constant_fn(value=1.0):
    return OrbitFunction(lambda st: np.full(st.shape[0], float(value)), f"const[{value}]")


@dataclass
class OrbitAverage:
    value: float
    panels: int
    spike_centers: list
    truncation: dict
    L: float
    edges: np.ndarray = None
    panel_values: np.ndarray = None

    def recompute(self):
        return ordered_sum(self.panel_values) / self.L

    def to_json(self):
        return json.dumps({"schema": "margulis/1", "kind": "OrbitAverage", "value": self.value,
                           "panels": self.panels, "spike_centers": list(map(float, self.spike_centers)),
                           "truncation": self.truncation, "L": self.L,
                           "edges": None if self.edges is None else self.edges.tolist(),
                           "panel_values": None if self.panel_values is None else self.panel_values.tolist()})


def _intervals(xi_range):
    arr = np.asarray(xi_range, dtype=float)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape[1] != 2 or np.any(arr[:, 1] <= arr[:, 0]):
        raise ValueError("xi_range must be (lo, hi) or a list of such intervals")
    return arr


def escape_range(M, L, eta=DEFAULT_ETA):
    """The two-sided range M^{-1-eta} < |xi| <= L."""
    lo = M ** (-1 - eta)
    return [(-L, -lo), (lo, L)]


def unipotent_average(fn, shape, t, xi_range, L, method="quadrature", tol=1e-9, depth_boost=0,
                      samples=2 ** 18, seed=0, budget=DEFAULT_BUDGET, max_panels=4_000_000):
    """(1/L) * integral over xi_range of fn(g0 n(xi) a(t)).

    quadrature: panels follow the exact shortest-vector cells of the orbit,
    seeded at the troughs xi = -d/(c x_j) with minimum depth ceil(2t / ln 2)
    (plus depth_boost). sampling: stratified estimator with two uniform draws
    per stratum, standard error in the truncation report.
    """
    fn = OrbitFunction.wrap(fn)
    x = np.asarray(getattr(shape, "coeffs", shape), dtype=float)
    ivs = _intervals(xi_range)
    if method == "sampling":
        return _sampled_average(fn, x, t, ivs, L, samples, seed)
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    g0 = sg.g0_matrix(x)
    vals, edges, centers, panels, err = [], [], [], 0, 0.0
    for lo, hi in ivs:
        try:
            cells = orbit_cells(g0, t, lo, hi, budget)
        except BudgetExceeded as exc:
            raise QuadratureFailure(f"orbit cell budget exceeded: {exc}",
                                    panels={"unresolved": [(float(lo), float(hi))]}) from exc
        troughs = cells.troughs()
        w = (hi - lo) * 2.0 ** (-(math.ceil(2 * t / math.log(2)) + depth_boost))
        w = min(w, math.exp(-2 * t) * 2.0 ** (-depth_boost))
        res = adaptive(lambda xi: fn(orbit_stack(x, xi, t)), lo, hi, seeds=troughs, tol=tol,
                       min_depth_width=w, seed_halo=4 * w, breaks=cells.edges, max_panels=max_panels)
        vals.append(res.panel_values)
        edges.append(res.edges)
        centers.extend(troughs.tolist())
        panels += res.panels
        err += res.error_estimate
    pv = np.concatenate(vals)
    return OrbitAverage(ordered_sum(pv) / L, panels, centers,
                        {"method": "quadrature", "error_estimate": err / L, "tol": tol,
                         "intervals": ivs.tolist(), "depth_boost": depth_boost}, float(L),
                        np.concatenate(edges), pv)


def _sampled_average(fn, x, t, ivs, L, samples, seed):
    rng = np.random.default_rng(seed)
    lengths = ivs[:, 1] - ivs[:, 0]
    per = np.maximum(1, np.round(samples * lengths / lengths.sum() / 2).astype(np.int64))
    contrib, var = [], 0.0
    for (lo, hi), n in zip(ivs, per):
        w = (hi - lo) / n
        left = lo + w * np.arange(n)
        u = rng.random((n, 2))
        xs = left[:, None] + w * u
        f = fn(orbit_stack(x, xs.ravel(), t)).reshape(n, 2)
        contrib.append(w * f.mean(axis=1))
        var += float(np.sum((w * (f[:, 0] - f[:, 1])) ** 2) / 4)
    pv = np.concatenate(contrib)
    return OrbitAverage(ordered_sum(pv) / L, int(pv.size), [],
                        {"method": "sampling", "stderr": math.sqrt(var) / L, "seed": seed,
                         "samples": int(2 * per.sum()), "intervals": ivs.tolist()}, float(L), None, pv)


# -------------------------------------------------------- experiment drivers

def escape_ladder(shape, Ms, beta=DEFAULT_BETA, eta=DEFAULT_ETA, samples=2 ** 20, seed=0):
    """Orbit averages of alpha_3^beta over M^{-1-eta} < |xi| <= L with L = M, t = log M."""
    fn = alpha_power(beta)
    out = []
    for i, M in enumerate(Ms):
        avg = unipotent_average(fn, shape, math.log(M), escape_range(M, M, eta), M,
                                method="sampling", samples=samples, seed=seed + i)
        out.append((M, float(M), beta, avg))
    return out


def small_moment_profile(g, beta, ts, samples=2 ** 18, seed=0, half_width=10.0):
    """t -> integral over [-10, 10] of alpha_3(g n(xi) a(t))^beta (stratified sampling)."""
    fn = alpha_power(beta)
    rng_seed = seed
    prof = {}
    for t in ts:
        n = samples // 2
        rng = np.random.default_rng(rng_seed)
        rng_seed += 1
        w = 2 * half_width / n
        xs = -half_width + w * (np.arange(n)[:, None] + rng.random((n, 2)))
        f = fn(translate_stack(g, xs.ravel(), t)).reshape(n, 2)
        prof[float(t)] = float(w * f.mean(axis=1).sum())
    return prof


def initial_average(shape, L, beta=DEFAULT_BETA, tol=1e-8):
    """(1/L) * integral over [3, 3L] of tilde_alpha(g0 n(xi)), by cell quadrature."""
    return unipotent_average(tilde_alpha_fn(beta), shape, 0.0, (3.0, 3.0 * L), L, tol=tol)


def initial_diophantine_check(shape, s1, K, xis, budget=DEFAULT_BUDGET):
    """Membership of g0 n(xi) in E_{s1,K} for each xi (the orbit start avoids it)."""
    x = np.asarray(getattr(shape, "coeffs", shape), dtype=float)
    out = []
    for xi in np.asarray(xis, dtype=float):
        g = sg.GroupTuple(orbit_stack(x, [xi], 0.0)[0])
        out.append(in_exceptional_set(g, s1, K, "E", budget=budget))
    return out


def append_ladder(path, rows):
    """Append (M, L, beta, value, ...) rows to a CSV results ledger."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["M", "L", "beta", "value", "stderr", "method"])
        for M, L, beta, avg in rows:
            w.writerow([M, repr(float(L)), repr(float(beta)), repr(float(avg.value)),
                        repr(float(avg.truncation.get("stderr", avg.truncation.get("error_estimate", 0.0)))),
                        avg.truncation["method"]])

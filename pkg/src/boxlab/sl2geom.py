"""SL(2,R)^d arithmetic, Iwasawa coordinates, reduction and height functions.

Factors are stored as a (d, 2, 2) float array. Reduction works on the upper
half-plane point z = g.i together with the rotation angle, so the reduced
element lies in the fundamental domain with theta in [0, pi).
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, ReductionDiverged

DET_TOL = 1e-10
DET_RENORM_MAX = 1e-6
TIE_TOL = 1e-12
MAX_REDUCTION_STEPS = 10_000
# shortest primitive vector of a unimodular lattice is at most (2/sqrt 3)^(1/2)
HERMITE_BOUND = (2.0 / math.sqrt(3.0)) ** 0.5


class GroupTuple:
    """An element of G^d given by d unimodular 2x2 real matrices."""

    def __init__(self, factors):
        f = np.array(factors, dtype=float)
        if f.ndim == 2:
            f = f[None]
        if f.ndim != 3 or f.shape[1:] != (2, 2) or f.shape[0] < 1:
            raise ValueError(f"expected (d,2,2) factors, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite matrix entries")
        det = f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] * f[:, 1, 0]
        off = np.abs(det - 1.0)
        if np.any(off > DET_RENORM_MAX):
            raise ValueError(f"factors are not unimodular (det={det})")
        fix = off > DET_TOL
        if np.any(fix):
            f[fix] /= np.sqrt(det[fix])[:, None, None]
        self.factors = f

    @property
    def d(self):
        return self.factors.shape[0]

    @property
    def bottom(self):
        return self.factors[:, 1, :]

    def __matmul__(self, other):
        if isinstance(other, GroupTuple):
            other = other.factors
        other = np.asarray(other, dtype=float)
        if other.ndim == 2:
            other = np.broadcast_to(other, self.factors.shape)
        return GroupTuple(np.einsum("jab,jbc->jac", self.factors, other))

    def __rmatmul__(self, other):
        other = np.asarray(other, dtype=float)
        if other.ndim == 2:
            other = np.broadcast_to(other, self.factors.shape)
        return GroupTuple(np.einsum("jab,jbc->jac", other, self.factors))

    def inv(self):
        f = self.factors
        out = np.empty_like(f)
        out[:, 0, 0] = f[:, 1, 1]
        out[:, 1, 1] = f[:, 0, 0]
        out[:, 0, 1] = -f[:, 0, 1]
        out[:, 1, 0] = -f[:, 1, 0]
        return GroupTuple(out)

    def project(self, idx):
        """Sub-tuple on the given factor indices."""
        return GroupTuple(self.factors[list(idx)])

    def allclose(self, other, tol=1e-9):
        return np.allclose(self.factors, other.factors, atol=tol, rtol=0)

    def __repr__(self):
        return f"GroupTuple(d={self.d}, factors={self.factors.tolist()})"


def _per_factor(value, d):
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return np.full(d, float(v))
    if v.shape != (d,):
        raise ValueError(f"expected scalar or length-{d} parameter")
    return v


def n_matrix(xi, d=3):
    xi = _per_factor(xi, d)
    f = np.zeros((d, 2, 2))
    f[:, 0, 0] = f[:, 1, 1] = 1.0
    f[:, 0, 1] = xi
    return GroupTuple(f)


def a_matrix(t, d=3):
    t = _per_factor(t, d)
    f = np.zeros((d, 2, 2))
    f[:, 0, 0] = np.exp(-t)
    f[:, 1, 1] = np.exp(t)
    return GroupTuple(f)


def k_matrix(theta, d=3):
    th = _per_factor(theta, d)
    c, s = np.cos(th), np.sin(th)
    return GroupTuple(np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2))


def diag_matrix(y, d=3):
    """n(0) diag(y^(1/2), y^(-1/2)) per factor."""
    y = _per_factor(y, d)
    f = np.zeros((d, 2, 2))
    f[:, 0, 0] = np.sqrt(y)
    f[:, 1, 1] = 1.0 / np.sqrt(y)
    return GroupTuple(f)


def g0_matrix(coeffs):
    """diag(x_j^(1/2), x_j^(-1/2)) built from the form coefficients."""
    x = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)
    return diag_matrix(x, d=x.size)


def make(flow, *params, d=3):
    """Build a named element: 'n', 'a', 'k', 'g0' or 'product' of GroupTuples."""
    if flow == "n":
        return n_matrix(params[0], d)
    if flow == "a":
        return a_matrix(params[0], d)
    if flow == "k":
        return k_matrix(params[0], d)
    if flow == "g0":
        return g0_matrix(params[0])
    if flow == "product":
        out = params[0]
        for p in params[1:]:
            out = out @ p
        return out
    raise ValueError(f"unknown flow {flow!r}")


def orbit_point(coeffs, xi, t):
    """g0 n(xi) a(t) with the unipotent part reduced mod 1 in each factor.

    g0 n(xi) = n(x xi) g0 and n(1) lies in SL(2,Z), so the returned tuple is in
    the same Gamma^d coset but keeps entries of moderate size for large xi.
    """
    x = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)
    u = np.mod(x * xi, 1.0)
    sx = np.sqrt(x)
    et = math.exp(t)
    f = np.zeros((x.size, 2, 2))
    f[:, 0, 0] = sx / et
    f[:, 0, 1] = u * et / sx
    f[:, 1, 1] = et / sx
    return GroupTuple(f)


# ---------------------------------------------------------------- Iwasawa

@dataclass
class IwasawaCoords:
    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    sign: np.ndarray

    def assemble(self):
        d = len(self.u)
        g = n_matrix(self.u, d) @ diag_matrix(self.v, d) @ k_matrix(self.theta, d)
        return GroupTuple(g.factors * self.sign[:, None, None])


def _nak(f):
    """Iwasawa data for a stack of matrices f[..., 2, 2]."""
    a, b, c, d = f[..., 0, 0], f[..., 0, 1], f[..., 1, 0], f[..., 1, 1]
    r2 = c * c + d * d
    v = 1.0 / r2
    u = (a * c + b * d) / r2
    theta = np.arctan2(c, d)
    flip = (theta < 0) | (theta >= np.pi)
    theta = np.where(theta < 0, theta + np.pi, theta)
    theta = np.where(theta >= np.pi, theta - np.pi, theta)
    sign = np.where(flip, -1.0, 1.0)
    return u, v, theta, sign


def iwasawa(g):
    """Per-factor (u, v, theta mod pi) with g_j = sign_j n(u) diag(v^.5, v^-.5) k(theta)."""
    u, v, theta, sign = _nak(g.factors)
    return IwasawaCoords(u, v, theta, sign)


# -------------------------------------------------------------- reduction

def reduce_matrices(f, max_steps=MAX_REDUCTION_STEPS):
    """Reduce a stack of matrices f[N,2,2] into the fundamental domain.

    Returns integer gammas (N,2,2) with gamma @ f in the domain.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    gam = np.zeros((n, 2, 2), dtype=np.int64)
    gam[:, 0, 0] = gam[:, 1, 1] = 1
    top = f[:, 0, :].copy()
    bot = f[:, 1, :].copy()
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        tp, bt = top[idx], bot[idx]
        r2 = bt[:, 0] ** 2 + bt[:, 1] ** 2
        u = (tp[:, 0] * bt[:, 0] + tp[:, 1] * bt[:, 1]) / r2
        k = np.floor(u + 0.5)
        tp = tp - k[:, None] * bt
        gam[idx, 0, :] -= k.astype(np.int64)[:, None] * gam[idx, 1, :]
        # |z|^2 = |top|^2 / |bottom|^2 for unimodular matrices
        z2 = (tp[:, 0] ** 2 + tp[:, 1] ** 2) / r2
        inv = z2 < 1.0 - TIE_TOL
        top[idx] = tp
        if inv.any():
            j = idx[inv]
            t_old = top[j].copy()
            top[j] = -bot[j]
            bot[j] = t_old
            g_old = gam[j, 0, :].copy()
            gam[j, 0, :] = -gam[j, 1, :]
            gam[j, 1, :] = g_old
        active[idx[~inv]] = False
    else:
        if active.any():
            raise ReductionDiverged(f"{int(active.sum())} points not reduced after {max_steps} steps")
    # boundary conventions: closed on x = 1/2 and the right half of the arc
    r2 = bot[:, 0] ** 2 + bot[:, 1] ** 2
    u = (top[:, 0] * bot[:, 0] + top[:, 1] * bot[:, 1]) / r2
    left_edge = np.abs(u + 0.5) <= TIE_TOL
    if left_edge.any():
        top[left_edge] += bot[left_edge]
        gam[left_edge, 0, :] += gam[left_edge, 1, :]
        u = np.where(left_edge, u + 1.0, u)
    z2 = (top[:, 0] ** 2 + top[:, 1] ** 2) / r2
    on_arc = (np.abs(z2 - 1.0) <= TIE_TOL) & (u < -TIE_TOL)
    if on_arc.any():
        t_old = top[on_arc].copy()
        top[on_arc] = -bot[on_arc]
        bot[on_arc] = t_old
        g_old = gam[on_arc, 0, :].copy()
        gam[on_arc, 0, :] = -gam[on_arc, 1, :]
        gam[on_arc, 1, :] = g_old
    # theta in [0, pi): fix the overall sign
    theta = np.arctan2(bot[:, 0], bot[:, 1])
    neg = (theta < 0) | (theta >= np.pi)
    gam[neg] *= -1
    return gam


def _apply_gamma(gam, f):
    return np.einsum("jab,jbc->jac", gam.astype(float), f)


def in_domain(f, tol=1e-9):
    """Membership of each matrix f[j] in the fundamental domain (with tolerance)."""
    u, v, theta, sign = _nak(np.asarray(f, dtype=float))
    z2 = u * u + v * v
    plus = (u >= -tol) & (u <= 0.5 + tol) & (z2 >= 1 - tol)
    minus = (u > -0.5 - tol) & (u < tol) & (z2 > 1 - tol)
    return (plus | minus) & (sign > 0)


@dataclass
class ReductionReport:
    gamma: np.ndarray
    reduced: GroupTuple
    rho: list
    alpha: list
    delta2: float
    delta3: float
    extras: dict = field(default_factory=dict)

    def to_json(self, **extra):
        doc = {
            "schema": "sl2/1",
            "gamma": self.gamma.tolist(),
            "reduced": self.reduced.factors.tolist(),
            "rho": [float(r) for r in self.rho],
            "alpha": [float(a) for a in self.alpha],
            "delta2": float(self.delta2),
            "delta3": float(self.delta3),
        }
        doc.update(extra)
        return json.dumps(doc)


def rho_list(g):
    """rho_l for l = 1..d from the raw bottom rows (product of the l smallest norms)."""
    r = np.sort(np.hypot(g.bottom[:, 0], g.bottom[:, 1]))
    return list(np.cumprod(r))


def alpha_from_shortest(short):
    """alpha_l = 1 / (product of the l smallest shortest-vector norms)."""
    s = np.sort(np.asarray(short, dtype=float))
    return list(1.0 / np.cumprod(s))


def reduce(g):
    gam = reduce_matrices(g.factors)
    red = GroupTuple(_apply_gamma(gam, g.factors))
    short = np.hypot(red.bottom[:, 0], red.bottom[:, 1])
    dl = deltas(red) if red.d in (2, 3) else None
    return ReductionReport(
        gamma=gam,
        reduced=red,
        rho=rho_list(g),
        alpha=alpha_from_shortest(short),
        delta2=dl.delta2 if dl else 1.0,
        delta3=dl.delta3 if dl else 1.0,
        extras={"shortest": short},
    )


def heights(g):
    """(rho_l list from raw bottom rows, alpha_l list via reduction)."""
    gam = reduce_matrices(g.factors)
    red = _apply_gamma(gam, g.factors)
    short = np.hypot(red[:, 1, 0], red[:, 1, 1])
    return rho_list(g), alpha_from_shortest(short)


def alpha_top(g):
    """alpha_d(g): product over factors of 1/|shortest vector|."""
    return heights(g)[1][-1]


def shortest_norms_batch(f):
    """Shortest-vector norms of the lattices Z^2 f[j] for a stack f[N,2,2]."""
    gam = reduce_matrices(f)
    red = _apply_gamma(gam, f)
    return np.hypot(red[:, 1, 0], red[:, 1, 1])


def primitive_vectors(m, bound):
    """All primitive (c, d) with |(c, d) m| <= bound, with their norms.

    Scans c over the range allowed by the inverse matrix and solves the
    quadratic inequality for d.
    """
    m = np.asarray(m, dtype=float)
    a, b, c0, d0 = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    # (c,d) = w m^{-1}; m^{-1} = [[d0,-b],[-c0,a]]
    cmax = int(math.floor(bound * math.hypot(d0, c0) + 1e-9))
    out = []
    qa = c0 * c0 + d0 * d0
    for c in range(-cmax, cmax + 1):
        # |(c a + d c0, c b + d d0)|^2 = qa d^2 + 2 c (a c0 + b d0) d + c^2 (a^2+b^2)
        qb = 2 * c * (a * c0 + b * d0)
        qc = c * c * (a * a + b * b) - bound * bound
        disc = qb * qb - 4 * qa * qc
        if disc < 0:
            continue
        sq = math.sqrt(disc)
        lo = math.ceil((-qb - sq) / (2 * qa) - 1e-9)
        hi = math.floor((-qb + sq) / (2 * qa) + 1e-9)
        for dd in range(lo, hi + 1):
            if (c, dd) == (0, 0) or math.gcd(c, dd) != 1:
                continue
            nrm = math.hypot(c * a + dd * c0, c * b + dd * d0)
            if nrm <= bound:
                out.append((c, dd, nrm))
    return out


def shortest_by_enumeration(m):
    """Shortest primitive vector norm of Z^2 m by direct enumeration."""
    m = np.asarray(m, dtype=float)
    best = min(math.hypot(m[0, 0], m[0, 1]), math.hypot(m[1, 0], m[1, 1]))
    vecs = primitive_vectors(m, best * (1 + 1e-12))
    return min(v[2] for v in vecs)


def alpha_by_enumeration(g):
    return alpha_from_shortest([shortest_by_enumeration(f) for f in g.factors])


# ------------------------------------------------------------------ deltas

@dataclass
class Deltas:
    delta2: float
    delta3: float
    delta_j: np.ndarray
    delta_ij: np.ndarray


def gap_matrix(bottom):
    """|d_i/c_i - d_j/c_j| with 1 wherever c_i c_j = 0 (diagonal set to 0)."""
    c = bottom[:, 0]
    d = bottom[:, 1]
    with np.errstate(over="ignore", divide="ignore"):
        r = d / np.where(c != 0, c, 1.0)
    # a ratio that overflows is numerically c = 0 and follows the same convention
    ok = (c != 0) & np.isfinite(r)
    r = np.where(ok, r, 0.0)
    gap = np.abs(r[:, None] - r[None, :])
    both = ok[:, None] & ok[None, :]
    gap = np.where(both, gap, 1.0)
    np.fill_diagonal(gap, 0.0)
    return gap


def deltas(g):
    """Delta_2, Delta_3 (clipped at 1), Delta_j and Delta_ij (unclipped) from bottom rows."""
    gap = gap_matrix(g.bottom)
    n = gap.shape[0]
    clipped = np.minimum(gap, 1.0)
    off = ~np.eye(n, dtype=bool)
    d2 = min(clipped[j][off[j]].max() for j in range(n))
    d3 = min(np.prod(clipped[j][off[j]]) for j in range(n))
    with np.errstate(over="ignore"):
        # unclipped products of huge ratio gaps may legitimately be inf
        dj = np.array([np.prod(gap[j][off[j]]) for j in range(n)])
    return Deltas(float(d2), float(d3), dj, gap)


def ratio_gaps_batch(bottoms):
    """Clipped pairwise gaps for a stack of bottom rows b[N, d, 2]; returns (N, d, d)."""
    c = bottoms[..., 0]
    d = bottoms[..., 1]
    with np.errstate(over="ignore", divide="ignore"):
        r = d / np.where(c != 0, c, 1.0)
    # a ratio that overflows is numerically c = 0 and follows the same convention
    ok = (c != 0) & np.isfinite(r)
    r = np.where(ok, r, 0.0)
    gap = np.abs(r[..., :, None] - r[..., None, :])
    both = ok[..., :, None] & ok[..., None, :]
    return np.minimum(np.where(both, gap, 1.0), 1.0)


def delta3_batch(bottoms):
    gap = ratio_gaps_batch(bottoms)
    n = gap.shape[-1]
    idx = np.arange(n)
    gap[..., idx, idx] = 1.0
    return np.prod(gap, axis=-1).min(axis=-1)


def delta2_batch(bottoms):
    gap = ratio_gaps_batch(bottoms)
    n = gap.shape[-1]
    idx = np.arange(n)
    gap[..., idx, idx] = 0.0
    return gap.max(axis=-1).min(axis=-1)


# ------------------------------------------------------------------ vectorized enumeration

def lattice_points_in_box(m, bx, by, primitive=True, budget=5 * 10 ** 7):
    """Integer (c, d) with |(c, d) m|_x <= bx and |(c, d) m|_y <= by, vectorized.

    The basis is reduced first so the coordinate ranges are tight; returns
    (cd int array (N, 2), rows (N, 2) = (c, d) m).
    """
    m = np.asarray(m, dtype=float)
    gam = reduce_matrices(m[None])[0]
    red = gam @ m
    inv = np.linalg.inv(red)
    pmax = int(math.floor(bx * abs(inv[0, 0]) + by * abs(inv[1, 0]) + 1e-9))
    p = np.arange(-pmax, pmax + 1, dtype=float)
    # constraints |p r00 + q r10| <= bx and |p r01 + q r11| <= by, solved for q
    lo = np.full(p.shape, -np.inf)
    hi = np.full(p.shape, np.inf)
    for col, bnd in ((0, bx), (1, by)):
        a1, a2 = red[0, col], red[1, col]
        if a2 == 0:
            bad = np.abs(p * a1) > bnd
            lo[bad], hi[bad] = 1.0, 0.0
            continue
        e1 = (-bnd - p * a1) / a2
        e2 = (bnd - p * a1) / a2
        lo = np.maximum(lo, np.minimum(e1, e2))
        hi = np.minimum(hi, np.maximum(e1, e2))
    qlo = np.ceil(lo - 1e-9).astype(np.int64)
    qhi = np.floor(hi + 1e-9).astype(np.int64)
    cnt = np.maximum(qhi - qlo + 1, 0)
    total = int(cnt.sum())
    if total > budget:
        raise BudgetExceeded(f"{total} lattice points exceed budget {budget}")
    pp = np.repeat(p.astype(np.int64), cnt)
    start = np.repeat(qlo, cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    qq = start + offs
    keep = (pp != 0) | (qq != 0)
    if primitive:
        keep &= np.gcd(pp, qq) == 1
    pq = np.stack([pp[keep], qq[keep]], axis=1)
    rows = pq.astype(float) @ red
    ok = (np.abs(rows[:, 0]) <= bx * (1 + 1e-12)) & (np.abs(rows[:, 1]) <= by * (1 + 1e-12))
    pq, rows = pq[ok], rows[ok]
    cd = pq @ gam.astype(np.int64)
    return cd, rows


def primitive_in_disk(m, radius, budget=5 * 10 ** 7):
    """Primitive (c, d) with |(c, d) m| <= radius; returns (cd, rows, norms)."""
    cd, rows = lattice_points_in_box(m, radius, radius, True, budget)
    nr = np.hypot(rows[:, 0], rows[:, 1])
    k = nr <= radius * (1 + 1e-12)
    return cd[k], rows[k], nr[k]


def translation_bounds(bottom, xi, s):
    """(rho(g), rho(g n(xi) a(s))) per sample for bottom rows (c, d), arrays broadcast."""
    c, d = np.asarray(bottom)[..., 0], np.asarray(bottom)[..., 1]
    r0 = np.hypot(c, d)
    r1 = np.hypot(c * np.exp(-s), (c * xi + d) * np.exp(s))
    return r0, r1

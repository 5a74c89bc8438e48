"""The smoothed count N_{M,L}(F, psi) of values of Q(m) = Q0(m1) - Q0(m2), and its predicted terms."""
import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import quadrature
from .boxspec import BoxShape
from .errors import BudgetExceeded, DimensionMismatch, NonCertifiableTail, QuadratureFailure
from .thetaeng import AxisFn, TestFunction, diagonal_integral

DEFAULT_TOL = 1e-10
DEFAULT_BUDGET = 4 * 10 ** 7
CACHE_ENV = "BOXLAB_CACHE"


@dataclass
class CountSpec:
    """Count sum_m F(m/M) psi(q_scale * L * Q(m)) over Z^6.

    q_scale = 1/2 makes the count equal to the Fourier-side theta average with
    phase e(xi Q / 2); q_scale = 1 is the bare psi(L Q(m)).
    """
    shape: BoxShape
    M: float
    L: float
    F: TestFunction
    psi: TestFunction
    q_scale: float = 0.5
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if not (math.isfinite(self.M) and self.M >= 1 and math.isfinite(self.L) and self.L >= 1):
            raise ValueError("M and L must be finite and >= 1")
        if self.F.dims != 2 * self.shape.d:
            raise DimensionMismatch(f"F has {self.F.dims} variables, need {2 * self.shape.d}")
        if self.psi.dims != 1:
            raise DimensionMismatch("psi must be a function of one variable")

    def with_(self, **kw):
        d = dict(shape=self.shape, M=self.M, L=self.L, F=self.F, psi=self.psi,
                 q_scale=self.q_scale, tol=self.tol)
        d.update(kw)
        return CountSpec(**d)


def eval_Q(shape, m):
    m = np.asarray(m, dtype=float).reshape(2, -1)
    x = shape.coeffs
    return float(np.dot(x, m[0] ** 2) - np.dot(x, m[1] ** 2))


def separable_gaussian(shape, c1=1.0 / math.pi, c2=1.0 / math.pi):
    """F(u1, u2) = exp(-pi c1 Q0(u1)) exp(-pi c2 Q0(u2)) as a rank-1 TestFunction."""
    x = shape.coeffs
    axes = [AxisFn([1.0], c1 * xj, 0.0) for xj in x] + [AxisFn([1.0], c2 * xj, 0.0) for xj in x]
    return TestFunction([(1.0, axes)], 2 * shape.d)


def gaussian_psi(width=1.0, center=0.0):
    return TestFunction.gaussian(1, widths=width, centers=center)


# ------------------------------------------------------------ psi helpers

def _psi_eval(psi, x):
    v = psi(np.asarray(x, dtype=float)[..., None])
    return v


def _psi_pointwise_bound(psi, r):
    """sup over |x| >= r of |psi(x)|, from each term's Gaussian envelope."""
    tot = 0.0
    for k, ax in psi.terms:
        f = ax[0]
        alpha, c0, logpk, pn = f.envelope()
        s0 = r - abs(c0)
        # (1+|c0|+s)^deg exp(-pi alpha s^2) decreases once 2 pi alpha s >= deg
        if s0 <= 0 or 2 * math.pi * alpha * s0 < f.degree:
            return math.inf
        tot += abs(k) * pn * (1 + abs(c0) + s0) ** f.degree * math.exp(logpk - math.pi * alpha * s0 * s0)
    return tot


def _psi_radius(psi, eps):
    r = 1.0
    for _ in range(400):
        if _psi_pointwise_bound(psi, r) <= eps:
            return r
        r *= 1.1
    raise NonCertifiableTail("psi tail bound did not converge")


# ------------------------------------------------------------ block enumeration

def _axis_windows(fs, M, tol):
    """Per-axis integer radius K_j so that sum over |m| > K_j of |f(m/M)| < tol for all given f."""
    out = []
    for f in fs:
        k0, k1 = f.lattice_window(tol, 1.0 / M)
        out.append(max(abs(k0), abs(k1)))
    return out


def _folded(f, M, K):
    """w(m) = f(m/M) + f(-m/M) for m = 1..K, f(0) at m = 0."""
    m = np.arange(0, K + 1, dtype=float)
    w = f(m / M) + f(-m / M)
    w[0] = f(np.zeros(1))[0]
    return w


def _cache_path(cache_dir, key):
    return os.path.join(cache_dir, f"q0_{key}.npz") if cache_dir else None


def q0_octant(shape, K, cache_dir=None):
    """Q0 over the box 0 <= m_j <= K_j, as a flat array with its index order (cached by content hash)."""
    K = [int(k) for k in K]
    key = hashlib.sha256(json.dumps({"x": [repr(float(v)) for v in shape.coeffs], "K": K}).encode()).hexdigest()[:20]
    cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
    path = _cache_path(cache_dir, key)
    if path and os.path.exists(path):
        return np.load(path)["q"]
    x = shape.coeffs
    q1 = x[0] * np.arange(K[0] + 1, dtype=float) ** 2
    q2 = x[1] * np.arange(K[1] + 1, dtype=float) ** 2
    q3 = x[2] * np.arange(K[2] + 1, dtype=float) ** 2
    q = ((q1[:, None, None] + q2[None, :, None]) + q3[None, None, :]).ravel()
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(path, q=q)
    return q


# ------------------------------------------------------------ direct counts

@dataclass
class CountResult:
    value: float
    tail_bound: float
    points: int
    path: str
    meta: dict = field(default_factory=dict)


def count_direct(spec, method="fast", budget=DEFAULT_BUDGET, cache_dir=None, return_info=False):
    """sum over Z^6 of F(m/M) psi(q_scale L Q(m)), discarded tail below spec.tol.

    method 'fast': sign-folded octant, sorted distinct Q0 values and a windowed
    merge over value differences. method 'generic': all pairs of block points
    with psi evaluated at every pair, no sorting or windowing.
    """
    if spec.shape.d != 3:
        raise DimensionMismatch("counts implemented for d = 3")
    if spec.F.is_zero() or spec.psi.is_zero():
        res = CountResult(0.0, 0.0, 0, method)
        return res if return_info else 0.0
    total = 0j
    tail = 0.0
    npts = 0
    share = spec.tol / max(spec.F.rank, 1)
    for k, ax in spec.F.terms:
        fn = _count_fast if method == "fast" else _count_generic
        v, t, n = fn(spec, ax, share / max(abs(k), 1e-300), budget, cache_dir)
        total += k * v
        tail += abs(k) * t
        npts += n
    val = total.real if abs(total.imag) <= 1e-12 * max(1.0, abs(total)) else total
    res = CountResult(val, tail, npts, method)
    return res if return_info else val


def _block_tol(spec, ax, tol):
    """Per-axis truncation tolerance so the discarded part of the sum stays below tol."""
    psi_sup = _psi_sup(spec.psi)
    abs_sums = []
    for f in ax:
        k0, k1 = f.lattice_window(1e-30, 1.0 / spec.M)
        m = np.arange(k0, k1 + 1, dtype=float)
        abs_sums.append(float(np.abs(f(m / spec.M)).sum()) + 1e-30)
    prod_all = float(np.prod(abs_sums))
    return [tol / (4 * len(ax) * psi_sup * prod_all / s) for s in abs_sums], abs_sums, psi_sup


def _psi_sup(psi):
    tot = 0.0
    for k, ax in psi.terms:
        f = ax[0]
        alpha, c0, logpk, pn = f.envelope()
        r = max(1.0, f.lattice_window(1e-30, 1.0)[1] - c0, c0 - f.lattice_window(1e-30, 1.0)[0])
        grid = np.linspace(c0 - r, c0 + r, 20001)
        tot += abs(k) * float(np.abs(f(grid)).max()) * 1.01
    return tot


def _count_fast(spec, ax, tol, budget, cache_dir):
    M = float(spec.M)
    tols, abs_sums, psi_sup = _block_tol(spec, ax, tol)
    K = [max(a, b) for a, b in zip(_axis_windows(ax[:3], M, min(tols[:3])), _axis_windows(ax[3:], M, min(tols[3:])))]
    npts = int(np.prod([k + 1 for k in K]))
    if npts > budget:
        raise BudgetExceeded(f"{npts} octant points exceed budget {budget}")
    q = q0_octant(spec.shape, K, cache_dir)
    w = []
    for block in (ax[:3], ax[3:]):
        f1, f2, f3 = (_folded(f, M, Kj) for f, Kj in zip(block, K))
        w.append((f1[:, None, None] * f2[None, :, None] * f3[None, None, :]).ravel())
    w1, w2 = w
    # drop points whose weight cannot matter
    s1, s2 = float(np.abs(w1).sum()), float(np.abs(w2).sum())
    eps = tol / (4 * psi_sup * max(q.size, 1) * max(s1, s2, 1e-300))
    keep = (np.abs(w1) > eps) | (np.abs(w2) > eps)
    dropped = float(np.abs(w1[~keep]).sum() * s2 + np.abs(w2[~keep]).sum() * s1) * psi_sup
    q, w1, w2 = q[keep], w1[keep], w2[keep]
    order = np.argsort(q, kind="stable")
    q, w1, w2 = q[order], w1[order], w2[order]
    uq, start = np.unique(q, return_index=True)
    W1 = np.add.reduceat(w1, start) if q.size else w1
    W2 = np.add.reduceat(w2, start) if q.size else w2
    val, window_tail = _windowed_pair_sum(uq, W1, W2, spec, tol / 4)
    tail = tol * 0.5 + dropped + window_tail
    return val, tail, int(q.size)


def _windowed_pair_sum(q, W1, W2, spec, tol):
    """sum_{i,j} W1_i W2_j psi(s L (q_i - q_j)) over sorted distinct q, pairs beyond the psi window bounded."""
    sL = spec.q_scale * spec.L
    S1, S2 = float(np.abs(W1).sum()), float(np.abs(W2).sum())
    eps = tol / max(S1 * S2, 1e-300)
    R = _psi_radius(spec.psi, eps) / sL
    psi = spec.psi
    parts = [quadrature.ordered_sum(W1 * W2 * _psi_eval(psi, np.zeros(q.size)))]
    n = q.size
    k = 1
    while k < n:
        dif = q[k:] - q[:-k]
        if dif.min() > R:
            break
        idx = np.nonzero(dif <= R)[0]
        dd = dif[idx]
        a = W1[idx] * W2[idx + k] * _psi_eval(psi, -sL * dd)
        b = W1[idx + k] * W2[idx] * _psi_eval(psi, sL * dd)
        parts.append(quadrature.ordered_sum(a + b))
        k += 1
    return quadrature.ordered_sum(np.array(parts)), tol


def _count_generic(spec, ax, tol, budget, cache_dir=None):
    M = float(spec.M)
    tols, abs_sums, psi_sup = _block_tol(spec, ax, tol)
    x = spec.shape.coeffs
    blocks = []
    for b in range(2):
        fs = ax[3 * b:3 * b + 3]
        rng = [np.arange(k0, k1 + 1) for k0, k1 in (f.lattice_window(t, 1.0 / M) for f, t in zip(fs, tols[3 * b:3 * b + 3]))]
        g = np.stack(np.meshgrid(*rng, indexing="ij"), -1).reshape(-1, 3).astype(float)
        w = fs[0](g[:, 0] / M) * fs[1](g[:, 1] / M) * fs[2](g[:, 2] / M)
        q = g ** 2 @ x
        blocks.append((q, w))
    (q1, w1), (q2, w2) = blocks
    if float(q1.size) * q2.size > budget * 100:
        raise BudgetExceeded(f"{q1.size} x {q2.size} pairs exceed the generic-path budget")
    sL = spec.q_scale * spec.L
    parts = []
    step = max(1, 2_000_000 // max(q2.size, 1))
    for s in range(0, q1.size, step):
        arg = sL * (q1[s:s + step, None] - q2[None, :])
        parts.append(quadrature.ordered_sum((w1[s:s + step, None] * w2[None, :] * _psi_eval(spec.psi, arg)).ravel()))
    return quadrature.ordered_sum(np.array(parts)), tol, int(q1.size + q2.size)


def count_bruteforce(spec, radius):
    """Full double loop over ||m||_inf <= radius (test oracle)."""
    M = float(spec.M)
    r = np.arange(-radius, radius + 1, dtype=float)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    x = spec.shape.coeffs
    q = g ** 2 @ x
    sL = spec.q_scale * spec.L
    tot = []
    for k, ax in spec.F.terms:
        w1 = k * ax[0](g[:, 0] / M) * ax[1](g[:, 1] / M) * ax[2](g[:, 2] / M)
        w2 = ax[3](g[:, 0] / M) * ax[4](g[:, 1] / M) * ax[5](g[:, 2] / M)
        for i in range(q.size):
            tot.append(quadrature.ordered_sum(w1[i] * w2 * _psi_eval(spec.psi, sL * (q[i] - q))))
    return quadrature.ordered_sum(np.array(tot))


# ------------------------------------------------------------ predicted terms

def psi_integral(psi):
    return psi.integral()


def _double_integral_xi(F, coeffs, tol=1e-12):
    """int over xi of int F(v) e(xi Q(v) / 2) dv, from closed-form Gaussian integrals per axis."""
    d = len(coeffs)

    def inner(xi):
        out = np.zeros(np.shape(xi), dtype=complex)
        for k, ax in F.terms:
            prod = np.full(np.shape(xi), k, dtype=complex)
            for i, f in enumerate(ax):
                sgn = 1.0 if i < d else -1.0
                prod *= _chirped_integral(f, sgn * coeffs[i % d], xi)
            out += prod
        return out

    # map xi = tan(theta) on (-pi/2, pi/2); integrand decays like |xi|^{-d}
    def mapped(th):
        xi = np.tan(th)
        return inner(xi) / np.cos(th) ** 2

    lim = math.pi / 2
    res = quadrature.adaptive(mapped, -lim, lim, seeds=[0.0], tol=tol, max_width=0.05)
    return res.value, res


def _chirped_integral(f, c, xi):
    """int f(t) e(c xi t^2 / 2) dt for an array of xi, in closed form."""
    xi = np.asarray(xi, dtype=float)
    A = f.a - 1j * c * xi
    mu = f.b / (2 * math.pi * A)
    # int P(t) exp(-pi A (t - mu)^2) dt with moments of the centered Gaussian
    out = np.zeros(xi.shape, dtype=complex)
    p = f.poly
    for kk, pk in enumerate(p):
        if pk == 0:
            continue
        for j in range(0, kk + 1, 2):
            mom = (_dfact(j - 1) / (2 * math.pi * A) ** (j // 2))
            out += pk * math.comb(kk, j) * mom * mu ** (kk - j)
    return out / np.sqrt(A) * np.exp(f.b * f.b / (4 * math.pi * A))


def _dfact(n):
    return 1.0 if n <= 0 else float(np.prod(np.arange(n, 0, -2, dtype=float)))


def main_term(spec, tol=1e-12, return_info=False):
    """(M^4 / L) int psi * int int F(v) e(xi Q(v)/2) dv dxi, scaled for q_scale."""
    ip = psi_integral(spec.psi)
    if spec.F.is_zero() or ip == 0:
        return (0.0, None) if return_info else 0.0
    try:
        I, res = _double_integral_xi(spec.F, spec.shape.coeffs, tol)
    except QuadratureFailure:
        raise
    d = spec.shape.d
    # the count uses psi(s L Q); relative to s = 1/2 the xi-integral rescales by 1/(2s)
    val = spec.M ** (2 * d - 2) / spec.L * ip * I / (2 * spec.q_scale)
    out = val.real if abs(val.imag) <= 1e-10 * max(abs(val), 1e-300) else val
    return (out, res) if return_info else out


def diagonal_term(spec):
    """M^3 psi(0) sum over the 2^3 sign maps eps of int F(u, eps u) du."""
    p0 = complex(spec.psi(np.zeros((1, 1)))[0])
    if spec.F.is_zero() or p0 == 0:
        return 0.0
    val = spec.M ** spec.shape.d * p0 * diagonal_integral(spec.F)
    return val.real if abs(val.imag) <= 1e-12 * max(abs(val), 1e-300) else val


def main_term_separable(shape, M, L, psi_int, phi_moment_1):
    """(M^4/L) (8 pi^2 / (x1 x2 x3)) int psi int phi1 phi2 lambda dlambda."""
    X = float(np.prod(shape.coeffs))
    return M ** 4 / L * 8 * math.pi ** 2 / X * psi_int * phi_moment_1


def diagonal_term_separable(shape, M, psi0, phi_moment_half):
    """M^3 (16 pi / sqrt(x1 x2 x3)) psi(0) int phi1 phi2 lambda^{1/2} dlambda."""
    X = float(np.prod(shape.coeffs))
    return M ** 3 * 16 * math.pi / math.sqrt(X) * psi0 * phi_moment_half


# ------------------------------------------------------------ report

@dataclass
class AsymptoticReport:
    M: float
    L: float
    direct: float
    main_term: float
    diagonal_term: float
    residual: float = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.residual = self.direct - self.main_term - self.diagonal_term

    @property
    def ratio(self):
        return self.direct / (self.main_term + self.diagonal_term)

    def to_json(self):
        return json.dumps({"schema": "qcount/1", "M": self.M, "L": self.L, "direct": self.direct,
                           "main_term": self.main_term, "diagonal_term": self.diagonal_term,
                           "residual": self.residual, "ratio": self.ratio, "metadata": self.metadata})

    @classmethod
    def from_json(cls, s):
        d = json.loads(s)
        return cls(d["M"], d["L"], d["direct"], d["main_term"], d["diagonal_term"], metadata=d.get("metadata", {}))


def asymptotic_report(spec, **kw):
    info = count_direct(spec, return_info=True, **kw)
    mt = main_term(spec)
    dt = diagonal_term(spec)
    return AsymptoticReport(float(spec.M), float(spec.L), float(np.real(info.value)), float(np.real(mt)),
                            float(np.real(dt)), metadata={"points": info.points, "tail_bound": info.tail_bound,
                                                          "q_scale": spec.q_scale})


def reports_to_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "L", "direct", "main", "diagonal", "residual"])
        for r in reports:
            w.writerow([r.M, r.L, repr(r.direct), repr(r.main_term), repr(r.diagonal_term), repr(r.residual)])

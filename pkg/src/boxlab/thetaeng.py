"""Shale-Weil operators, Heisenberg translations and theta sums.

Functions live in the class of finite sums of tensor products of one-variable
factors P(t) exp(-pi a t^2 + b t) with P a polynomial, Re a > 0 and complex b.
The class is closed under dilation, chirps, translation, modulation and the
Fresnel transform, so every operator below acts exactly; Hermite coefficients
are available as a view by projection.
"""
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite as _herm
from numpy.polynomial import polynomial as _poly

from . import quadrature
from .errors import (DimensionMismatch, FloorViolation, NearSingularC, NonCertifiableTail,
                     QuadratureFailure, TruncationBudget, TruncationOverflow)
from .sl2geom import GroupTuple, iwasawa

TWO_PI = 2.0 * math.pi
NEAR_SINGULAR_C = 1e-8
DEFAULT_TOL = 1e-14
DEFAULT_FLOOR = 1e-6
DEFAULT_BOX_BUDGET = 5 * 10 ** 7
N_HERMITE = 24


def e(x):
    return np.exp(2j * np.pi * np.asarray(x))


def _c(z):
    return complex(z)


def _trim(p):
    p = np.asarray(p, dtype=complex)
    if p.size == 0:
        return np.zeros(1, dtype=complex)
    nz = np.nonzero(p)[0]
    return p[: nz[-1] + 1] if nz.size else np.zeros(1, dtype=complex)


def _compose_linear(p, s, r):
    """Coefficients of P(s t + r) from those of P (ascending)."""
    out = np.zeros(len(p), dtype=complex)
    power = np.array([1.0 + 0j])
    lin = np.array([r, s], dtype=complex)
    for k, ck in enumerate(p):
        if k:
            power = _poly.polymul(power, lin)
        out[: power.size] += ck * power
    return _trim(out)


def _even_moment(j, A):
    """int z^j exp(-pi A z^2) dz / A^{-1/2} for even j."""
    return _double_factorial(j - 1) / (TWO_PI * A) ** (j // 2)


def _double_factorial(n):
    return 1.0 if n <= 0 else float(np.prod(np.arange(n, 0, -2, dtype=float)))


def _gauss_poly_integral(p, A, mu):
    """int P(y) exp(-pi A (y - mu)^2) dy, with mu a polynomial in x; returns a polynomial in x.

    The principal square root is used for A^{-1/2}, valid since Re A > 0.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=complex))
    out = np.zeros(1, dtype=complex)
    mu_pow = [np.array([1.0 + 0j])]
    for k in range(1, len(p)):
        mu_pow.append(_poly.polymul(mu_pow[-1], mu))
    for k, pk in enumerate(p):
        if pk == 0:
            continue
        for j in range(0, k + 1, 2):
            term = pk * math.comb(k, j) * _even_moment(j, A) * mu_pow[k - j]
            out = _poly.polyadd(out, term)
    return _trim(out) / np.sqrt(A + 0j)


# ------------------------------------------------------------ one axis

class AxisFn:
    """t -> P(t) exp(-pi a t^2 + b t)."""

    __slots__ = ("poly", "a", "b")

    def __init__(self, poly=(1.0,), a=1.0, b=0.0):
        self.poly = _trim(poly)
        self.a = _c(a)
        self.b = _c(b)
        if not self.a.real > 0:
            raise NonCertifiableTail(f"Gaussian factor needs Re a > 0, got {self.a}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return _poly.polyval(t, self.poly) * np.exp(-math.pi * self.a * t * t + self.b * t)

    def copy(self):
        return AxisFn(self.poly.copy(), self.a, self.b)

    @property
    def degree(self):
        return self.poly.size - 1

    # exact operators; each returns (scalar, AxisFn)
    def dilate(self, s):
        """t -> f(s t)."""
        return 1.0, AxisFn(_compose_linear(self.poly, s, 0.0), self.a * s * s, self.b * s)

    def chirp(self, c):
        """Multiply by e(c t^2 / 2)."""
        return 1.0, AxisFn(self.poly, self.a - 1j * c, self.b)

    def shift(self, x):
        """t -> f(t + x)."""
        const = np.exp(-math.pi * self.a * x * x + self.b * x)
        return complex(const), AxisFn(_compose_linear(self.poly, 1.0, x),
                                      self.a, self.b - TWO_PI * self.a * x)

    def modulate(self, y):
        """Multiply by e(t y)."""
        return 1.0, AxisFn(self.poly, self.a, self.b + TWO_PI * 1j * y)

    def conj(self):
        return AxisFn(np.conj(self.poly), np.conj(self.a), np.conj(self.b))

    def reflect(self):
        return self.dilate(-1.0)

    def times(self, other):
        return AxisFn(_poly.polymul(self.poly, other.poly), self.a + other.a, self.b + other.b)

    def integral(self):
        """int f(t) dt in closed form."""
        A = self.a
        mu = self.b / (TWO_PI * A)
        val = _gauss_poly_integral(self.poly, A, [mu])[0]
        return complex(val * np.exp(self.b * self.b / (4 * math.pi * A)))

    def upper(self, a, b):
        """R1 of (a b; 0 1/a): |a|^{1/2} e(ab t^2/2) f(a t)."""
        _, g = self.dilate(a)
        _, g = g.chirp(a * b)
        return math.sqrt(abs(a)), g

    def fresnel(self, a, b, c, d):
        """R1 of (a b; c d) with c != 0, in closed form."""
        if abs(c) <= NEAR_SINGULAR_C:
            raise NearSingularC(f"|c| = {abs(c):.3g} too small; use the factorized path")
        A = self.a - 1j * d / c
        beta = self.b
        # mu(x) = (beta - 2 pi i x / c) / (2 pi A)
        mu = np.array([beta / (TWO_PI * A), -1j / (c * A)])
        newpoly = _gauss_poly_integral(self.poly, A, mu)
        scal = abs(c) ** -0.5 * np.exp(beta * beta / (4 * math.pi * A))
        na = 1.0 / (c * c * A) - 1j * a / c
        nb = -1j * beta / (c * A)
        return complex(scal), AxisFn(newpoly, na, nb)

    def fourier(self):
        """f^(xi) = int f(t) e(-xi t) dt."""
        return self.fresnel(0.0, -1.0, 1.0, 0.0)

    # tails
    def envelope(self):
        """(alpha, center, log_peak, pnorm) with |f(t)| <= pnorm (1+|t|)^deg exp(log_peak - pi alpha (t-center)^2)."""
        alpha = self.a.real
        beta = self.b.real
        center = beta / (TWO_PI * alpha)
        return alpha, center, math.pi * alpha * center * center, float(np.abs(self.poly).sum())

    def tail_sum_bound(self, lo, hi, step=1.0):
        """Bound on sum over t in step*Z outside [lo, hi] of |f(t)|."""
        alpha, c0, logpk, pn = self.envelope()
        deg = self.degree
        total = 0.0
        for r in (c0 - lo, hi - c0):
            if r <= step:
                return math.inf
            r0 = r - step
            D = 1.0 + abs(c0) + r0
            slope = 2 * math.pi * alpha * r0 - deg / D
            if slope <= 0:
                return math.inf
            total += pn * D ** deg * math.exp(logpk - math.pi * alpha * r0 * r0) / (slope * step)
        return total

    def tail_integral_bound(self, lo, hi):
        """Bound on int outside [lo, hi] of |f(t)| dt."""
        alpha, c0, logpk, pn = self.envelope()
        deg = self.degree
        total = 0.0
        for r in (c0 - lo, hi - c0):
            if r <= 0:
                return math.inf
            D = 1.0 + abs(c0) + r
            slope = 2 * math.pi * alpha * r - deg / D
            if slope <= 0:
                return math.inf
            total += pn * D ** deg * math.exp(logpk - math.pi * alpha * r * r) / slope
        return total

    def lattice_window(self, tol, step=1.0):
        """Integer range [k0, k1] of points t = k*step whose complement sums below tol."""
        alpha, c0, logpk, pn = self.envelope()
        deg = self.degree
        width = math.sqrt(max(logpk + math.log(max(pn, 1e-300)) - math.log(tol), 1.0) / (math.pi * alpha))
        r = max(width, step) + 2 * step
        for _ in range(200):
            if self.tail_sum_bound(c0 - r, c0 + r, step) <= tol:
                break
            r = r * 1.25 + step
        else:
            raise NonCertifiableTail("tail bound did not converge")
        return int(math.floor((c0 - r) / step)), int(math.ceil((c0 + r) / step))

    def to_dict(self):
        return {"poly": [[z.real, z.imag] for z in self.poly],
                "a": [self.a.real, self.a.imag], "b": [self.b.real, self.b.imag]}

    @classmethod
    def from_dict(cls, d):
        return cls([complex(*z) for z in d["poly"]], complex(*d["a"]), complex(*d["b"]))

    def __repr__(self):
        return f"AxisFn(deg={self.degree}, a={self.a:.6g}, b={self.b:.6g})"


def hermite_poly(n):
    """Polynomial coefficients of the L2-normalized Hermite function h_n(t) = c_n H_n(sqrt(2 pi) t) e^{-pi t^2}."""
    coef = np.zeros(n + 1)
    coef[n] = 1.0
    p = _herm.herm2poly(coef)
    s = math.sqrt(TWO_PI)
    p = p * s ** np.arange(p.size)
    return p * 2 ** 0.25 / math.sqrt(2.0 ** n * math.factorial(n))


def hermite_axis(coeffs, scale=1.0):
    """sum_n c_n s^{-1/2} h_n(t / s) as an AxisFn."""
    coeffs = np.asarray(coeffs, dtype=complex)
    p = np.zeros(coeffs.size, dtype=complex)
    for n, cn in enumerate(coeffs):
        if cn != 0:
            p[: n + 1] += cn * hermite_poly(n)
    p = _compose_linear(p, 1.0 / scale, 0.0) / math.sqrt(scale)
    return AxisFn(p, 1.0 / scale ** 2, 0.0)


# ------------------------------------------------------------ test functions

class TestFunction:
    """Finite sum of coef * prod_i f_i(t_i)."""

    __test__ = False

    def __init__(self, terms, dims=None):
        terms = [(complex(c), tuple(ax)) for c, ax in terms]
        if dims is None:
            if not terms:
                raise ValueError("dims required for the zero function")
            dims = len(terms[0][1])
        for _, ax in terms:
            if len(ax) != dims:
                raise DimensionMismatch("all terms need the same number of axes")
        self.dims = dims
        self.terms = [t for t in terms if t[0] != 0]

    # constructors
    @classmethod
    def zero(cls, dims):
        return cls([], dims)

    @classmethod
    def gaussian(cls, dims, widths=1.0, centers=0.0, coef=1.0):
        """coef * prod exp(-pi w_i (t_i - c_i)^2)."""
        w = np.broadcast_to(np.asarray(widths, dtype=float), (dims,))
        c = np.broadcast_to(np.asarray(centers, dtype=float), (dims,))
        axes = []
        const = complex(coef)
        for wi, ci in zip(w, c):
            s, f = AxisFn([1.0], wi, 0.0).shift(-ci)
            axes.append(f)
            const *= s
        return cls([(const, axes)], dims)

    @classmethod
    def product(cls, axes, coef=1.0):
        return cls([(coef, list(axes))], len(axes))

    @classmethod
    def hermite(cls, coeffs_per_axis, scales=None):
        dims = len(coeffs_per_axis)
        scales = [1.0] * dims if scales is None else list(scales)
        return cls([(1.0, [hermite_axis(c, s) for c, s in zip(coeffs_per_axis, scales)])], dims)

    # algebra
    @property
    def rank(self):
        return len(self.terms)

    def is_zero(self):
        return not self.terms

    def __add__(self, other):
        if other.dims != self.dims:
            raise DimensionMismatch("dims differ")
        return TestFunction(self.terms + other.terms, self.dims)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, c):
        return TestFunction([(c * k, ax) for k, ax in self.terms], self.dims)

    def tensor(self, other):
        return TestFunction([(k1 * k2, a1 + a2) for k1, a1 in self.terms for k2, a2 in other.terms],
                            self.dims + other.dims)

    def conj(self):
        return TestFunction([(np.conj(k), [f.conj() for f in ax]) for k, ax in self.terms], self.dims)

    def map_axes(self, ops):
        """Apply ops[i] (AxisFn -> (scalar, AxisFn), or None) on each axis of every term."""
        if len(ops) != self.dims:
            raise DimensionMismatch(f"{len(ops)} operators for {self.dims} axes")
        out = []
        for k, ax in self.terms:
            new = []
            for op, f in zip(ops, ax):
                if op is None:
                    new.append(f)
                    continue
                s, g = op(f)
                k = k * s
                new.append(g)
            out.append((k, new))
        return TestFunction(out, self.dims)

    # evaluation
    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        if pts.shape[-1] != self.dims:
            raise DimensionMismatch(f"points have {pts.shape[-1]} coordinates, function {self.dims}")
        out = np.zeros(pts.shape[:-1], dtype=complex)
        for k, ax in self.terms:
            v = np.full(pts.shape[:-1], k, dtype=complex)
            for i, f in enumerate(ax):
                v = v * f(pts[..., i])
            out += v
        return out

    def integral(self):
        return sum(k * np.prod([f.integral() for f in ax]) for k, ax in self.terms) if self.terms else 0j

    def inner(self, other):
        """<self, other> = int self * conj(other)."""
        tot = 0j
        for k1, a1 in self.terms:
            for k2, a2 in other.terms:
                tot += k1 * np.conj(k2) * np.prod([f.times(g.conj()).integral() for f, g in zip(a1, a2)])
        return tot

    def norm(self):
        return math.sqrt(max(self.inner(self).real, 0.0))

    def tail_bound(self, radius):
        """Bound on int over the complement of the cube [-radius, radius]^dims of |F|."""
        tot = 0.0
        for k, ax in self.terms:
            full = [abs_integral_bound(f) for f in ax]
            tails = [f.tail_integral_bound(-radius, radius) for f in ax]
            for i in range(self.dims):
                tot += abs(k) * tails[i] * np.prod(full[:i] + full[i + 1:])
        return tot

    def hermite_view(self, n_max=N_HERMITE, scales=None, tol=1e-10):
        """Per-term, per-axis Hermite coefficients up to degree n_max.

        Raises TruncationOverflow if an axis loses more than tol of its squared norm.
        """
        scales = [1.0] * self.dims if scales is None else list(scales)
        out = []
        for k, ax in self.terms:
            rows = []
            for f, s in zip(ax, scales):
                cs = np.array([f.times(hermite_axis(np.eye(n + 1)[n], s)).integral() for n in range(n_max + 1)])
                nf = f.times(f.conj()).integral().real
                lost = nf - float(np.sum(np.abs(cs) ** 2))
                if lost > tol * max(nf, 1e-300):
                    raise TruncationOverflow(f"Hermite view needs degree > {n_max} (lost {lost / nf:.2e})")
                rows.append(cs)
            out.append((k, rows))
        return out

    def to_json(self):
        return json.dumps({"schema": "theta/1", "dims": self.dims,
                           "terms": [{"coef": [k.real, k.imag], "axes": [f.to_dict() for f in ax]}
                                     for k, ax in self.terms]})

    @classmethod
    def from_json(cls, s):
        d = json.loads(s) if isinstance(s, str) else s
        if d.get("schema") != "theta/1":
            raise ValueError("not a theta/1 document")
        return cls([(complex(*t["coef"]), [AxisFn.from_dict(a) for a in t["axes"]]) for t in d["terms"]],
                   d["dims"])

    def __repr__(self):
        return f"TestFunction(dims={self.dims}, rank={self.rank})"


def abs_integral_bound(f):
    """Bound on int |f|."""
    alpha, c0, logpk, pn = f.envelope()
    deg = f.degree
    # int (1+|t|)^deg exp(-pi alpha (t-c0)^2) <= sum_k C(deg,k)(1+|c0|)^(deg-k) E|z|^k
    tot = 0.0
    for k in range(deg + 1):
        mom = math.gamma((k + 1) / 2) / (math.pi * alpha) ** ((k + 1) / 2)
        tot += math.comb(deg, k) * (1 + abs(c0)) ** (deg - k) * mom
    return pn * math.exp(logpk) * tot


# ------------------------------------------------------------ Heisenberg group

@dataclass(frozen=True)
class HeisenbergPoint:
    x: tuple
    y: tuple
    z: float = 0.0

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        y = tuple(float(v) for v in np.atleast_1d(self.y))
        if len(x) != len(y):
            raise DimensionMismatch("x and y need the same length")
        if not all(math.isfinite(v) for v in x + y + (float(self.z),)):
            raise ValueError("non-finite Heisenberg coordinates")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", float(self.z))

    @property
    def d(self):
        return len(self.x)

    @classmethod
    def identity(cls, d):
        return cls((0.0,) * d, (0.0,) * d, 0.0)

    def inverse(self):
        return HeisenbergPoint(tuple(-v for v in self.x), tuple(-v for v in self.y), -self.z)

    def act(self, g):
        """h^g = ((x y) g, z) under the block embedding of G^d."""
        x = np.array(self.x)
        y = np.array(self.y)
        f = g.factors
        nx = x * f[:, 0, 0] + y * f[:, 1, 0]
        ny = x * f[:, 0, 1] + y * f[:, 1, 1]
        return HeisenbergPoint(tuple(nx), tuple(ny), self.z)

    def __mul__(self, other):
        return heisenberg_mul(self, other)

    def allclose(self, other, tol=1e-12):
        return (np.allclose(self.x, other.x, atol=tol) and np.allclose(self.y, other.y, atol=tol)
                and abs(self.z - other.z) <= tol)


def heisenberg_mul(h1, h2):
    if h1.d != h2.d:
        raise DimensionMismatch(f"Heisenberg dims {h1.d} and {h2.d}")
    x1, y1, x2, y2 = map(np.array, (h1.x, h1.y, h2.x, h2.y))
    z = h1.z + h2.z - 0.5 * (float(x1 @ y2) - float(x2 @ y1))
    return HeisenbergPoint(tuple(x1 + x2), tuple(y1 + y2), z)


def h_gamma(gamma):
    """((c_j d_j / 2)_j, (a_j b_j / 2)_j, 0) for gamma in Gamma^d."""
    f = gamma.factors
    return HeisenbergPoint(tuple(0.5 * f[:, 1, 0] * f[:, 1, 1]), tuple(0.5 * f[:, 0, 0] * f[:, 0, 1]), 0.0)


LITERAL = "literal"
STANDARD = "standard"


def _w_axis(x, y, convention):
    """Axis part of W(x, y, 0): shift by x, then (standard only) modulation by e(t y)."""
    def op(f):
        s1, g = f.shift(x)
        if convention == STANDARD:
            s2, g = g.modulate(y)
            s1 *= s2
        return s1, g
    return op


def schrodinger(h, f, convention=LITERAL):
    """[W(h) f](t) = e(-z + x.y/2) f(t + x), with the extra factor e(t.y) for the standard convention.

    On functions of 2d variables the operator is W(h) (x) C W(h) C, as needed by the
    tensor theta function.
    """
    if convention not in (LITERAL, STANDARD):
        raise ValueError(f"unknown convention {convention!r}")
    d = h.d
    phase = complex(e(-h.z + 0.5 * float(np.dot(h.x, h.y))))
    ops = [_w_axis(h.x[j], h.y[j], convention) for j in range(d)]
    if f.dims == d:
        return f.map_axes(ops).scale(phase)
    if f.dims == 2 * d:
        conj_ops = [_w_axis(h.x[j], -h.y[j], convention) for j in range(d)]
        # C W C: conjugate phase, shift by x, modulation by e(-t y)
        return f.map_axes(ops + conj_ops)
    raise DimensionMismatch(f"Heisenberg dim {d} vs function dims {f.dims}")


def composition_phase(h1, h2, convention=LITERAL):
    """The scalar c with W(h1) W(h2) = c W(h1 h2), as predicted for the convention."""
    if convention == STANDARD:
        return 1.0 + 0j
    return complex(e(-float(np.dot(h1.x, h2.y))))


# ------------------------------------------------------------ Shale-Weil

def _check_upper(p):
    p = np.asarray(p, dtype=float)
    if p.shape != (2, 2) or abs(p[1, 0]) > 0 or abs(p[0, 0] * p[1, 1] - 1) > 1e-10:
        raise ValueError("need an upper-triangular unimodular 2x2 matrix")
    return p


def _sl2_axis_op(g, conj=False):
    """AxisFn operator for R1(g) (or C R1(g) C), choosing a well-conditioned route."""
    a, b, c, d = (float(v) for v in np.asarray(g, dtype=float).ravel())

    def direct(f):
        if conj:
            s, r = direct_plain(f.conj())
            return np.conj(s), r.conj()
        return direct_plain(f)

    def direct_plain(f):
        if abs(c) <= NEAR_SINGULAR_C:
            if abs(c) > 0:
                raise NearSingularC(f"|c| = {abs(c):.3g}")
            return f.upper(a, b)
        return f.fresnel(a, b, c, d)
    return direct


def shale_weil_upper(p, f, axis=None, conj=False):
    """R1(p) f(x) = |a|^{1/2} e(ab x^2/2) f(ax) on one axis (all axes if axis is None)."""
    p = _check_upper(p)
    op = _sl2_axis_op(p, conj)
    ops = [op if axis is None or i == axis else None for i in range(f.dims)]
    return f.map_axes(ops)


def shale_weil_general(g, f, axis=None, conj=False):
    """R1(g) f via the Fresnel integral formula; needs |c| > 1e-8."""
    g = np.asarray(g, dtype=float)
    if abs(g[1, 0]) <= NEAR_SINGULAR_C:
        raise NearSingularC(f"|c| = {abs(g[1, 0]):.3g}; use shale_weil_upper or the Iwasawa route")
    op = _sl2_axis_op(g, conj)
    ops = [op if axis is None or i == axis else None for i in range(f.dims)]
    return f.map_axes(ops)


def _k(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rotation_ops(theta, conj):
    """Operator for R1(k(theta)) via well-conditioned factors (projective)."""
    t = math.remainder(theta, 2 * math.pi)
    if abs(t) < 1e-15:
        return None
    if abs(abs(t) - math.pi) < 1e-15:
        return lambda f: (1.0, f.reflect()[1])
    if abs(math.sin(t)) >= 0.5:
        return _sl2_axis_op(_k(t), conj)
    # k(t) = k(t - pi/2) k(pi/2); both factors have |c| >= sqrt(3)/2 here
    first = _sl2_axis_op(_k(math.pi / 2), conj)
    second = _sl2_axis_op(_k(t - math.pi / 2), conj)

    def op(f):
        s1, g = first(f)
        s2, g = second(g)
        return s1 * s2, g
    return op


def apply_sl2(g, f, axes, conj=False):
    """R1(g) on the given axes via the Iwasawa route (projective, unit-modulus scalar)."""
    ops = [None] * f.dims
    for ax, m in zip(axes, np.asarray(g, dtype=float).reshape(-1, 2, 2)):
        ops[ax] = _iwasawa_op(m, conj)
    return f.map_axes(ops)


def _iwasawa_op(m, conj):
    ic = iwasawa(GroupTuple(m[None]))
    u, v, th, sg = float(ic.u[0]), float(ic.v[0]), float(ic.theta[0]), int(ic.sign[0])
    rot = _rotation_ops(th, conj)
    sq = math.sqrt(v)

    def op(f):
        k = 1.0
        if rot is not None:
            k, f = rot(f)
        s2, f = (f.conj().upper(sq, u / sq)) if conj else f.upper(sq, u / sq)
        if conj:
            f = f.conj()
        k *= s2
        if sg < 0:
            f = f.reflect()[1]
        return k, f
    return op


def nak_consistency(g, f):
    """(scalar, max deviation): R1(g) f from the Fresnel formula vs the Iwasawa composition."""
    A = shale_weil_general(g, f) if abs(np.asarray(g)[1, 0]) > NEAR_SINGULAR_C else shale_weil_upper(g, f)
    B = apply_sl2(g, f, [0])
    grid = np.linspace(-4, 4, 161)[:, None]
    va, vb = A(grid), B(grid)
    i = int(np.argmax(np.abs(vb)))
    scal = va[i] / vb[i]
    return complex(scal), float(np.max(np.abs(va - scal * vb)))


def rotate_dd(F, theta):
    """F_theta = R_{d,d}(k(theta)) F; metaplectic phases cancel between the two blocks."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = theta.size
    if F.dims != 2 * d:
        raise DimensionMismatch(f"{d} angles for a function of {F.dims} variables")
    ops = [_rotation_ops(t, False) for t in theta] + [_rotation_ops(t, True) for t in theta]
    return F.map_axes(ops)


def r_dd(g, F, route="iwasawa"):
    """R_{d,d}(g) F; route 'iwasawa' composes N A K factors, 'fresnel' uses the closed Fresnel form."""
    d = g.d
    if F.dims != 2 * d:
        raise DimensionMismatch(f"group dim {d} vs function dims {F.dims}")
    if route == "iwasawa":
        ops = [_iwasawa_op(g.factors[j], False) for j in range(d)] + \
              [_iwasawa_op(g.factors[j], True) for j in range(d)]
    else:
        ops = [_general_op(g.factors[j], False) for j in range(d)] + \
              [_general_op(g.factors[j], True) for j in range(d)]
    return F.map_axes(ops)


def _general_op(m, conj):
    if abs(m[1, 0]) > NEAR_SINGULAR_C:
        return _sl2_axis_op(m, conj)
    if m[1, 0] == 0:
        return _sl2_axis_op(m, conj)
    return _iwasawa_op(m, conj)


# ------------------------------------------------------------ lattice sums

@dataclass
class LatticeSum:
    value: complex
    tail: float
    points: int


def axis_lattice_sum(f, tol=DEFAULT_TOL, step=1.0):
    """(LatticeSum, sum of |f|) for sum over k in Z of f(k * step), tail certified below tol."""
    k0, k1 = f.lattice_window(tol, step)
    ks = np.arange(k0, k1 + 1, dtype=float) * step
    vals = f(ks)
    tail = f.tail_sum_bound(k0 * step, k1 * step, step)
    return LatticeSum(quadrature.ordered_sum(vals), tail, ks.size), float(np.abs(vals).sum())


def factorized_sum(F, tol=DEFAULT_TOL, step=1.0):
    """sum over Z^dims of F(k * step) for each rank-1 term as a product of 1-d sums."""
    tot = 0j
    err = 0.0
    npts = 0
    for k, ax in F.terms:
        vals, abss, tails = [], [], []
        for f in ax:
            ls, a = axis_lattice_sum(f, tol, step)
            vals.append(ls.value)
            abss.append(a)
            tails.append(ls.tail)
            npts += ls.points
        tot += k * np.prod(vals)
        for i in range(len(ax)):
            err += abs(k) * tails[i] * np.prod([abss[j] + tails[j] for j in range(len(ax)) if j != i])
    return LatticeSum(complex(tot), err, npts)


def box_sum(F, tol=DEFAULT_TOL, budget=DEFAULT_BOX_BUDGET):
    """sum over Z^dims of F(m) by direct evaluation on a certified box (no factorization)."""
    if F.is_zero():
        return LatticeSum(0j, 0.0, 0)
    lo = np.full(F.dims, np.iinfo(np.int64).max)
    hi = np.full(F.dims, np.iinfo(np.int64).min)
    for k, ax in F.terms:
        share = tol / (max(abs(k), 1e-300) * max(F.rank, 1) * F.dims)
        for i, f in enumerate(ax):
            others = np.prod([abs_sum_bound(g) for j, g in enumerate(ax) if j != i])
            a, b = f.lattice_window(share / max(others, 1e-300))
            lo[i] = min(lo[i], a)
            hi[i] = max(hi[i], b)
    sizes = hi - lo + 1
    total_pts = float(np.prod(sizes.astype(float)))
    if total_pts > budget:
        raise TruncationBudget(f"box of {total_pts:.3g} points exceeds budget {budget:.3g}")
    axes = [np.arange(lo[i], hi[i] + 1, dtype=float) for i in range(F.dims)]
    # iterate over the first axis, evaluating the full remaining grid each time
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, F.dims - 1) \
        if F.dims > 1 else np.zeros((1, 0))
    partial = []
    for m0 in axes[0]:
        pts = np.concatenate([np.full((rest.shape[0], 1), m0), rest], axis=1)
        partial.append(quadrature.ordered_sum(F(pts)))
    return LatticeSum(quadrature.ordered_sum(np.array(partial)), tol, int(total_pts))


def abs_sum_bound(f):
    """Bound on sum over Z of |f(k)|."""
    k0, k1 = f.lattice_window(1e-30)
    ks = np.arange(k0, k1 + 1, dtype=float)
    return float(np.abs(f(ks)).sum()) + 1e-30


# ------------------------------------------------------------ theta functions

def theta_d(f, h, g, tol=DEFAULT_TOL):
    """Theta_f(h, g) = sum_m [W(h) R_d(g) f](m); defined up to the metaplectic phase."""
    d = g.d
    if f.dims != d:
        raise DimensionMismatch("function dims must equal d")
    G = f.map_axes([_iwasawa_op(g.factors[j], False) for j in range(d)])
    if h is not None:
        G = schrodinger(h, G, STANDARD)
    return factorized_sum(G, tol).value


def theta_dd(F, h=None, g=None, method="fast", convention=STANDARD, tol=DEFAULT_TOL,
             floor=DEFAULT_FLOOR, budget=DEFAULT_BOX_BUDGET, return_info=False):
    """Theta~_F(h, g) = sum over Z^{2d} of [W(h) R_{d,d}(g) F](m).

    method 'fast': Iwasawa coordinates, rotate, then the explicit upper-triangular
    formula as a product of 1-d lattice sums. method 'direct': closed Fresnel form
    of R_{d,d}(g) F summed pointwise over a certified box in Z^{2d}.
    """
    if g is None:
        raise ValueError("g is required")
    d = g.d
    if F.dims != 2 * d:
        raise DimensionMismatch(f"group dim {d} vs function dims {F.dims}")
    if h is not None and h.d != d:
        raise DimensionMismatch("Heisenberg dim differs from group dim")
    if F.is_zero():
        return (0j, LatticeSum(0j, 0.0, 0)) if return_info else 0j
    if method == "fast":
        try:
            res = _theta_fast(F, h, g, convention, tol, floor)
        except FloorViolation:
            res = _theta_direct(F, h, g, convention, tol, budget)
    elif method == "direct":
        res = _theta_direct(F, h, g, convention, tol, budget)
    else:
        raise ValueError(f"unknown method {method!r}")
    return (res.value, res) if return_info else res.value


def _theta_fast(F, h, g, convention, tol, floor):
    d = g.d
    ic = iwasawa(g)
    if np.min(ic.v) < floor:
        raise FloorViolation(f"v_min = {np.min(ic.v):.3g} below floor {floor}")
    Ft = rotate_dd(F, ic.theta)
    ops = []
    for conj in (False, True):
        for j in range(d):
            sq = math.sqrt(ic.v[j])
            uj = float(ic.u[j])
            flip = ic.sign[j] < 0
            ops.append(_na_op(sq, uj, flip, conj))
    G = Ft.map_axes(ops)
    if h is not None:
        G = schrodinger(h, G, convention)
    return factorized_sum(G, tol)


def _na_op(sq, u, flip, conj):
    def op(f):
        if flip:
            f = f.reflect()[1]
        if conj:
            s, r = f.conj().upper(sq, u / sq)
            return s, r.conj()
        return f.upper(sq, u / sq)
    return op


def _theta_direct(F, h, g, convention, tol, budget):
    G = r_dd(g, F, route="fresnel")
    if h is not None:
        G = schrodinger(h, G, convention)
    return box_sum(G, tol, budget)


def theta_cusp_main(F, g):
    """(v_1...v_d)^{1/2} F_theta(0) from the Iwasawa coordinates of g."""
    ic = iwasawa(g)
    Ft = rotate_dd(F, ic.theta)
    return complex(np.prod(ic.v) ** 0.5 * Ft(np.zeros(F.dims)))


def theta_cusp_asymptotic(F, g, c_f=None):
    """(main term, envelope c_F * alpha_d(g)) for reduced g."""
    from .sl2geom import alpha_top
    main = theta_cusp_main(F, g)
    if c_f is None:
        c_f = envelope_constant(F)
    return main, float(c_f * alpha_top(g))


def envelope_constant(F, samples=None, seed=0, n=200):
    """Empirical C_F with |Theta~_F(1, g)| <= C_F alpha_d(g) over reduced sample points."""
    from .sl2geom import alpha_top
    d = F.dims // 2
    if samples is None:
        samples = random_reduced(d, n, seed)
    ratios = [abs(theta_dd(F, None, g)) / alpha_top(g) for g in samples]
    return float(max(ratios))


def random_reduced(d, n, seed, v_max=50.0):
    """Reduced points n(u) a(v) k(theta) with u in [-1/2, 1/2), u^2 + v^2 >= 1, log-uniform v."""
    from .sl2geom import IwasawaCoords
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        u = rng.uniform(-0.5, 0.5, d)
        v = np.exp(rng.uniform(math.log(math.sqrt(3) / 2), math.log(v_max), d))
        if np.any(u * u + v * v < 1):
            continue
        th = rng.uniform(0, math.pi, d)
        out.append(IwasawaCoords(u, v, th, np.ones(d, dtype=int)).assemble())
    return out


# ------------------------------------------------------------ Fourier side of the count

def orbit_theta(F, coeffs, xi, M, scale_sum=True):
    """Theta~_F(1, g0 n(xi) a(log M) g0^{-1}) at many xi, via the explicit formula.

    For g = (n(xi x_j) a(log M))_j this is M^{-d} sum F(m/M, n/M) e(xi Q(m, n) / 2),
    evaluated per rank-1 term as a product of one-variable exponential sums.
    """
    xi = np.asarray(xi, dtype=float)
    d = len(coeffs)
    out = np.zeros(xi.shape, dtype=complex)
    for k, ax in F.terms:
        prod = np.full(xi.shape, k / M ** d, dtype=complex)
        for i, f in enumerate(ax):
            sgn = 1.0 if i < d else -1.0
            prod *= _chirp_sum(f, coeffs[i % d] * sgn, xi, M)
        out += prod
    return out


def _folded_weights(f, M, tol):
    k0, k1 = f.lattice_window(tol, 1.0 / M)
    m = np.arange(k0, k1 + 1)
    w = f(m / M)
    sq = m * m
    order = np.argsort(sq, kind="stable")
    sq, w = sq[order], w[order]
    uniq, start = np.unique(sq, return_index=True)
    return uniq.astype(float), np.add.reduceat(w, start)


def _chirp_sum(f, x, xi, M, tol=1e-16):
    """sum_m f(m/M) e(x xi m^2 / 2) for an array of xi."""
    sq, w = _folded_weights(f, M, tol)
    flat = xi.ravel()
    out = np.empty(flat.size, dtype=complex)
    step = max(1, 4_000_000 // max(sq.size, 1))
    for s in range(0, flat.size, step):
        ph = np.exp(1j * math.pi * x * np.outer(flat[s:s + step], sq))
        out[s:s + step] = ph @ w
    return out.reshape(xi.shape)


def _max_frequency(F, coeffs, M, tol):
    """Bound on |Q(m, n)|/2 over lattice points where a term's weight exceeds tol times its peak.

    Per term and block, weight >= tol forces sum_j pi a_j (m_j/M - c_j)^2 <= B with
    B = log(1/tol) + log of the polynomial envelope; |Q| <= max over the two blocks of Q0.
    """
    d = len(coeffs)
    best = 0.0
    for k, ax in F.terms:
        for block in (ax[:d], ax[d:]):
            env = [f.envelope() for f in block]
            B = math.log(1.0 / tol) + sum(math.log(max(pn, 1.0)) + 4 * f.degree for f, (_, _, _, pn) in zip(block, env))
            ratio = max(coeffs[j] / (math.pi * env[j][0]) for j in range(d))
            cen = sum(coeffs[j] * env[j][1] ** 2 for j in range(d))
            q0max = M * M * (2 * cen + 2 * ratio * B) if cen > 0 else M * M * ratio * B
            best = max(best, q0max)
    return 0.5 * best


def fourier_counting_rhs(spec, xi_truncation=None, tol=1e-9, return_info=False, seed_spikes=True):
    """(M^d / (2 s L)) int psi^(xi / (2 s L)) Theta~_F(1, g0 n(xi) a(log M) g0^{-1}) dxi.

    s is spec.q_scale, so this equals the lattice count with psi(s L Q(m)).
    """
    psi = spec.psi
    if psi.is_zero() or spec.F.is_zero():
        return (0.0, None) if return_info else 0.0
    coeffs = np.asarray(spec.shape.coeffs, dtype=float)
    d = coeffs.size
    M, L, s = float(spec.M), float(spec.L), float(spec.q_scale)
    lam = 2 * s * L
    psihat = TestFunction([(k * np.prod([f.fourier()[0] for f in ax]), [f.fourier()[1] for f in ax])
                           for k, ax in psi.terms], 1)
    theta_abs = abs(orbit_theta(_abs_version(spec.F), coeffs, np.zeros(1), M)[0])
    if xi_truncation is None:
        R = 1.0
        while True:
            tail = sum(abs(k) * ax[0].tail_integral_bound(-R, R) for k, ax in psihat.terms)
            if tail * lam * theta_abs * M ** d / lam < 1e-12 * max(theta_abs, 1e-300) * M ** d or R > 1e6:
                break
            R *= 1.2
        xi_truncation = R * lam
    Xi = float(xi_truncation)
    fmax = _max_frequency(spec.F, coeffs, M, 1e-14)
    omega = 2 * math.pi * fmax
    max_width = min(10.0 / max(omega, 1e-300), Xi)
    seeds = [0.0]
    if seed_spikes:
        seeds += spike_centers(coeffs, Xi, q_max=6)

    def integrand(x):
        ph = sum(k * ax[0](x / lam) for k, ax in psihat.terms)
        return ph * orbit_theta(spec.F, coeffs, x, M)

    try:
        res = quadrature.adaptive(integrand, -Xi, Xi, seeds=seeds, tol=tol, max_width=max_width)
    except QuadratureFailure as exc:
        exc.panels = {"spikes": seeds, **(exc.panels or {})}
        raise
    val = M ** d / lam * res.value
    out = val.real if abs(val.imag) <= 1e-9 * max(abs(val), 1.0) else val
    return (out, res) if return_info else out


def _abs_version(F):
    """A function whose lattice sums bound those of |F| termwise (drops phases)."""
    terms = []
    for k, ax in F.terms:
        new = []
        for f in ax:
            alpha, c0, logpk, pn = f.envelope()
            new.append(AxisFn([pn], alpha, TWO_PI * alpha * c0))
        terms.append((abs(k), new))
    return TestFunction(terms, F.dims)


def spike_centers(coeffs, Xi, q_max=6):
    """Points xi with xi x_j = 2 p / q (small q), where the orbit enters the cusp."""
    out = set()
    for x in coeffs:
        for q in range(1, q_max + 1):
            pmax = int(math.floor(Xi * x * q / 2))
            for p in range(-pmax, pmax + 1):
                if math.gcd(p, q) == 1:
                    out.add(2.0 * p / (q * x))
    return sorted(out)


def horosphere_average(F, t, method="exact", tol=DEFAULT_TOL, nodes_per_cycle=8):
    """2^{-d} int over [0,2]^d of Theta~_F(1, n(xi) a(t)) dxi.

    'exact' uses orthogonality of e(xi (m^2 - n^2)/2) on [0,2], keeping n = +-m;
    'quadrature' integrates the explicit formula numerically (feasible for small t).
    """
    d = F.dims // 2
    y = math.exp(-t)
    tot = 0j
    for k, ax in F.terms:
        prod = k * math.exp(-d * t)
        for j in range(d):
            f, g = ax[j], ax[d + j]
            if method == "exact":
                prod *= _diag_axis_sum(f, g, y, tol)
            else:
                prod *= _axis_average_quadrature(f, g, y, nodes_per_cycle)
        tot += prod
    return complex(tot)


def _diag_axis_sum(f, g, y, tol):
    k0, k1 = f.lattice_window(tol, y)
    m = np.arange(0, max(abs(k0), abs(k1)) + 1, dtype=float)
    pos = f(m * y) * g(m * y) + f(-m * y) * g(-m * y) + f(m * y) * g(-m * y) + f(-m * y) * g(m * y)
    pos[0] = f(np.zeros(1))[0] * g(np.zeros(1))[0]
    return quadrature.ordered_sum(pos)


def _axis_average_quadrature(f, g, y, nodes_per_cycle):
    k0, k1 = f.lattice_window(1e-16, y)
    m = np.arange(k0, k1 + 1, dtype=float)
    wf, wg = f(m * y), g(m * y)
    sq = m * m
    fmax = 0.5 * sq.max()
    n_pan = int(max(4, math.ceil(2 * fmax * nodes_per_cycle / 8)))
    edges = np.linspace(0.0, 2.0, n_pan + 1)

    def integrand(x):
        ph = np.exp(1j * math.pi * np.outer(x, sq))
        return (ph @ wf) * (ph.conj() @ wg)

    vals = quadrature.composite(integrand, edges)
    return quadrature.ordered_sum(vals) / 2.0


def diagonal_integral(F):
    """sum over sign maps eps of int F(u, eps u) du, per rank-1 term in closed form."""
    d = F.dims // 2
    tot = 0j
    for k, ax in F.terms:
        prod = k
        for j in range(d):
            f, g = ax[j], ax[d + j]
            prod *= f.times(g).integral() + f.times(g.reflect()[1]).integral()
        tot += prod
    return complex(tot)


def orbit_trace_csv(path, xi, values, alpha=None, depth=None):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xi", "theta_re", "theta_im", "alpha3", "panel_depth"])
        for i, x in enumerate(xi):
            w.writerow([repr(float(x)), repr(float(values[i].real)), repr(float(values[i].imag)),
                        "" if alpha is None else repr(float(alpha[i])),
                        "" if depth is None else int(depth[i])])

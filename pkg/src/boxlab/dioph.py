"""Continued fractions, best approximations, kappa diagnostics and C-set counts.

Real inputs are carried as closed rational intervals [lo, hi].  Exact
rationals have lo == hi; a float is taken as its binary value widened by half
an ulp; algebraic numbers are refined by interval Newton to any width.
Partial quotients are only emitted while both ends of the interval agree, so
the expansion never runs past what the input actually determines.
"""
import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import BudgetExceeded, PrecisionExhausted


class _RationalFlag(str):
    """Returned by kappa_estimate for rational inputs."""


RATIONAL = _RationalFlag("Rational")


# --------------------------------------------------------------- intervals

class RealInterval:
    """A real number known to lie in the closed rational interval [lo, hi]."""

    def __init__(self, lo, hi=None):
        lo = Fraction(lo)
        hi = lo if hi is None else Fraction(hi)
        if hi < lo:
            raise ValueError("empty interval")
        self.lo, self.hi = lo, hi

    @classmethod
    def coerce(cls, x):
        if isinstance(x, RealInterval):
            return x
        if isinstance(x, (int, Fraction)):
            return cls(x)
        if isinstance(x, float):
            if not math.isfinite(x):
                raise ValueError("non-finite input")
            half = Fraction(math.ulp(x)) / 2
            c = Fraction(x)
            return cls(c - half, c + half)
        try:
            import mpmath
            if isinstance(x, mpmath.mpf):
                man, exp = x.man_exp
                c = Fraction(int(man)) * Fraction(2) ** int(exp)
                eps = Fraction(2) ** (-mpmath.mp.prec) * max(abs(c), Fraction(1))
                return cls(c - eps, c + eps)
        except ImportError:
            pass
        return cls.coerce(float(x))

    @property
    def exact(self):
        return self.lo == self.hi

    @property
    def mid(self):
        return (self.lo + self.hi) / 2

    @property
    def width(self):
        return self.hi - self.lo

    def __float__(self):
        return float(self.mid)

    def __mul__(self, other):
        o = RealInterval.coerce(other)
        p = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi]
        return RealInterval(min(p), max(p))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = RealInterval.coerce(other)
        if o.lo <= 0 <= o.hi:
            raise ZeroDivisionError("interval contains zero")
        return self * RealInterval(1 / o.hi, 1 / o.lo)

    def __pow__(self, k):
        out = RealInterval(1)
        base = self if k >= 0 else RealInterval(1) / self
        for _ in range(abs(int(k))):
            out = out * base
        return out

    def __repr__(self):
        return f"RealInterval({float(self.lo)!r} .. {float(self.hi)!r})"


def _ipoly(coeffs, x):
    """Interval Horner evaluation, coeffs low to high."""
    acc = RealInterval(coeffs[-1])
    for c in reversed(coeffs[:-1]):
        acc = acc * x
        acc = RealInterval(acc.lo + c, acc.hi + c)
    return acc


def _poly(coeffs, x):
    acc = Fraction(coeffs[-1])
    for c in reversed(coeffs[:-1]):
        acc = acc * x + c
    return acc


def algebraic(coeffs, approx, tol=Fraction(1, 10 ** 30)):
    """Simple root of the integer polynomial sum coeffs[k] x^k near approx.

    Interval Newton on exact rationals; the returned interval has width
    below tol and is guaranteed to contain the root.
    """
    coeffs = [int(c) for c in coeffs]
    deriv = [k * coeffs[k] for k in range(1, len(coeffs))]
    a0 = Fraction(approx)
    rad = abs(a0) * Fraction(1, 10 ** 10) + Fraction(1, 10 ** 12)
    for _ in range(60):
        lo, hi = a0 - rad, a0 + rad
        if _poly(coeffs, lo) * _poly(coeffs, hi) < 0:
            break
        rad *= 4
    else:
        raise ValueError("no sign change near the approximation")
    x = RealInterval(lo, hi)
    for _ in range(400):
        if x.width < tol:
            return x
        bits = max(8, -int(math.floor(math.log2(float(x.width)))) + 16)
        m = Fraction(round(x.mid * 2 ** bits), 2 ** bits)
        dp = _ipoly(deriv, x)
        if dp.lo <= 0 <= dp.hi:
            # fall back to bisection while the derivative range straddles zero
            if _poly(coeffs, x.lo) * _poly(coeffs, m) <= 0:
                x = RealInterval(x.lo, m)
            else:
                x = RealInterval(m, x.hi)
            continue
        fm = _poly(coeffs, m)
        step = RealInterval(fm) / dp
        n = RealInterval(m - step.hi, m - step.lo)
        lo, hi = max(x.lo, n.lo), min(x.hi, n.hi)
        if lo > hi:
            raise ValueError("interval Newton lost the root")
        if hi - lo >= x.width:
            mm = x.mid
            if _poly(coeffs, x.lo) * _poly(coeffs, mm) <= 0:
                lo, hi = x.lo, mm
            else:
                lo, hi = mm, x.hi
        x = RealInterval(lo, hi)
    raise ValueError("interval Newton did not converge")


def pow_rational(base, p, q, tol=Fraction(1, 10 ** 30)):
    """base^(p/q) for positive integer base as a tight interval."""
    if base <= 0 or q <= 0:
        raise ValueError("need base > 0, q > 0")
    if p >= 0:
        coeffs = [-(Fraction(base) ** p)] + [0] * (q - 1) + [1]
    else:
        coeffs = [-1] + [0] * (q - 1) + [Fraction(base) ** (-p)]
    # clear denominators for rational bases
    den = math.lcm(*[Fraction(c).denominator for c in coeffs])
    coeffs = [int(Fraction(c) * den) for c in coeffs]
    return algebraic(coeffs, Fraction(float(base) ** (p / q)), tol)


def golden_ratio(tol=Fraction(1, 10 ** 30)):
    return algebraic([-1, -1, 1], Fraction(1.618033988749895), tol)


# ------------------------------------------------------- continued fractions

@dataclass
class ContinuedFraction:
    quotients: list
    convergents: list
    terminated: bool  # exact rational fully expanded

    def to_json(self):
        return json.dumps({"schema": "dioph/1", "kind": "continued_fraction",
                           "quotients": self.quotients,
                           "convergents": [list(c) for c in self.convergents],
                           "terminated": self.terminated})


def _cf_stream(x):
    """Yield partial quotients determined by the interval x; returns 'exact' at the end of a rational."""
    lo, hi = x.lo, x.hi
    while True:
        a = math.floor(lo)
        if math.floor(hi) != a:
            return "undetermined"
        if lo == hi == a:
            yield a
            return "exact"
        if lo == a:
            # interval touches the integer itself: next quotient not determined
            return "undetermined"
        yield a
        lo, hi = 1 / (hi - a), 1 / (lo - a)


def continued_fraction(x, n=64, strict=True):
    """First n partial quotients of x with convergents (p, q) as exact integers."""
    if n > 64:
        raise ValueError("n <= 64")
    x = RealInterval.coerce(x)
    quot, conv = [], []
    p0, q0, p1, q1 = 1, 0, 0, 1
    gen = _cf_stream(x)
    status = None
    while len(quot) < n:
        try:
            a = next(gen)
        except StopIteration as stop:
            status = stop.value
            break
        quot.append(a)
        p0, p1 = a * p0 + p1, p0
        q0, q1 = a * q0 + q1, q0
        conv.append((p0, q0))
    terminated = status == "exact"
    if status == "undetermined" and strict:
        raise PrecisionExhausted(
            f"input determines only {len(quot)} partial quotients "
            f"(last denominator {conv[-1][1] if conv else 0})")
    return ContinuedFraction(quot, conv, terminated)


def _convergents_upto(x, qmax):
    """Convergents with q <= qmax plus the first one beyond (if determined)."""
    quot, conv = [], []
    p0, q0, p1, q1 = 1, 0, 0, 1
    gen = _cf_stream(x)
    status = None
    while True:
        try:
            a = next(gen)
        except StopIteration as stop:
            status = stop.value
            break
        quot.append(a)
        p0, p1 = a * p0 + p1, p0
        q0, q1 = a * q0 + q1, q0
        conv.append((p0, q0))
        if q0 > qmax:
            break
    return quot, conv, status


@dataclass
class RationalApprox:
    r: int
    q: int
    err: float
    quality: float


def _approx(x, r, q):
    err = abs(x.mid - Fraction(r, q))
    e = float(err)
    if e == 0:
        qual = math.inf
    elif q == 1:
        qual = math.nan
    else:
        qual = -math.log(e * q) / math.log(q)
    return RationalApprox(r, q, e, qual)


def _closer(x, a, b):
    """True if a (a Fraction) is strictly closer to x than b; ties go to b."""
    mid = (a + b) / 2
    if a < b:
        if x.hi < mid:
            return True
        if x.lo >= mid:
            return False
    else:
        if x.lo > mid:
            return True
        if x.hi <= mid:
            return False
    raise PrecisionExhausted("input too imprecise to separate two candidate approximations")


def best_approx(x, Qmax):
    """Best rational approximation r/q with 1 <= q <= Qmax (smallest q on ties)."""
    if Qmax < 1:
        raise ValueError("Qmax >= 1")
    x = RealInterval.coerce(x)
    quot, conv, status = _convergents_upto(x, Qmax)
    if not conv:
        raise PrecisionExhausted("no partial quotient determined")
    if conv[-1][1] <= Qmax:
        if status == "exact":
            r, q = conv[-1]
            return _approx(x, r, q)
        raise PrecisionExhausted(f"cannot determine convergents beyond q={conv[-1][1]}")
    k = len(conv) - 2  # last convergent with q <= Qmax
    pk, qk = conv[k]
    pkm, qkm = conv[k - 1] if k >= 1 else (1, 0)
    m = (Qmax - qkm) // qk
    best = (pk, qk)
    if m >= 1:
        sr, sq = pkm + m * pk, qkm + m * qk
        if sq <= Qmax and _closer(x, Fraction(sr, sq), Fraction(pk, qk)):
            best = (sr, sq)
    return _approx(x, *best)


@dataclass
class KappaReport:
    slope: float
    intercept: float
    sup_ratio: float
    last_ratio: float
    n_convergents: int

    def to_json(self):
        return json.dumps({"schema": "dioph/1", "kind": "kappa", **self.__dict__})


def kappa_report(x, Qmax):
    """Growth of log(1/(q err)) against log q over convergents 2 <= q <= Qmax."""
    if Qmax < 10:
        raise ValueError("Qmax >= 10")
    x = RealInterval.coerce(x)
    quot, conv, status = _convergents_upto(x, Qmax)
    if status == "exact" and conv[-1][1] <= Qmax:
        return RATIONAL
    if conv[-1][1] <= Qmax:
        raise PrecisionExhausted(f"convergents undetermined beyond q={conv[-1][1]}")
    lq, ly = [], []
    for p, q in conv:
        if q < 2 or q > Qmax:
            continue
        err = abs(x.mid - Fraction(p, q))
        if err <= 1000 * x.width:
            raise PrecisionExhausted(f"approximation error at q={q} below input resolution")
        lq.append(math.log(q))
        ly.append(-math.log(float(err) * q))
    lq, ly = np.array(lq), np.array(ly)
    ratios = ly / lq
    if lq.size >= 2:
        slope, intercept = np.polyfit(lq, ly, 1)
    else:
        slope, intercept = ratios[0], 0.0
    return KappaReport(float(slope), float(intercept), float(ratios.max()),
                       float(ratios[-1]), int(lq.size))


def kappa_estimate(x, Qmax):
    """Empirical Diophantine exponent: slope of log(1/(q err)) in log q over convergents.

    Returns RATIONAL for rational inputs.  The constant in |x - r/q| >= C q^(-k-1)
    is absorbed by the intercept, so quadratic surds give values near 1.
    """
    rep = kappa_report(x, Qmax)
    if rep is RATIONAL:
        return RATIONAL
    return rep.slope


def diophantine_constant(x, kappa, Qmax):
    """min over convergents q <= Qmax of q^kappa |q x - r| (the worst case is a convergent)."""
    x = RealInterval.coerce(x)
    quot, conv, status = _convergents_upto(x, Qmax)
    vals = [q ** kappa * abs(float(q * x.mid - p)) for p, q in conv if q <= Qmax]
    vals = [v for v in vals if v > 0]
    return min(vals) if vals else 0.0


# -------------------------------------------------------------------- C-sets

@dataclass
class CSetParams:
    t: float
    eta: float
    L: float
    C1: float
    C2: float
    x1: float
    x2: float

    def __post_init__(self):
        for name in ("t", "eta", "L", "C1", "C2", "x1", "x2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        lim = 10 * math.exp(self.t)
        if not (1 <= self.C1 <= lim and 1 <= self.C2 <= lim):
            raise ValueError("need 1 <= C_j <= 10 e^t")

    @classmethod
    def from_shape(cls, shape, t, eta, L, C1, C2, pair=(0, 1)):
        x = shape.coeffs
        return cls(t, eta, L, C1, C2, float(x[pair[0]]), float(x[pair[1]]))

    @property
    def width(self):
        return self.eta * math.exp(-2 * self.t)


def _coprime_pairs(C, xL):
    """(c, d) with C <= |c| < 2C, 0 < |d| <= 2 x L C, gcd(c, d) = 1."""
    cmin = math.ceil(C)
    cmax = math.ceil(2 * C) - 1
    dmax = math.floor(2 * xL * C)
    cs, ds = [], []
    d = np.arange(1, dmax + 1)
    for c in range(cmin, cmax + 1):
        keep = d[np.gcd(d, c) == 1]
        for sc in (c, -c):
            for sd in (1, -1):
                cs.append(np.full(keep.size, sc))
                ds.append(sd * keep)
    if not cs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(cs).astype(np.int64), np.concatenate(ds).astype(np.int64)


def cset_gap(c1, d1, c2, d2, x1, x2):
    return np.abs(d1 / (c1 * x1) - d2 / (c2 * x2))


@dataclass
class CSetResult:
    members: np.ndarray  # rows (c1, d1, c2, d2)
    count: int
    path: str = None

    def write_csv(self, path, params):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["c1", "d1", "c2", "d2", "gap"])
            for c1, d1, c2, d2 in self.members:
                w.writerow([c1, d1, c2, d2, repr(float(cset_gap(c1, d1, c2, d2, params.x1, params.x2)))])


def enumerate_cset(p, budget=10 ** 7, stream_path=None, stream_above=10 ** 6):
    """Exact enumeration of the C-set by sorting one factor's ratios and windowing."""
    c1, d1 = _coprime_pairs(p.C1, p.x1 * p.L)
    c2, d2 = _coprime_pairs(p.C2, p.x2 * p.L)
    if c1.size + c2.size > budget:
        raise BudgetExceeded(f"{c1.size + c2.size} candidate pairs exceed budget {budget}")
    y1 = d1 / (c1 * p.x1)
    y2 = d2 / (c2 * p.x2)
    order = np.argsort(y2, kind="stable")
    ys = y2[order]
    w = p.width
    slack = 1e-9 * w + 1e-12 * (np.abs(ys).max() if ys.size else 1.0)
    lo = np.searchsorted(ys, y1 - w - slack, side="left")
    hi = np.searchsorted(ys, y1 + w + slack, side="right")
    total = int((hi - lo).sum())
    if total > budget:
        raise BudgetExceeded(f"{total} candidate matches exceed budget {budget}")
    if total == 0 or c1.size == 0:
        return CSetResult(np.zeros((0, 4), dtype=np.int64), 0)
    i1 = np.repeat(np.arange(c1.size), hi - lo)
    starts = np.repeat(lo - np.concatenate([[0], np.cumsum(hi - lo)[:-1]]), hi - lo)
    j2 = order[np.arange(total) + starts]
    gap = cset_gap(c1[i1], d1[i1], c2[j2], d2[j2], p.x1, p.x2)
    keep = gap <= w
    mem = np.stack([c1[i1], d1[i1], c2[j2], d2[j2]], axis=1)[keep]
    mem = mem[np.lexsort(mem.T[::-1])]
    res = CSetResult(mem, int(mem.shape[0]))
    if stream_path is not None and res.count > stream_above:
        res.write_csv(stream_path, p)
        res.path = stream_path
    return res


def cset_gap_floor(p, kappa, const):
    """Lower bound for the gap over the parameter box given |q X - r| >= const |q|^-kappa, X = x2/x1."""
    qmax = 2 * p.C2 * 2 * p.x1 * p.L * p.C1
    return const * qmax ** (-kappa) / (4 * p.C1 * p.C2 * p.x2)


def cset_envelope(p, kappa, eps=0.1):
    """(eta C1 C2 e^-2t + (L C1 C2)^(-1/kappa)) (L C1 C2)^(1+eps), without the constant."""
    lcc = p.L * p.C1 * p.C2
    return (p.eta * p.C1 * p.C2 * math.exp(-2 * p.t) + lcc ** (-1 / kappa)) * lcc ** (1 + eps)

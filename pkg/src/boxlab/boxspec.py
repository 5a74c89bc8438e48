"""Box and torus spectra of the Laplacian, unfolding and pair correlation.

Levels are values of Q0(m) = sum x_j m_j^2 with x_j = pi^2 / l_j^2, over m with
positive entries (Dirichlet box) or over all of Z^3 (the reflection torus).
"""
import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, InsufficientRange, InvalidShape

DIRICHLET = "DirichletPositive"
TORUS = "FullTorus"
BALL_VOLUME_3 = 4.0 * math.pi / 3.0
GUARD = 1e-12
DEFAULT_BUDGET = 5 * 10 ** 7


class BoxShape:
    """Edge lengths l_j and the diagonal form coefficients x_j = pi^2 / l_j^2."""

    def __init__(self, lengths, index_set=DIRICHLET, coeffs=None):
        ell = np.array(lengths, dtype=float)
        if ell.ndim != 1 or ell.size < 1:
            raise InvalidShape("lengths must be a non-empty vector")
        if not np.all(np.isfinite(ell)) or np.any(ell <= 0):
            raise InvalidShape(f"lengths must be finite and positive, got {ell}")
        if index_set not in (DIRICHLET, TORUS):
            raise InvalidShape(f"unknown index set {index_set!r}")
        self.lengths = ell
        self.index_set = index_set
        self.coeffs = np.pi ** 2 / ell ** 2 if coeffs is None else np.array(coeffs, dtype=float)
        if not np.allclose(self.coeffs, np.pi ** 2 / ell ** 2, rtol=1e-14, atol=0):
            raise InvalidShape("coeffs inconsistent with lengths")

    @classmethod
    def from_coeffs(cls, coeffs, index_set=DIRICHLET):
        x = np.array(coeffs, dtype=float)
        if not np.all(np.isfinite(x)) or np.any(x <= 0):
            raise InvalidShape(f"coefficients must be finite and positive, got {x}")
        return cls(np.pi / np.sqrt(x), index_set, coeffs=x)

    @property
    def d(self):
        return self.lengths.size

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    def with_index_set(self, index_set):
        return BoxShape(self.lengths, index_set, self.coeffs)

    def to_dict(self):
        return {"lengths": self.lengths.tolist(), "coeffs": self.coeffs.tolist(),
                "index_set": self.index_set}

    def __repr__(self):
        return f"BoxShape(lengths={self.lengths.tolist()}, index_set={self.index_set!r})"


def _ball_volume(d):
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def unfold(shape, lam):
    """(l1...ld / (2 pi)^d) omega_d lambda^(d/2); elementwise for arrays."""
    lam = np.asarray(lam, dtype=float)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValueError("lambda must be finite and nonnegative")
    d = shape.d
    out = shape.volume / (2 * math.pi) ** d * _ball_volume(d) * lam ** (d / 2)
    return out if out.ndim else float(out)


def unfold_inverse(shape, xi):
    d = shape.d
    c = shape.volume / (2 * math.pi) ** d * _ball_volume(d)
    return (np.asarray(xi, dtype=float) / c) ** (2 / d)


def weyl_prediction(shape, lam):
    """Leading Weyl count of levels below lam for the shape's index set.

    The torus is the union of 2^d reflected boxes, so its volume is 2^d times
    the box volume.
    """
    base = unfold(shape, lam)
    return base * 2 ** shape.d if shape.index_set == TORUS else base


@dataclass
class LevelSequence:
    raw: np.ndarray
    unfolded: np.ndarray
    cutoff: float
    shape: BoxShape = None
    weyl_expected: float = None

    def __len__(self):
        return self.raw.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "raw", "unfolded"])
            for i, (r, u) in enumerate(zip(self.raw, self.unfolded)):
                w.writerow([i, repr(float(r)), repr(float(u))])

    def to_json(self):
        return json.dumps({
            "schema": "boxspec/1", "kind": "LevelSequence",
            "shape": self.shape.to_dict() if self.shape is not None else None,
            "cutoff": self.cutoff, "weyl_expected": self.weyl_expected,
            "raw": self.raw.tolist(), "unfolded": self.unfolded.tolist(),
        })


def _chunk_values(x, lo, hi, lam_cut, positive):
    """Q0 values < lam_cut for leading index in [lo, hi), repeated by sign multiplicity on the torus."""
    bound = lam_cut * (1 + GUARD)
    vals, reps = [], []
    start = 1 if positive else 0
    n2 = int(math.floor(math.sqrt(bound / x[1]))) + 1
    n3 = int(math.floor(math.sqrt(bound / x[2]))) + 1
    m2 = np.arange(start, n2 + 1, dtype=float)
    m3 = np.arange(start, n3 + 1, dtype=float)
    q2 = x[1] * m2 * m2
    q3 = x[2] * m3 * m3
    for m1 in range(max(lo, start), hi):
        q1 = x[0] * float(m1) * float(m1)
        if q1 >= bound:
            break
        k2 = np.searchsorted(q2, bound - q1, side="right")
        if k2 == 0:
            continue
        k3 = np.searchsorted(q3, bound - q1, side="right")
        v = (q1 + q2[:k2, None]) + q3[None, :k3]
        keep = v < lam_cut
        vals.append(v[keep])
        if not positive:
            nz = (m1 != 0) + (m2[:k2, None] != 0).astype(int) + (m3[None, :k3] != 0).astype(int)
            reps.append((2 ** nz)[keep])
    if not vals:
        return np.zeros(0)
    v = np.concatenate(vals)
    if positive:
        return v
    return np.repeat(v, np.concatenate(reps))


def enumerate_raw(shape, lam_cut, budget=DEFAULT_BUDGET, partitions=1):
    """Sorted Q0(m) < lam_cut with multiplicity, for d = 3."""
    if shape.d != 3:
        raise InvalidShape("enumeration implemented for d = 3")
    lam_cut = float(lam_cut)
    if not math.isfinite(lam_cut) or lam_cut <= 0:
        raise ValueError("cutoff must be positive and finite")
    predicted = weyl_prediction(shape, lam_cut)
    if predicted > budget:
        raise BudgetExceeded(f"Weyl prediction {predicted:.3g} exceeds budget {budget:.3g}")
    x = shape.coeffs
    positive = shape.index_set == DIRICHLET
    n1 = int(math.floor(math.sqrt(lam_cut * (1 + GUARD) / x[0]))) + 1
    edges = np.linspace(0, n1 + 1, partitions + 1).round().astype(int)
    parts = [_chunk_values(x, edges[i], edges[i + 1], lam_cut, positive)
             for i in range(partitions)]
    v = np.concatenate(parts) if parts else np.zeros(0)
    v.sort(kind="stable")
    return v


def enumerate_levels(shape, T, budget=DEFAULT_BUDGET, partitions=1):
    """All levels with unfolded value below T (so raw value below unfold^-1(T))."""
    if not (math.isfinite(T) and T > 0):
        raise ValueError("T must be positive and finite")
    lam_cut = float(unfold_inverse(shape, T))
    raw = enumerate_raw(shape, lam_cut, budget, partitions)
    return LevelSequence(raw, unfold(shape, raw), float(T), shape,
                         float(weyl_prediction(shape, lam_cut)))


# --------------------------------------------------------- pair correlation

@dataclass
class CorrelationHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalizer: float
    total_levels: int

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def ratio(self):
        """R_T(A) / T for the full window."""
        return self.total / self.normalizer

    @property
    def window_length(self):
        return float(self.bin_edges[-1] - self.bin_edges[0])

    def poisson_expected(self):
        return self.normalizer * np.diff(self.bin_edges)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "count_over_T", "poisson_over_T"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c),
                            repr(c / self.normalizer), repr(float(hi - lo))])

    def to_json(self):
        return json.dumps({
            "schema": "boxspec/1", "kind": "CorrelationHistogram",
            "bin_edges": self.bin_edges.tolist(), "counts": self.counts.tolist(),
            "normalizer": self.normalizer, "total_levels": self.total_levels,
        })


def _first_at_least(xi, base, offset):
    """For each i, the first index j with fl(xi[j] - base[i]) >= offset.

    searchsorted on base + offset, then nudged so the decision matches the
    rounded difference exactly.
    """
    n = xi.size
    p = np.searchsorted(xi, base + offset, side="left")
    while True:
        back = (p > 0) & (xi[np.maximum(p - 1, 0)] - base >= offset)
        if not back.any():
            break
        p = np.where(back, p - 1, p)
    while True:
        fwd = (p < n) & (xi[np.minimum(p, n - 1)] - base < offset)
        if not fwd.any():
            break
        p = np.where(fwd, p + 1, p)
    return p


def pair_correlation(levels, window, T=None, bins=1):
    """Ordered pairs i != j with xi_i < T and xi_j - xi_i in [a, b), binned.

    `levels` is a LevelSequence or a sorted array of unfolded values; `bins` is
    a bin count or explicit edges spanning the window.
    """
    a, b = float(window[0]), float(window[1])
    if not a < b:
        raise ValueError("window needs a < b")
    if isinstance(levels, LevelSequence):
        xi, cutoff = levels.unfolded, levels.cutoff
    else:
        xi = np.asarray(levels, dtype=float)
        cutoff = float(xi[-1]) if xi.size else 0.0
    reach = max(abs(a), abs(b))
    if T is None:
        T = float(xi[-1]) - reach
    if T <= 0:
        raise InsufficientRange("no room for T after subtracting the window reach")
    if cutoff < T + reach:
        raise InsufficientRange(f"levels reach {cutoff}, need {T + reach}")
    edges = np.linspace(a, b, bins + 1) if np.isscalar(bins) else np.asarray(bins, dtype=float)
    if edges[0] != a or edges[-1] != b or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must increase from a to b")
    nlev = int(np.searchsorted(xi, T, side="left"))
    base = xi[:nlev]
    pos = np.stack([_first_at_least(xi, base, e) for e in edges])
    counts = (pos[1:] - pos[:-1]).sum(axis=1)
    # remove j == i: the zero difference lands in the bin containing 0
    k = np.searchsorted(edges, 0.0, side="right") - 1
    if 0 <= k < len(edges) - 1:
        counts[k] -= nlev
    return CorrelationHistogram(edges, counts.astype(np.int64), float(T), nlev)


def pair_count_bruteforce(xi, window, T):
    """O(N^2) reference count for testing."""
    xi = np.asarray(xi, dtype=float)
    a, b = window
    n = 0
    for i in range(xi.size):
        if not xi[i] < T:
            continue
        dif = xi - xi[i]
        m = (dif >= a) & (dif < b)
        m[i] = False
        n += int(m.sum())
    return n

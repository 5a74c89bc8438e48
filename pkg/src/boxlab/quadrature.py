"""Composite and adaptive Gauss-Legendre quadrature with seeded panel edges."""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import QuadratureFailure

ORDER = 16
ROUNDOFF = 64 * np.finfo(float).eps
_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(ORDER)


def gl_rule(order=ORDER):
    if order == ORDER:
        return _NODES, _WEIGHTS
    return np.polynomial.legendre.leggauss(order)


def panel_nodes(edges, order=ORDER, hi=None):
    """Nodes (P, order) and weights (P, order) for panels between consecutive edges.

    With `hi` given, `edges` are the panel left ends and `hi` the right ends.
    """
    x, w = gl_rule(order)
    edges = np.asarray(edges, dtype=float)
    if hi is None:
        lo, hi = edges[:-1], edges[1:]
    else:
        lo, hi = edges, np.asarray(hi, dtype=float)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    return mid[:, None] + half[:, None] * x[None, :], half[:, None] * w[None, :]


def composite(f, edges, order=ORDER, chunk=200_000, hi=None):
    """Per-panel integrals of the order-point rule; f takes a 1-d array of nodes.

    The caller reduces the returned values in panel order.
    """
    edges = np.asarray(edges, dtype=float)
    if hi is None:
        lo, hi = edges[:-1], edges[1:]
    else:
        lo, hi = edges, np.asarray(hi, dtype=float)
    npan = lo.size
    per = max(1, chunk // order)
    out = None
    for s in range(0, npan, per):
        nodes, wts = panel_nodes(lo[s:s + per], order, hi=hi[s:s + per])
        vals = np.asarray(f(nodes.ravel())).reshape(nodes.shape)
        part = (vals * wts).sum(axis=1)
        if out is None:
            out = np.empty(npan, dtype=part.dtype)
        out[s:s + part.size] = part
    return out


def ordered_sum(values):
    """Compensated sum of a real or complex array in its given order."""
    values = np.asarray(values)
    if np.iscomplexobj(values):
        return complex(math.fsum(values.real), math.fsum(values.imag))
    return math.fsum(values)


@dataclass
class QuadResult:
    value: complex
    edges: np.ndarray
    panel_values: np.ndarray
    depth: np.ndarray
    error_estimate: float
    seeds: list = field(default_factory=list)

    @property
    def panels(self):
        return self.edges.size - 1

    def recompute(self):
        return ordered_sum(self.panel_values)


def seeded_edges(a, b, seeds=(), max_width=None, min_depth_width=None, seed_halo=None, breaks=()):
    """Panel edges on [a, b] that include every seed and break and respect max_width.

    Around each seed, panels of width min_depth_width extend over seed_halo on
    each side (geometric grading outwards) so narrow spikes start resolved.
    Breaks are plain edges (known discontinuities) without grading.
    """
    seeds = np.asarray(seeds, dtype=float).ravel()
    seeds = seeds[(seeds > a) & (seeds < b)]
    pts = [np.array([a, b], dtype=float), seeds,
           np.asarray(breaks, dtype=float).ravel()]
    if min_depth_width is not None and seeds.size:
        reach = seed_halo if seed_halo is not None else 64 * min_depth_width
        nlev = max(1, int(math.ceil(math.log2(max(reach / min_depth_width, 1.0)))))
        offs = min_depth_width * 2.0 ** np.arange(nlev)
        offs = np.concatenate([offs, -offs])
        pts.append((seeds[:, None] + offs[None, :]).ravel())
    edges = np.concatenate(pts)
    edges = np.unique(edges[(edges >= a) & (edges <= b)])
    if max_width is not None:
        gaps = np.diff(edges)
        k = np.maximum(1, np.ceil(gaps / max_width).astype(np.int64))
        if np.any(k > 1):
            start = np.repeat(edges[:-1], k)
            step = np.repeat(gaps / k, k)
            j = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
            edges = np.concatenate([start + j * step, edges[-1:]])
    return edges


def adaptive(f, a, b, seeds=(), tol=1e-9, max_width=None, min_depth_width=None,
             seed_halo=None, max_panels=2_000_000, abs_floor=0.0, order=ORDER, breaks=()):
    """Adaptive bisection on seeded panels until each panel's rule agrees with its halves.

    A panel is accepted when |I(panel) - I(left) - I(right)| <= tol * (|total| + abs_floor)
    scaled by its share of the interval, or when that difference is at rounding level;
    refinement also stops once the summed differences fall below tol * |total|.
    """
    edges = seeded_edges(a, b, seeds, max_width, min_depth_width, seed_halo, breaks)
    depth = np.zeros(edges.size - 1, dtype=int)
    coarse = composite(f, edges, order)
    total_scale = abs(coarse.sum()) + abs_floor
    length = b - a
    final_lo, final_hi, final_val, final_depth = [], [], [], []
    err_total = 0.0
    lo, hi, val, dep = edges[:-1], edges[1:], coarse, depth
    while lo.size:
        mid = 0.5 * (lo + hi)
        left = composite(f, lo, order, hi=mid)
        right = composite(f, mid, order, hi=hi)
        fine = left + right
        diff = np.abs(val - fine)
        share = (hi - lo) / length
        ok = diff <= tol * total_scale * np.maximum(share, 1e-300) + 1e-300
        # panels already at rounding level cannot improve by bisection
        ok |= diff <= ROUNDOFF * (np.abs(left) + np.abs(right))
        # global stop: the remaining error budget already covers every open panel
        if err_total + float(diff.sum()) <= tol * total_scale:
            ok[:] = True
        final_lo.append(lo[ok]); final_hi.append(hi[ok])
        final_val.append(fine[ok]); final_depth.append(dep[ok])
        err_total += float(diff[ok].sum())
        bad = ~ok
        if not bad.any():
            break
        nlo = np.concatenate([lo[bad], mid[bad]])
        nhi = np.concatenate([mid[bad], hi[bad]])
        nval = np.concatenate([left[bad], right[bad]])
        ndep = np.concatenate([dep[bad], dep[bad]]) + 1
        order_idx = np.argsort(nlo, kind="stable")
        lo, hi, val, dep = nlo[order_idx], nhi[order_idx], nval[order_idx], ndep[order_idx]
        if sum(x.size for x in final_lo) + lo.size > max_panels or np.min(hi - lo) < 1e-15 * max(1.0, abs(b)):
            raise QuadratureFailure(
                f"adaptive quadrature did not settle: {lo.size} unresolved panels",
                panels={"unresolved": list(zip(lo[:50].tolist(), hi[:50].tolist()))})
    lo = np.concatenate(final_lo); hi = np.concatenate(final_hi)
    vals = np.concatenate(final_val); deps = np.concatenate(final_depth)
    idx = np.argsort(lo, kind="stable")
    edges_out = np.concatenate([lo[idx], hi[idx][-1:]])
    vals = vals[idx]
    return QuadResult(ordered_sum(vals), edges_out, vals, deps[idx], err_total, np.asarray(seeds, dtype=float).ravel().tolist())

"""Acceptance checks: one function per criterion, each returning a CriterionResult."""
import functools
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import boxspec as bs
from . import dioph as dp
from . import margulis as mg
from . import qcount as qc
from . import sl2geom as sg
from . import thetaeng as te

DIOPHANTINE_LENGTHS = (1.0, 2.0 ** (1 / 3), 2.0 ** (-1 / 3))


@dataclass
class CriterionResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    detail: str = ""
    runtime: float = 0.0
    value: float = math.nan

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "measured": self.measured,
                "detail": self.detail, "value": self.value}


def _timed(fn):
    @functools.wraps(fn)
    def run(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.runtime = time.perf_counter() - t0
        return res
    return run


def diophantine_shape():
    return bs.BoxShape(list(DIOPHANTINE_LENGTHS))


def random_iwasawa(rng, d, v_lo=0.5, v_hi=3.0, u_max=2.0):
    ic = sg.IwasawaCoords(rng.uniform(-u_max, u_max, d), rng.uniform(v_lo, v_hi, d),
                          rng.uniform(0, math.pi, d), np.ones(d, dtype=int))
    return ic.assemble()


def random_gaussian(rng, d):
    return te.TestFunction.gaussian(2 * d, rng.uniform(0.6, 1.8, 2 * d), rng.uniform(-0.3, 0.3, 2 * d))


def random_theta_group(rng, d, bound=20):
    """d matrices in SL(2, Z) with |entries| <= bound and a b, c d both even."""
    out = []
    while len(out) < d:
        c, dd = (int(v) for v in rng.integers(-bound, bound + 1, 2))
        if math.gcd(c, dd) != 1 or (c * dd) % 2:
            continue
        m = mg.complete_bottom(c, dd)
        a, b = m[0]
        ks = [k for k in range(-2 * bound, 2 * bound + 1)
              if abs(a + k * c) <= bound and abs(b + k * dd) <= bound and ((a + k * c) * (b + k * dd)) % 2 == 0]
        if not ks:
            continue
        k = ks[int(rng.integers(len(ks)))]
        out.append([[a + k * c, b + k * dd], [c, dd]])
    return sg.GroupTuple(np.array(out, dtype=float))


# ------------------------------------------------------------------ theta

@_timed
def theta_consistency(n=50, tol=1e-10, seed=1):
    """Fast Iwasawa evaluation against the direct lattice sum on random g with v >= 1/2."""
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(n):
        d = 1 + i % 3
        g = random_iwasawa(rng, d)
        F = random_gaussian(rng, d)
        h = te.HeisenbergPoint(rng.uniform(-0.5, 0.5, d), rng.uniform(-0.5, 0.5, d), rng.uniform(-1, 1)) if i % 2 else None
        fast = te.theta_dd(F, h, g)
        direct = te.theta_dd(F, h, g, method="direct")
        errs.append(abs(fast - direct) / abs(direct))
    worst = float(max(errs))
    return CriterionResult("theta-consistency", worst <= tol, {"max_rel_err": worst, "samples": n},
                           f"max relative difference {worst:.2e} over {n} samples (tol {tol:g})", value=worst)


@_timed
def automorphy(n=100, tol=1e-8, bound=20, seed=2):
    """Theta~_F(1, gamma g) = Theta~_F(1, g) for gamma in the theta group, three factors."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        g = random_iwasawa(rng, 3)
        F = random_gaussian(rng, 3)
        gamma = random_theta_group(rng, 3, bound)
        a = te.theta_dd(F, None, g)
        b = te.theta_dd(F, None, gamma @ g)
        errs.append(abs(a - b) / abs(a))
    worst = float(max(errs))
    return CriterionResult("automorphy", worst <= tol, {"max_rel_err": worst, "samples": n},
                           f"max relative change {worst:.2e} over {n} elements (tol {tol:g})", value=worst)


# ------------------------------------------------------------------ counting

@_timed
def fourier_identity(Ms=(4, 8, 16), Ls=(1.0, 2.0), tol=1e-6):
    """Direct lattice count against the orbit integral of the theta function."""
    shape = diophantine_shape()
    rows, worst = [], 0.0
    for M in Ms:
        for L in Ls:
            spec = qc.CountSpec(shape, M, L, qc.separable_gaussian(shape), qc.gaussian_psi())
            direct = qc.count_direct(spec)
            rhs = te.fourier_counting_rhs(spec)
            err = abs(direct - rhs) / abs(direct)
            worst = max(worst, err)
            rows.append({"M": M, "L": L, "direct": direct, "fourier": float(np.real(rhs)), "rel_err": err})
    return CriterionResult("fourier-identity", worst <= tol, {"rows": rows, "max_rel_err": worst},
                           f"max relative difference {worst:.2e} (tol {tol:g})", value=worst)


@_timed
def count_asymptotics(Ms=(64, 96, 128), band=(0.95, 1.05), budget=8 * 10 ** 7):
    """direct / (main + diagonal) for the separable Gaussian count with L = M."""
    shape = diophantine_shape()
    rows = []
    for M in Ms:
        spec = qc.CountSpec(shape, M, M, qc.separable_gaussian(shape), qc.gaussian_psi())
        r = qc.asymptotic_report(spec, budget=budget)
        rows.append({"M": M, "direct": r.direct, "main": r.main_term, "diagonal": r.diagonal_term,
                     "ratio": r.ratio})
    ratios = [r["ratio"] for r in rows]
    ok = all(band[0] <= x <= band[1] for x in ratios)
    return CriterionResult("count-asymptotics", ok, {"rows": rows},
                           "ratios " + ", ".join(f"M={r['M']}: {r['ratio']:.4f}" for r in rows)
                           + f" (band {band[0]}..{band[1]})", value=max(abs(x - 1) for x in ratios))


# ------------------------------------------------------------------ spectra

@_timed
def pair_correlation(T=1e5, windows=((0.0, 1.0), (1.0, 2.0), (-1.0, 1.0)), rel=0.05,
                     cube_window=(-0.5, 0.5), cube_factor=2.0):
    """R_T(A)/T against |A| for the Diophantine box and the divergence for the cube."""
    reach = max(max(abs(a), abs(b)) for a, b in windows + (cube_window,))
    lev = bs.enumerate_levels(diophantine_shape(), T + reach + 1)
    rows = []
    for a, b in windows:
        h = bs.pair_correlation(lev, (a, b), T)
        rows.append({"window": [a, b], "ratio": h.ratio, "length": b - a,
                     "rel_dev": h.ratio / (b - a) - 1})
    cube = bs.enumerate_levels(bs.BoxShape([1.0, 1.0, 1.0]), T + reach + 1)
    hc = bs.pair_correlation(cube, cube_window, T)
    cube_ratio = hc.ratio / (cube_window[1] - cube_window[0])
    ok = all(abs(r["rel_dev"]) <= rel for r in rows) and cube_ratio > cube_factor
    detail = ", ".join(f"[{r['window'][0]:g},{r['window'][1]:g}]: {r['ratio']:.4f}" for r in rows)
    return CriterionResult("pair-correlation", ok, {"rows": rows, "cube_ratio": cube_ratio},
                           f"R_T/T {detail}; cube {cube_ratio:.2f} (need within {rel:.0%} and cube > {cube_factor:g})",
                           value=max(abs(r["rel_dev"]) for r in rows))


# ------------------------------------------------------------------ geometry

@_timed
def translation_bounds(n=10 ** 5, seed=6):
    """(1/2) e^-s rho(g) <= rho(g n(xi) a(s)) <= 2 e^s rho(g) for |xi| <= 1, s in (0, 3]."""
    rng = np.random.default_rng(seed)
    # bottom rows of random matrices, spread over several scales
    bottom = rng.normal(size=(n, 2)) * np.exp(rng.uniform(-4, 4, (n, 1)))
    xi = rng.uniform(-1, 1, n)
    s = rng.uniform(0, 3, n)
    s = np.where(s == 0, 3.0, s)
    rho, rho_t = sg.translation_bounds(bottom, xi, s)
    lo = 0.5 * np.exp(-s) * rho
    hi = 2.0 * np.exp(s) * rho
    bad = int(np.count_nonzero(~((lo <= rho_t) & (rho_t <= hi))))
    slack = float(min(np.min(rho_t / lo), np.min(hi / rho_t)))
    return CriterionResult("translation-bounds", bad == 0, {"violations": bad, "samples": n, "min_slack": slack},
                           f"{bad} violations in {n} samples (tightest ratio {slack:.4f})", value=float(bad))


# ------------------------------------------------------------------ contraction

CONTRACTION_CHECKS = ("rho-4.2", "phi-4.3", "crude-alpha-4.5")


def contraction_ensemble(seed, n=100, betas=(1.2, 1.5), ss=(2, 3, 4, 5, 6), checks=CONTRACTION_CHECKS):
    """Ratios lhs/rhs on random rotation tuples; sample i uses s = ss[i % len(ss)]."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = ss[i % len(ss)]
        beta = betas[(i // len(ss)) % len(betas)]
        g = mg.random_rotation_tuple(rng)
        out.append({"s": s, "beta": beta,
                    **{c: mg.contraction_check(g, s, beta, c).ratio for c in checks}})
    return out


def measure_ensemble(seed, ss=(2, 3, 4, 5, 6), per_s=4):
    """Sublevel-measure checks: generic tuples, near-double roots, and exact double roots."""
    rng = np.random.default_rng(seed)
    out = []
    for s in ss:
        for _ in range(per_s):
            g = mg.random_rotation_tuple(rng)
            out.append(("generic", s, mg.contraction_check(g, s, 1.5, "measbound-4.1")))
        th = rng.uniform(0, math.pi, 3)
        near = th.copy()
        near[1] = near[0] + math.exp(-3 * s)
        out.append(("near-double", s, mg.contraction_check(sg.k_matrix(near, 3), s, 1.5, "measbound-4.1")))
        dbl = th.copy()
        dbl[1] = dbl[0]
        rep = mg.contraction_check(sg.k_matrix(dbl, 3), s, 1.5, "measbound-4.1", delta=1.0)
        if rep.lhs > 0:
            out.append(("double-root", s, rep))
    return out


@_timed
def contraction_suite(fit_seed=101, assert_seed=202, n=100, margin=1.5):
    """Frozen constants from one ensemble bound the contraction ratios of another."""
    fit = contraction_ensemble(fit_seed, n)
    chk = contraction_ensemble(assert_seed, n)
    measured, bad = {}, []
    for c in CONTRACTION_CHECKS:
        for beta in (1.2, 1.5):
            key = f"{c}@{beta}"
            C = mg.freeze_constant([r[c] for r in fit if r["beta"] == beta], margin)
            test = [r[c] for r in chk if r["beta"] == beta]
            v = mg.violations(test, C)
            measured[key] = {"constant": C, "max_assert": float(max(test)), "violations": len(v)}
            if v:
                bad.append(key)
    mfit = measure_ensemble(fit_seed)
    mchk = measure_ensemble(assert_seed)
    Cm = mg.freeze_constant([r.ratio for _, _, r in mfit], margin)
    mv = mg.violations([r.ratio for _, _, r in mchk], Cm)
    branches = sorted({r.branch for _, _, r in mchk})
    planted = sorted({(kind, r.branch) for kind, _, r in mchk if kind != "generic"})
    measured["measbound-4.1"] = {"constant": Cm, "max_assert": float(max(r.ratio for _, _, r in mchk)),
                                 "violations": len(mv), "branches": branches,
                                 "planted": [list(p) for p in planted]}
    all_branches = set(branches) == {"cube-root", "delta2", "delta3"}
    double_cube = ("double-root", "cube-root") in planted
    ok = not bad and not mv and all_branches and double_cube
    detail = (f"ratio violations in {bad or 'none'}; sublevel violations {len(mv)}; "
              f"branches seen {branches}")
    worst = max(m["max_assert"] / m["constant"] for m in measured.values())
    return CriterionResult("contraction-suite", ok, measured, detail, value=worst)


# ------------------------------------------------------------------ escape of mass

@_timed
def escape_trend(Ms=(125, 250, 500, 1000, 2000), beta=1.05, fit_seed=0, assert_seed=1000,
                 samples=2 ** 19, margin=1.5, profile_ts=(1, 2, 3, 4, 5, 6)):
    """Orbit averages of alpha^beta stay below one frozen constant as M grows."""
    shape = diophantine_shape()
    fit = mg.escape_ladder(shape, Ms, beta, samples=samples, seed=fit_seed)
    chk = mg.escape_ladder(shape, Ms, beta, samples=samples, seed=assert_seed)
    C = mg.freeze_constant([a.value for *_, a in fit], margin)
    vals = [a.value for *_, a in chk]
    v = mg.violations(vals, C)
    g0 = sg.g0_matrix(shape.coeffs)
    profile = {b: mg.small_moment_profile(g0, b, profile_ts, samples=2 ** 16) for b in (0.6, 0.9)}
    rows = [{"M": M, "L": L, "beta": b, "fit": f.value, "value": a.value,
             "stderr": a.truncation["stderr"]} for (M, L, b, a), (*_, f) in zip(chk, fit)]
    return CriterionResult("escape-trend", not v, {"constant": C, "rows": rows, "profile": profile},
                           f"frozen constant {C:.2f}; averages "
                           + ", ".join(f"{r['value']:.2f}" for r in rows) + f"; {len(v)} violations", value=max(vals) / C)


@_timed
def horosphere_limit(t=6.0, rel=0.02, n=6, seed=9):
    """Horosphere average at depth t against the sum of diagonal integrals."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        F = random_gaussian(rng, 3)
        a = te.horosphere_average(F, t)
        b = te.diagonal_integral(F)
        errs.append(abs(a - b) / abs(b))
    worst = float(max(errs))
    return CriterionResult("horosphere-limit", worst <= rel, {"max_rel_err": worst, "t": t},
                           f"max relative difference {worst:.2e} at t={t:g} (tol {rel:g})", value=worst)


# ------------------------------------------------------------------ Diophantine

def cset_bruteforce(p):
    """Double loop over every admissible pair, no sorting or windowing."""
    def pairs(C, xL):
        out = []
        for c in range(math.ceil(C), math.ceil(2 * C)):
            for d in range(1, math.floor(2 * xL * C) + 1):
                if math.gcd(c, d) == 1:
                    out += [(c, d), (c, -d), (-c, d), (-c, -d)]
        return np.array(out, dtype=np.int64).reshape(-1, 2)
    A, B = pairs(p.C1, p.x1 * p.L), pairs(p.C2, p.x2 * p.L)
    found = []
    ya = A[:, 1] / (A[:, 0] * p.x1)
    yb = B[:, 1] / (B[:, 0] * p.x2)
    for i in range(A.shape[0]):
        hit = np.nonzero(np.abs(ya[i] - yb) <= p.width)[0]
        found += [(A[i, 0], A[i, 1], B[j, 0], B[j, 1]) for j in hit]
    found.sort()
    return np.array(found, dtype=np.int64).reshape(-1, 4)


CSET_T = (0.5, 1.0, 2.0, 3.0)
CSET_L = (2.0, 5.0, 10.0)
CSET_C = (1.0, 2.0, 3.0, 4.0)


def cset_grid(seed, n=30):
    """Random parameter points: discrete t, L, C_j and log-uniform eta in [1e-3, 10]."""
    rng = np.random.default_rng(seed)
    x = diophantine_shape().coeffs
    out = []
    for _ in range(n):
        out.append(dp.CSetParams(float(rng.choice(CSET_T)), float(10 ** rng.uniform(-3, 1)),
                                 float(rng.choice(CSET_L)), float(rng.choice(CSET_C)),
                                 float(rng.choice(CSET_C)), float(x[0]), float(x[1])))
    return out


def cset_calibration_grid(etas=(1e-3, 1e-2, 1e-1, 1.0, 10.0)):
    """Full factorial grid over the same discrete choices, used only to fit the envelope constant."""
    x = diophantine_shape().coeffs
    return [dp.CSetParams(t, eta, L, C1, C2, float(x[0]), float(x[1]))
            for t in CSET_T for eta in etas for L in CSET_L for C1 in CSET_C for C2 in CSET_C]


@_timed
def cset_counts(seed=12, n=30, margin=1.5):
    """Exact C-set enumeration, the emptiness criterion, and the frozen envelope constant."""
    X = dp.pow_rational(2, -2, 3)  # x2 / x1 for the Diophantine box
    kappa = 1.0
    grid = cset_grid(seed, n)
    mism, empty_bad, rows = 0, 0, []
    qmax = max(4 * p.C1 * p.C2 * p.x1 * p.L for p in grid)
    const = dp.diophantine_constant(X, kappa, int(qmax) + 1)
    for p in grid:
        res = dp.enumerate_cset(p)
        ref = cset_bruteforce(p)
        same = res.members.shape == ref.shape and np.array_equal(res.members, ref)
        mism += not same
        floor = dp.cset_gap_floor(p, kappa, const)
        forced_empty = p.width < floor
        empty_bad += forced_empty and res.count > 0
        # the same box with eta just below the certified gap floor must be empty
        tight = dp.CSetParams(p.t, 0.9 * floor * math.exp(2 * p.t), p.L, p.C1, p.C2, p.x1, p.x2)
        empty_bad += dp.enumerate_cset(tight).count > 0
        forced_empty += 1
        rows.append({"t": p.t, "eta": p.eta, "L": p.L, "C1": p.C1, "C2": p.C2, "count": res.count,
                     "oracle": int(ref.shape[0]), "forced_empty": int(forced_empty),
                     "envelope": dp.cset_envelope(p, kappa)})
    fit = [dp.enumerate_cset(p).count / dp.cset_envelope(p, kappa) for p in cset_calibration_grid()]
    C = mg.freeze_constant(fit, margin)
    env_bad = mg.violations([r["count"] / r["envelope"] for r in rows], C)
    ok = mism == 0 and empty_bad == 0 and not env_bad
    forced = sum(r["forced_empty"] for r in rows)
    return CriterionResult("cset-counts", ok, {"rows": rows, "mismatches": mism, "emptiness_violations": empty_bad,
                                               "envelope_constant": C, "envelope_violations": len(env_bad)},
                           f"{mism} oracle mismatches on {n} grid points; {forced} forced-empty cases, "
                           f"{empty_bad} violated; envelope constant {C:.3g}, {len(env_bad)} violations",
                           value=float(mism + empty_bad + len(env_bad)))


@_timed
def diophantine_diagnostics(Qmax=10 ** 6, band=(0.99, 1.01), n=20, qmax=1000, seed=13):
    """kappa near 1 for quadratic surds; best_approx against an exhaustive scan."""
    k2 = dp.kappa_estimate(dp.pow_rational(2, 1, 2), Qmax)
    kg = dp.kappa_estimate(dp.golden_ratio(), Qmax)
    rng = np.random.default_rng(seed)
    bad = 0
    for x in rng.uniform(-10, 10, n):
        fx = Fraction(float(x))
        best = min(((abs(fx - Fraction(round(fx * q), q)), q, round(fx * q)) for q in range(1, qmax + 1)))
        ref = Fraction(best[2], best[1])
        got = dp.best_approx(float(x), qmax)
        bad += (got.r, got.q) != (ref.numerator, ref.denominator)
    ok = band[0] <= k2 <= band[1] and band[0] <= kg <= band[1] and bad == 0
    return CriterionResult("diophantine-diagnostics", ok, {"kappa_sqrt2": k2, "kappa_golden": kg, "mismatches": bad},
                           f"kappa sqrt2 {k2:.4f}, golden {kg:.4f}; {bad} best_approx mismatches in {n}",
                           value=max(abs(k2 - 1), abs(kg - 1)))


CRITERIA = {
    1: theta_consistency,
    2: automorphy,
    3: fourier_identity,
    4: count_asymptotics,
    5: pair_correlation,
    6: translation_bounds,
    7: contraction_suite,
    8: escape_trend,
    9: horosphere_limit,
    10: cset_counts,
    11: diophantine_diagnostics,
}

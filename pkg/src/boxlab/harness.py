"""Experiment configs, dispatch, an append-only run ledger, and collated reports."""
import csv
import datetime as _dt
import fcntl
import hashlib
import inspect
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import boxspec as bs
from . import criteria as cr
from . import dioph as dp
from . import margulis as mg
from . import qcount as qc
from .errors import BoxlabError, ConfigInvalid, EmptyLedger

EXPERIMENTS = ("spectrum", "paircorr", "count", "theta-check", "margulis", "dioph")
OUTPUT_ENV = "BOXLAB_OUTPUT"
DEFAULT_OUTPUT = "boxlab-output"
LEDGER_NAME = "ledger.jsonl"
REPORT_SCHEMA_ID = "harness/1"

# which experiment family owns each acceptance criterion
CRITERION_FAMILY = {1: "theta-check", 2: "theta-check", 3: "count", 4: "count", 5: "paircorr",
                    6: "margulis", 7: "margulis", 8: "margulis", 9: "theta-check", 10: "dioph", 11: "dioph"}

_POS = {"type": "number", "exclusiveMinimum": 0}
_REAL = {"oneOf": [
    _POS,
    {"type": "object", "required": ["pow"], "additionalProperties": False,
     "properties": {"pow": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3}}},
]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["experiment", "seed"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "experiment": {"enum": list(EXPERIMENTS)},
        "criterion": {"type": "integer", "minimum": 1, "maximum": 11},
        "task": {"type": "string"},
        "shape": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lengths": {"type": "array", "items": _REAL, "minItems": 3, "maxItems": 3},
                "coeffs": {"type": "array", "items": _REAL, "minItems": 3, "maxItems": 3},
                "index_set": {"enum": [bs.DIRICHLET, bs.TORUS]},
            },
            "oneOf": [{"required": ["lengths"]}, {"required": ["coeffs"]}],
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "tolerances": {"type": "object", "additionalProperties": _POS},
        "budgets": {"type": "object", "additionalProperties": _POS},
        "params": {"type": "object"},
        "output_dir": {"type": "string"},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "runs", "assertions", "count_ladder", "escape_ladder"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "runs": {"type": "array", "items": {
            "type": "object", "required": ["config_hash", "experiment", "passed", "files"]}},
        "assertions": {"type": "array", "items": {
            "type": "object", "required": ["run", "name", "passed", "value"],
            "properties": {"passed": {"type": "boolean"}}}},
        "count_ladder": {"type": "array", "items": {
            "type": "object", "required": ["M", "direct", "predicted", "ratio"]}},
        "escape_ladder": {"type": "array", "items": {
            "type": "object", "required": ["M", "L", "beta", "value"]}},
    },
}


# ------------------------------------------------------------------ configs

def _field_name(err):
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else "?"
        return f"{path}.{missing}" if path else missing
    if err.validator == "additionalProperties" and "'" in err.message:
        extra = err.message.split("'")[1]
        return f"{path}.{extra}" if path else extra
    return path or "<root>"


def validate_config(raw):
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: (len(e.absolute_path), e.message))
    if errs:
        err = jsonschema.exceptions.best_match(errs)
        name = _field_name(err)
        raise ConfigInvalid(f"{name}: {err.message}", field=name)
    if "criterion" in raw and CRITERION_FAMILY[raw["criterion"]] != raw["experiment"]:
        raise ConfigInvalid(f"criterion: {raw['criterion']} belongs to experiment "
                            f"{CRITERION_FAMILY[raw['criterion']]!r}", field="criterion")


def real_value(v):
    """A float from a plain number or {"pow": [b, p, q]} meaning b^(p/q)."""
    if isinstance(v, dict):
        b, p, q = v["pow"]
        return float(dp.pow_rational(b, p, q).mid)
    return float(v)


def canonical(raw):
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


def config_hash(raw):
    return hashlib.sha256(canonical(raw).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self):
        validate_config(self.raw)

    @classmethod
    def load(cls, source):
        """A config from a dict, a JSON file path, or the name of a shipped config."""
        if isinstance(source, dict):
            return cls(json.loads(json.dumps(source)))
        if os.path.exists(source):
            with open(source) as fh:
                try:
                    return cls(json.load(fh))
                except json.JSONDecodeError as exc:
                    raise ConfigInvalid(f"<file>: not valid JSON ({exc})", field="<file>") from exc
        named = named_configs()
        if source in named:
            return cls(named[source])
        raise ConfigInvalid(f"<source>: no config file or named config {source!r}", field="<source>")

    def override(self, **fields):
        """New config with top-level fields replaced and params/tolerances/budgets merged."""
        raw = json.loads(json.dumps(self.raw))
        for k, v in fields.items():
            if v is None:
                continue
            if k in ("params", "tolerances", "budgets"):
                raw.setdefault(k, {}).update(v)
            else:
                raw[k] = v
        return ExperimentConfig(raw)

    @property
    def experiment(self):
        return self.raw["experiment"]

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def hash(self):
        return config_hash(self.raw)

    @property
    def label(self):
        return self.raw.get("name", self.experiment)

    def shape(self):
        sh = self.raw.get("shape")
        if sh is None:
            return cr.diophantine_shape()
        idx = sh.get("index_set", bs.DIRICHLET)
        if "lengths" in sh:
            return bs.BoxShape([real_value(v) for v in sh["lengths"]], idx)
        return bs.BoxShape.from_coeffs([real_value(v) for v in sh["coeffs"]], idx)

    def output_root(self):
        return self.raw.get("output_dir") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT

    def run_dir(self):
        return os.path.join(self.output_root(), f"{self.label}-{self.hash[:12]}")


CONFIG_DIR = Path(__file__).parent / "configs"


def named_configs():
    return {p.stem: json.loads(p.read_text()) for p in sorted(CONFIG_DIR.glob("*.json"))}


# ------------------------------------------------------------------ ledger

def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class RunLedger:
    """Append-only JSON-lines ledger; appends go through an exclusive file lock."""

    def __init__(self, path):
        self.path = path

    def append(self, entry):
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        line = json.dumps(entry, sort_keys=True) + "\n"
        with open(self.path, "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def entries(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path) as fh:
            return [json.loads(x) for x in fh if x.strip()]

    def __len__(self):
        return len(self.entries())

    def verify(self):
        """Indices of entries whose stored hash does not match their stored config."""
        return [i for i, e in enumerate(self.entries()) if config_hash(e["config"]) != e["config_hash"]]


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


@dataclass
class Outcome:
    """What one experiment produced: files (name -> text) and assertions."""
    files: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def assert_(self, name, passed, value, detail=""):
        self.assertions.append({"name": name, "passed": bool(passed), "value": _jsonable(value), "detail": detail})


# ------------------------------------------------------------------ dispatch

def _kwargs_for(fn, cfg, extra_ok=()):
    """Criterion/task keyword arguments from budgets, tolerances and params, checked against fn."""
    sig = inspect.signature(fn).parameters
    kw = {}
    for section in ("budgets", "tolerances", "params"):
        for k, v in cfg.raw.get(section, {}).items():
            if k not in sig and k not in extra_ok:
                raise ConfigInvalid(f"{section}.{k}: not a parameter of {fn.__name__}", field=f"{section}.{k}")
            kw[k] = tuple(map(tuple, v)) if isinstance(v, list) and v and isinstance(v[0], list) else (
                tuple(v) if isinstance(v, list) else v)
    if "seed" in sig and "seed" not in kw:
        kw["seed"] = cfg.seed
    return kw


def _run_criterion(cfg):
    k = cfg.raw["criterion"]
    fn = cr.CRITERIA[k]
    res = fn(**_kwargs_for(fn, cfg))
    out = Outcome(summary={"criterion": k, **res.to_dict()})
    out.assert_(f"criterion-{k}:{res.name}", res.passed, res.value, res.detail)
    out.files["result.json"] = json.dumps(_jsonable(out.summary), sort_keys=True, indent=1) + "\n"
    rows = res.measured.get("rows") if isinstance(res.measured, dict) else None
    if k == 4:
        out.files["count_ladder.csv"] = _csv_text(
            ["M", "L", "direct", "main", "diagonal", "predicted", "ratio"],
            [[r["M"], r["M"], repr(r["direct"]), repr(r["main"]), repr(r["diagonal"]),
              repr(r["main"] + r["diagonal"]), repr(r["ratio"])] for r in rows])
    if k == 8:
        out.files["escape_ladder.csv"] = _csv_text(
            ["M", "L", "beta", "value", "stderr", "method"],
            [[r["M"], repr(r["L"]), repr(r["beta"]), repr(r["value"]), repr(r["stderr"]), "sampling"] for r in rows])
    return out


def _task_spectrum(cfg):
    p = cfg.raw.get("params", {})
    T = float(p.get("T", 1e4))
    shape = cfg.shape()
    lev = bs.enumerate_levels(shape, T, budget=cfg.raw.get("budgets", {}).get("levels", bs.DEFAULT_BUDGET))
    n = len(lev)
    lam_cut = bs.unfold_inverse(shape, T)
    weyl = lev.weyl_expected or bs.weyl_prediction(shape, lam_cut)
    spacing = (lev.unfolded[-1] - lev.unfolded[0]) / max(n - 1, 1)
    out = Outcome(summary={"levels": n, "T": T, "weyl_ratio": n / weyl, "mean_spacing": float(spacing)})
    out.files["levels.csv"] = _csv_text(["raw", "unfolded"], [[repr(float(a)), repr(float(b))]
                                                             for a, b in zip(lev.raw, lev.unfolded)])
    rel = cfg.raw.get("tolerances", {}).get("weyl")
    if rel is not None:
        out.assert_("weyl-ratio", abs(n / weyl - 1) <= rel, n / weyl, f"within {rel:g}")
    return out


def _task_paircorr(cfg):
    p = cfg.raw.get("params", {})
    T = float(p.get("T", 1e4))
    windows = [tuple(w) for w in p.get("windows", [[0.0, 1.0]])]
    bins = int(p.get("bins", 10))
    reach = max(max(abs(a), abs(b)) for a, b in windows)
    lev = bs.enumerate_levels(cfg.shape(), T + reach + 1)
    out = Outcome()
    rel = cfg.raw.get("tolerances", {}).get("poisson")
    rows = []
    for i, (a, b) in enumerate(windows):
        h = bs.pair_correlation(lev, (a, b), T, bins=bins)
        dev = h.ratio / (b - a) - 1
        rows.append({"window": [a, b], "ratio": h.ratio, "poisson": b - a, "rel_dev": dev})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "count_over_T", "poisson_over_T"])
        for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(c / h.normalizer), repr(float(hi - lo))])
        out.files[f"histogram_{i}.csv"] = buf.getvalue()
        if rel is not None:
            out.assert_(f"poisson[{a:g},{b:g})", abs(dev) <= rel, dev, f"within {rel:g}")
    out.summary = {"T": T, "levels": len(lev), "windows": rows}
    return out


def _task_count(cfg):
    p = cfg.raw.get("params", {})
    shape = cfg.shape()
    Ms = p.get("Ms", [16, 32])
    band = p.get("band")
    rows = []
    for M in Ms:
        L = float(p.get("L", M))
        spec = qc.CountSpec(shape, M, L, qc.separable_gaussian(shape), qc.gaussian_psi())
        r = qc.asymptotic_report(spec, budget=cfg.raw.get("budgets", {}).get("points", qc.DEFAULT_BUDGET))
        rows.append([M, L, r.direct, r.main_term, r.diagonal_term, r.main_term + r.diagonal_term, r.ratio])
    out = Outcome(summary={"rows": rows})
    out.files["count_ladder.csv"] = _csv_text(["M", "L", "direct", "main", "diagonal", "predicted", "ratio"],
                                              [[r[0]] + [repr(float(v)) for v in r[1:]] for r in rows])
    if band is not None:
        for r in rows:
            out.assert_(f"ratio@M={r[0]}", band[0] <= r[-1] <= band[1], r[-1], f"band {band}")
    return out


def _task_theta(cfg):
    task = cfg.raw.get("task", "consistency")
    fns = {"consistency": cr.theta_consistency, "automorphy": cr.automorphy, "horosphere": cr.horosphere_limit}
    if task not in fns:
        raise ConfigInvalid(f"task: unknown theta-check task {task!r}", field="task")
    res = fns[task](**_kwargs_for(fns[task], cfg))
    out = Outcome(summary=res.to_dict())
    out.assert_(res.name, res.passed, res.value, res.detail)
    return out


def _task_margulis(cfg):
    task = cfg.raw.get("task", "ladder")
    p = cfg.raw.get("params", {})
    if task == "ladder":
        Ms = p.get("Ms", [125, 250, 500])
        beta = float(p.get("beta", mg.DEFAULT_BETA))
        rows = mg.escape_ladder(cfg.shape(), Ms, beta, samples=int(p.get("samples", 2 ** 18)), seed=cfg.seed)
        table = [[M, repr(float(L)), repr(b), repr(a.value), repr(a.truncation["stderr"]), "sampling"]
                 for M, L, b, a in rows]
        out = Outcome(summary={"rows": [[M, L, b, a.value] for M, L, b, a in rows]})
        out.files["escape_ladder.csv"] = _csv_text(["M", "L", "beta", "value", "stderr", "method"], table)
        bound = cfg.raw.get("tolerances", {}).get("bound")
        if bound is not None:
            out.assert_("escape-bound", all(a.value <= bound for *_, a in rows),
                        max(a.value for *_, a in rows), f"<= {bound:g}")
        return out
    if task == "contraction":
        which = p.get("check", "rho-4.2")
        if which not in mg.CHECKS:
            raise ConfigInvalid(f"params.check: unknown check {which!r}", field="params.check")
        rng = np.random.default_rng(cfg.seed)
        reps = []
        for s in p.get("s", [2, 3, 4]):
            g = mg.random_rotation_tuple(rng)
            r = mg.contraction_check(g, float(s), float(p.get("beta", 1.5)), which)
            reps.append({"s": s, "lhs": r.lhs, "rhs": r.rhs, "ratio": r.ratio, "branch": r.branch})
        out = Outcome(summary={"check": which, "reports": reps})
        out.files["contraction.csv"] = _csv_text(["s", "lhs", "rhs", "ratio", "branch"],
                                                 [[r["s"], repr(r["lhs"]), repr(r["rhs"]), repr(r["ratio"]),
                                                   r["branch"] or ""] for r in reps])
        return out
    if task == "translation":
        res = cr.translation_bounds(**_kwargs_for(cr.translation_bounds, cfg))
        out = Outcome(summary=res.to_dict())
        out.assert_(res.name, res.passed, res.value, res.detail)
        return out
    raise ConfigInvalid(f"task: unknown margulis task {task!r}", field="task")


def _task_dioph(cfg):
    task = cfg.raw.get("task", "kappa")
    p = cfg.raw.get("params", {})
    if task == "kappa":
        x = p.get("x", {"pow": [2, 1, 2]})
        xv = dp.pow_rational(*x["pow"]) if isinstance(x, dict) else float(x)
        Qmax = int(p.get("Qmax", 10 ** 6))
        rep = dp.kappa_report(xv, Qmax)
        out = Outcome(summary={"x": x, "Qmax": Qmax,
                               "report": "Rational" if rep is dp.RATIONAL else json.loads(rep.to_json())})
        band = p.get("band")
        if band is not None and rep is not dp.RATIONAL:
            out.assert_("kappa-band", band[0] <= rep.slope <= band[1], rep.slope, f"band {band}")
        return out
    if task == "cset":
        shape = cfg.shape()
        prm = dp.CSetParams.from_shape(shape, float(p.get("t", 3.0)), float(p.get("eta", 0.1)),
                                       float(p.get("L", 10.0)), float(p.get("C1", 4.0)), float(p.get("C2", 4.0)))
        res = dp.enumerate_cset(prm)
        out = Outcome(summary={"count": res.count})
        out.files["cset.csv"] = _csv_text(["c1", "d1", "c2", "d2", "gap"],
                                          [[int(a), int(b), int(c), int(d),
                                            repr(float(dp.cset_gap(a, b, c, d, prm.x1, prm.x2)))]
                                           for a, b, c, d in res.members])
        return out
    raise ConfigInvalid(f"task: unknown dioph task {task!r}", field="task")


TASKS = {"spectrum": _task_spectrum, "paircorr": _task_paircorr, "count": _task_count,
         "theta-check": _task_theta, "margulis": _task_margulis, "dioph": _task_dioph}


def plan(cfg):
    """The resolved plan for a config without running it."""
    k = cfg.raw.get("criterion")
    target = f"criteria.{cr.CRITERIA[k].__name__}" if k else f"{cfg.experiment}:{cfg.raw.get('task', 'default')}"
    return {"config": cfg.raw, "config_hash": cfg.hash, "target": target, "run_dir": cfg.run_dir(),
            "ledger": os.path.join(cfg.output_root(), LEDGER_NAME)}


def execute(cfg):
    """Run a config in memory: (Outcome, started, finished)."""
    started = _now()
    try:
        out = _run_criterion(cfg) if "criterion" in cfg.raw else TASKS[cfg.experiment](cfg)
    except BoxlabError as exc:
        exc.args = (f"[{cfg.label}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise
    if "result.json" not in out.files:
        out.files["result.json"] = json.dumps(_jsonable(out.summary), sort_keys=True, indent=1) + "\n"
    return out, started, _now()


def run(config, ledger=None):
    """Dispatch a config, write its result files atomically, then append one ledger row."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out, started, finished = execute(cfg)
    return _record(cfg, out, started, finished, ledger)


def _record(cfg, out, started, finished, ledger):
    rdir = cfg.run_dir()
    paths = []
    for name in sorted(out.files):
        path = os.path.join(rdir, name)
        _atomic_write(path, out.files[name])
        paths.append(path)
    _atomic_write(os.path.join(rdir, "config.json"), json.dumps(cfg.raw, sort_keys=True, indent=1) + "\n")
    if ledger is None:
        ledger = RunLedger(os.path.join(cfg.output_root(), LEDGER_NAME))
    entry = {"config_hash": cfg.hash, "config": cfg.raw, "experiment": cfg.experiment, "name": cfg.label,
             "started": started, "finished": finished, "files": paths, "assertions": out.assertions,
             "passed": all(a["passed"] for a in out.assertions)}
    ledger.append(entry)
    return entry


def run_many(configs, ledger=None, workers=1):
    """Run independent configs, possibly in worker processes; the ledger has a single writer."""
    cfgs = [c if isinstance(c, ExperimentConfig) else ExperimentConfig.load(c) for c in configs]
    if workers <= 1:
        return [run(c, ledger) for c in cfgs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as ex:
        results = list(ex.map(execute, cfgs))
    return [_record(c, *r, ledger) for c, r in zip(cfgs, results)]


# ------------------------------------------------------------------ reports

def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collate(ledger):
    entries = ledger.entries() if isinstance(ledger, RunLedger) else list(ledger)
    if not entries:
        raise EmptyLedger("ledger has no runs")
    runs, asserts, count_ladder, escape_ladder = [], [], [], []
    for e in entries:
        runs.append({"config_hash": e["config_hash"], "experiment": e["experiment"], "name": e.get("name"),
                     "criterion": e["config"].get("criterion"), "passed": e["passed"], "files": e["files"],
                     "started": e["started"], "finished": e["finished"]})
        for a in e["assertions"]:
            asserts.append({"run": e["config_hash"][:12], "name": a["name"], "passed": a["passed"],
                            "value": a["value"], "detail": a.get("detail", ""),
                            "criterion": e["config"].get("criterion")})
        for f in e["files"]:
            if not os.path.exists(f):
                continue
            if f.endswith("count_ladder.csv"):
                for r in _read_csv(f):
                    count_ladder.append({"M": float(r["M"]), "direct": float(r["direct"]),
                                         "predicted": float(r["predicted"]), "ratio": float(r["ratio"])})
            elif f.endswith("escape_ladder.csv"):
                for r in _read_csv(f):
                    escape_ladder.append({"M": float(r["M"]), "L": float(r["L"]), "beta": float(r["beta"]),
                                          "value": float(r["value"]), "stderr": float(r["stderr"])})
    return {"schema": REPORT_SCHEMA_ID, "runs": runs, "assertions": asserts,
            "count_ladder": count_ladder, "escape_ladder": escape_ladder}


def validate_report(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


CRITERION_TITLES = {
    1: "theta fast path vs direct sum", 2: "theta automorphy", 3: "Fourier identity for the count",
    4: "count vs main + diagonal", 5: "pair correlation vs Poisson", 6: "translation bounds for rho",
    7: "contraction suite", 8: "escape-of-mass trend", 9: "horosphere average limit",
    10: "C-set enumeration and bounds", 11: "Diophantine diagnostics",
}


def report(ledger, fmt, path):
    """Write a csv, json ("harness/1") or markdown-summary report of the ledger to path."""
    doc = collate(ledger)
    if fmt == "csv":
        text = _csv_text(["run", "criterion", "assertion", "passed", "value", "detail"],
                         [[a["run"], a["criterion"] or "", a["name"], a["passed"], a["value"], a["detail"]]
                          for a in doc["assertions"]])
    elif fmt == "json":
        text = json.dumps(validate_report(doc), sort_keys=True, indent=1) + "\n"
    elif fmt in ("markdown", "markdown-summary"):
        text = _markdown(doc)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    _atomic_write(path, text)
    return path


def _markdown(doc):
    latest = {}
    for a in doc["assertions"]:
        if a["criterion"]:
            latest[a["criterion"]] = a
    lines = ["# Acceptance summary", "", "| # | check | status | measured | detail |", "|---|---|---|---|---|"]
    for k in sorted(CRITERION_TITLES):
        a = latest.get(k)
        if a is None:
            lines.append(f"| {k} | {CRITERION_TITLES[k]} | not run | | |")
        else:
            v = a["value"]
            vs = f"{v:.4g}" if isinstance(v, (int, float)) else str(v)
            lines.append(f"| {k} | {CRITERION_TITLES[k]} | {'PASS' if a['passed'] else 'FAIL'} | {vs} | "
                         f"{a['detail'].replace('|', '/')} |")
    other = [a for a in doc["assertions"] if not a["criterion"]]
    if other:
        lines += ["", "## Other assertions", "", "| run | assertion | status | measured |", "|---|---|---|---|"]
        lines += [f"| {a['run']} | {a['name']} | {'PASS' if a['passed'] else 'FAIL'} | {a['value']} |" for a in other]
    if doc["count_ladder"]:
        lines += ["", "## Count ladder", "", "| M | direct | main + diagonal | ratio |", "|---|---|---|---|"]
        lines += [f"| {r['M']:g} | {r['direct']:.6g} | {r['predicted']:.6g} | {r['ratio']:.4f} |"
                  for r in doc["count_ladder"]]
    if doc["escape_ladder"]:
        lines += ["", "## Escape ladder", "", "| M | L | beta | average | stderr |", "|---|---|---|---|---|"]
        lines += [f"| {r['M']:g} | {r['L']:g} | {r['beta']:g} | {r['value']:.4f} | {r['stderr']:.3f} |"
                  for r in doc["escape_ladder"]]
    return "\n".join(lines) + "\n"

"""Experiment orchestration: sweeps, latency bench, calibration and file output.

Everything written under the output directory is a deterministic function
of the config except ``report.json``'s ``meta`` block (wall-clock data) and,
when ``run.record_latency`` is set, the latency column of ``points.csv``.
"""

import csv
import gc
import io
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .datagen import GENERATORS, load_csv, make_blobs, make_query_pool
from .defenses import NoDefense, calibrate_beta, make_defense
from .exceptions import ConfigError, EmptyReport, SchemaError
from .extraction import DefendedOracle, ReportSink, Scenario, run_cell, sweep_beta
from .metrics import constrained_max, curve_points, latency_summary, median_points, pareto_curve
from .models import SoftmaxMLP, evaluate_error

logger = logging.getLogger(__name__)

POINTS_HEADER = ["defense", "beta", "seed", "budget", "adv_err_pct", "def_err_pct",
                 "delta_def_err_pct", "mean_l1", "max_l1", "mean_latency_ns", "queries"]
LATENCY_HEADER = ["defense", "n", "mean_ms", "median_ms", "p99_ms", "overhead_ratio"]
PLOT_FIGURES = ("results", "l1", "queries_budget")


# --------------------------------------------------------------------------
# building blocks


def build_dataset(cfg):
    spec = cfg.dataset
    if spec.generator == "csv":
        return load_csv(spec.path, split_seed=spec.seed)
    return GENERATORS[spec.generator](seed=spec.seed, **spec.params)


def _train_params(model_spec):
    return model_spec.train.as_params()


def train_victim(cfg, dataset):
    train = dataset.train
    model = SoftmaxMLP(hidden_layer_sizes=tuple(cfg.victim.hidden), n_classes=dataset.n_classes,
                       **_train_params(cfg.victim))
    return model.fit(train.X, train.y)


def adversary_template(cfg):
    return SoftmaxMLP(hidden_layer_sizes=tuple(cfg.adversary.hidden), **_train_params(cfg.adversary))


def build_defense(spec, dataset, train_cfg):
    """Instantiate a configured defense; AM also trains its misinformation model."""
    params = dict(spec.params)
    if "hidden_layer_sizes" in params:
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
    defense = make_defense(spec.kind, **params)
    if spec.kind == "am":
        train = dataset.train
        opts = train_cfg.as_params()
        opts.pop("random_state")
        defense.fit(train.X, train.y, n_classes=dataset.n_classes, **opts)
    return defense


def _finite(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def _clean(obj):
    """Make `obj` strict-JSON safe: NaN/inf become null, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    return _finite(obj)


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def prepare_output(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}", key="output_dir") from None
    if not os.access(path, os.W_OK):
        raise ConfigError("output directory is not writable", key="output_dir")
    return path


# --------------------------------------------------------------------------
# report


@dataclass
class ExperimentReport:
    config: dict
    points: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    baseline: dict = field(default_factory=dict)
    constrained: dict = field(default_factory=dict)
    pareto: dict = field(default_factory=dict)
    latency: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    status: str = "ok"
    error: dict = None

    def to_dict(self):
        return {
            "tool": {"name": "posterior-shield", "version": __version__},
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "baseline": self.baseline,
            "points": [p.to_dict() if hasattr(p, "to_dict") else p for p in self.points],
            "failures": self.failures,
            "constrained_max": self.constrained,
            "pareto": self.pareto,
            "latency": self.latency,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data):
        from .metrics import CurvePoint

        try:
            points = [CurvePoint(**{k: (float("nan") if v is None else v) for k, v in p.items()})
                      for p in data.get("points", [])]
            return cls(config=data["config"], points=points,
                       failures=data.get("failures", []), baseline=data.get("baseline", {}),
                       constrained=data.get("constrained_max", {}),
                       pareto=data.get("pareto", {}), latency=data.get("latency", []),
                       meta=data.get("meta", {}), status=data.get("status", "ok"),
                       error=data.get("error"))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed report: {exc}") from None


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from None
    return ExperimentReport.from_dict(data)


# --------------------------------------------------------------------------
# run


def _fmt(x, digits):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return f"{x:.{digits}f}"


def points_csv(outcomes, baseline_def_err, record_latency=False):
    """Serialize outcomes into the fixed ``points.csv`` layout.

    Failed cells keep their key columns and leave every metric blank.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(POINTS_HEADER)
    for o in sorted(outcomes, key=lambda o: o.key):
        key = [o.defense, f"{o.beta:g}", o.seed, o.budget]
        if o.error:
            writer.writerow(key + [""] * (len(POINTS_HEADER) - 4))
            continue
        writer.writerow(key + [
            _fmt(100 * o.adversary_error, 6), _fmt(100 * o.defender_error, 6),
            _fmt(100 * (o.defender_error - baseline_def_err), 6),
            _fmt(o.mean_l1, 9), _fmt(o.max_l1, 9),
            _fmt(o.mean_latency_ns, 1) if record_latency else "", o.queries_used])
    return buf.getvalue()


def _median_table(points):
    lines = ["| defense | budget | beta | adv err % | def err % | delta def % | mean l1 |",
             "|---|---|---|---|---|---|---|"]
    for p in points:
        lines.append(f"| {p.defense} | {p.budget} | {p.beta:g} | {p.adversary_error:.2f} | "
                     f"{p.defender_error:.2f} | {p.delta_defender_error:+.2f} | {p.mean_l1:.4f} |")
    return lines


def tables_md(report, cfg):
    limits = cfg.evaluation.delta_limits
    out = ["# Results", "",
           f"Undefended defender error: {report.baseline['defender_error']:.2f}%", "",
           f"## Constrained maximum (mean l1 <= {cfg.evaluation.l1_budget:g})", "",
           "| defense | budget | " + " | ".join(f"delta <= {v:g}" for v in limits) + " |",
           "|---|---|" + "---|" * len(limits)]
    for name in sorted(report.constrained):
        for budget in sorted(report.constrained[name], key=int):
            row = report.constrained[name][budget]
            out.append(f"| {name} | {budget} | "
                       + " | ".join(f"{row[f'{v:g}']:.2f}" for v in limits) + " |")
    out += ["", "## Median over seeds", ""]
    out += _median_table(median_points(report.points))
    if report.failures:
        out += ["", "## Failed cells", ""]
        out += [f"- {f['defense']} beta={f['beta']:g} seed={f['seed']} budget={f['budget']}: "
                f"{f['error']}" for f in report.failures]
    return "\n".join(out) + "\n"


def _aggregate(points, baseline_adv, cfg):
    constrained, pareto = {}, {}
    medians = median_points(points)
    for name in sorted({p.defense for p in medians}):
        constrained[name], pareto[name] = {}, {}
        for budget in sorted({p.budget for p in medians}):
            pts = [p for p in medians if p.defense == name and p.budget == budget]
            if not pts:
                continue
            table = constrained_max(pts, cfg.evaluation.l1_budget, cfg.evaluation.delta_limits,
                                    baseline_adv[budget])
            constrained[name][str(budget)] = {f"{k:g}": v for k, v in table.items()}
            pareto[name][str(budget)] = {
                axis: [{"beta": p.beta, "x": getattr(p, axis), "adversary_error": p.adversary_error}
                       for p in pareto_curve(pts, axis)]
                for axis in ("defender_error", "mean_l1")}
    return constrained, pareto


def run_experiment(cfg, output_dir=None, progress=None):
    """Train, sweep every configured defense, aggregate and write the report files.

    On failure ``report.json`` still gets written with ``status = "error"``
    and a structured error record before the exception propagates.
    """
    out = prepare_output(output_dir or cfg.output_dir)
    started = time.time()
    report = ExperimentReport(config=cfg.to_dict())
    try:
        _run(cfg, out, report, progress)
    except Exception as exc:
        report.status = "error"
        report.error = {"type": type(exc).__name__, "message": str(exc)}
        report.meta = {"started_unix": started, "wall_seconds": time.time() - started}
        dump_json(report.to_dict(), os.path.join(out, "report.json"))
        raise
    report.meta = {"started_unix": started, "wall_seconds": time.time() - started}
    dump_json(report.to_dict(), os.path.join(out, "report.json"))
    return report


def _run(cfg, out, report, progress):
    dataset = build_dataset(cfg)
    train, test = dataset.train, dataset.test
    if len(test) == 0:
        raise SchemaError("dataset has no test rows")
    victim = train_victim(cfg, dataset)
    adversary = adversary_template(cfg)
    pools, pool_lock = {}, threading.Lock()

    def scenario(defense, name):
        return Scenario(victim=victim, source=train, test_X=test.X, test_y=test.y,
                        defense=defense, adversary=adversary, pool_size=cfg.pool.size,
                        pool_mode=cfg.pool.mode, pool_seed=cfg.pool.seed, name=name,
                        _pools=pools, _pool_lock=pool_lock)

    base_def_err = evaluate_error(victim, test.X, test.y)
    base_scn = scenario(NoDefense(), "none")
    base_cells = {(s, q): run_cell(base_scn, 0.0, s, q)
                  for q in cfg.sweep.budgets for s in cfg.sweep.seeds}
    base_adv = {q: 100.0 * float(np.median([base_cells[s, q].adversary_error
                                            for s in cfg.sweep.seeds]))
                for q in cfg.sweep.budgets}
    report.baseline = {"defender_error": 100.0 * base_def_err,
                       "adversary_error": {str(q): v for q, v in base_adv.items()}}

    sink = ReportSink(callback=progress)
    outcomes = []
    for spec in cfg.defenses:
        defense = build_defense(spec, dataset, cfg.victim.train)
        outcomes += sweep_beta(scenario(defense, spec.name), cfg.sweep.betas, cfg.sweep.seeds,
                               sink=sink, budgets=cfg.sweep.budgets, jobs=cfg.run.jobs,
                               fail_fast=cfg.run.fail_fast)

    report.points = curve_points(outcomes, base_def_err)
    report.failures = [o.to_dict() for o in outcomes if o.error]
    report.constrained, report.pareto = _aggregate(report.points, base_adv, cfg)
    with open(os.path.join(out, "points.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(points_csv(outcomes, base_def_err, cfg.run.record_latency))
    with open(os.path.join(out, "tables.md"), "w", encoding="utf-8") as fh:
        fh.write(tables_md(report, cfg))


# --------------------------------------------------------------------------
# plot data


def _operating_beta(points, l1_budget):
    """Largest-l1 beta whose median mean l1 stays within budget (smallest beta if none)."""
    by_beta = {}
    for p in points:
        by_beta.setdefault(p.beta, []).append(p.mean_l1)
    med = {b: float(np.median(v)) for b, v in by_beta.items()}
    feasible = [b for b, v in med.items() if v <= l1_budget]
    if not feasible:
        return min(med)
    return max(feasible, key=lambda b: (med[b], b))


def plot_rows(points, figure, l1_budget=0.9):
    """``(x, y, seed)`` rows of one figure for one defense's points.

    ``results`` plots defender vs adversary error and ``l1`` mean l1 vs
    adversary error, both at the largest budget. ``queries_budget`` plots
    adversary error against the budget at the defense's operating beta.
    """
    if figure == "queries_budget":
        beta = _operating_beta(points, l1_budget)
        rows = [(p.budget, p.adversary_error, p.seed) for p in points if p.beta == beta]
    else:
        top = max(p.budget for p in points)
        attr = "defender_error" if figure == "results" else "mean_l1"
        rows = [(getattr(p, attr), p.adversary_error, p.seed) for p in points if p.budget == top]
    return sorted(rows)


def emit_plot_data(report, output_dir):
    """Write ``<figure>_<defense>.tsv`` files with columns ``x<TAB>y<TAB>seed``."""
    if not report.points:
        raise EmptyReport("report holds no points")
    os.makedirs(output_dir, exist_ok=True)
    l1_budget = report.config.get("evaluation", {}).get("l1_budget", 0.9)
    written = []
    for name in sorted({p.defense for p in report.points}):
        pts = [p for p in report.points if p.defense == name]
        for figure in PLOT_FIGURES:
            path = os.path.join(output_dir, f"{figure}_{name}.tsv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("# x\ty\tseed\n")
                for x, y, seed in plot_rows(pts, figure, l1_budget):
                    fh.write(f"{x:.9g}\t{y:.9g}\t{seed}\n")
            written.append(path)
    return written


# --------------------------------------------------------------------------
# latency bench


def bench_fixture(cfg):
    """Victim, query batch and defense list of the latency bench.

    The victim is a ``n_features -> hidden -> n_classes`` network trained
    briefly on blobs; AM's misinformation model gets the victim's
    architecture so its extra cost is one full second forward pass.
    """
    b = cfg.bench
    data = make_blobs(n_classes=b.n_classes, per_class=b.per_class, n_features=b.n_features,
                      seed=cfg.seed)
    train = data.train
    victim = SoftmaxMLP(hidden_layer_sizes=tuple(b.hidden), epochs=b.epochs,
                        n_classes=b.n_classes, random_state=cfg.seed).fit(train.X, train.y)
    queries = make_query_pool(train, b.warmup + b.queries, seed=cfg.seed + 1).features
    defenses = [("none", NoDefense())]
    for spec in cfg.defenses:
        if spec.kind == "none":
            continue
        params = dict(spec.params)
        if spec.kind == "am":
            params["hidden_layer_sizes"] = tuple(b.hidden)
        defense = make_defense(spec.kind, **params)
        if spec.kind == "am":
            defense.fit(train.X, train.y, n_classes=b.n_classes, epochs=b.epochs)
        defenses.append((spec.name, defense.with_strength(b.beta)))
    return victim, queries, defenses


def bench_latency(cfg, output_dir=None):
    """Time single-query calls per defense and write ``latency.csv``.

    Every defense answers the same queries in the same order: `warmup`
    untimed calls, then `queries` timed calls. Timed calls are interleaved
    across defenses in blocks, with the defense order rotating per block,
    so drift in machine load spreads evenly. The garbage collector is paused
    while timing.
    """
    victim, queries, defenses = bench_fixture(cfg)
    b = cfg.bench
    oracles = [(name, DefendedOracle(victim, d)) for name, d in defenses]
    for _, oracle in oracles:
        for x in queries[:b.warmup]:
            oracle.answer_query(x)
        oracle.latencies_ns.clear()
    timed = queries[b.warmup:]
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for i, start in enumerate(range(0, len(timed), b.block)):
            block = timed[start:start + b.block]
            shift = i % len(oracles)
            for _, oracle in oracles[shift:] + oracles[:shift]:
                for x in block:
                    oracle.answer_query(x)
    finally:
        if gc_was_enabled:
            gc.enable()
    rows = latency_summary({name: o.latencies_ns for name, o in oracles}, baseline="none")
    out = output_dir or cfg.output_dir
    if out is not None:
        prepare_output(out)
        with open(os.path.join(out, "latency.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LATENCY_HEADER)
            for r in rows:
                writer.writerow([r.defense, r.n, f"{r.mean_ms:.3f}", f"{r.median_ms:.3f}",
                                 f"{r.p99_ms:.3f}", f"{r.overhead_ratio:.4f}"])
    return rows


# --------------------------------------------------------------------------
# calibration


def calibrate(cfg, defense_name, l1_budget, victim=None, dataset=None):
    """Largest grid strength of `defense_name` whose mean l1 on the test set fits `l1_budget`."""
    specs = {d.name: d for d in cfg.defenses}
    if defense_name not in specs:
        raise ConfigError(f"no defense named {defense_name!r}; have {sorted(specs)}",
                          key="defense")
    dataset = build_dataset(cfg) if dataset is None else dataset
    victim = train_victim(cfg, dataset) if victim is None else victim
    defense = build_defense(specs[defense_name], dataset, cfg.victim.train)
    test = dataset.test if len(dataset.test) else dataset.train
    return calibrate_beta(defense, victim.predict_proba(test.X), l1_budget, X=test.X)


"""Aggregation of attack outcomes into trade-off tables, frontiers and latency summaries."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import InsufficientSamples

MIN_LATENCY_SAMPLES = 100


@dataclass(frozen=True)
class CurvePoint:
    """One operating point. Errors are percentages; l1 is in [0, 2]."""

    defense: str
    beta: float
    seed: int
    adversary_error: float
    defender_error: float
    delta_defender_error: float
    mean_l1: float
    max_l1: float
    mean_latency_ns: float = float("nan")
    queries: int = 0
    budget: int = 0

    def to_dict(self):
        return asdict(self)


def curve_points(outcomes, baseline_defender_error):
    """Convert successful :class:`AttackOutcome` rows to percentage-scale points.

    `baseline_defender_error` is the undefended defender error as a fraction.
    Failed cells (``error`` set) are skipped.
    """
    points = []
    for o in outcomes:
        if o.error:
            continue
        points.append(CurvePoint(
            defense=o.defense, beta=o.beta, seed=o.seed,
            adversary_error=100.0 * o.adversary_error,
            defender_error=100.0 * o.defender_error,
            delta_defender_error=100.0 * (o.defender_error - baseline_defender_error),
            mean_l1=o.mean_l1, max_l1=o.max_l1,
            mean_latency_ns=o.mean_latency_ns, queries=o.queries_used, budget=o.budget))
    return points


def median_points(points):
    """Collapse seeds: one point per (defense, beta, budget) holding per-field medians."""
    groups = {}
    for p in points:
        groups.setdefault((p.defense, p.beta, p.budget), []).append(p)
    out = []
    for (defense, beta, budget), grp in sorted(groups.items()):
        med = {f: float(np.median([getattr(p, f) for p in grp]))
               for f in ("adversary_error", "defender_error", "delta_defender_error",
                         "mean_l1", "max_l1", "mean_latency_ns")}
        out.append(CurvePoint(defense=defense, beta=beta, seed=-1, queries=grp[0].queries,
                              budget=budget, **med))
    return out


def constrained_max(points, l1_budget, delta_def_limits, undefended_adversary_error):
    """Best adversary error reachable under an l1 budget and a defender-error limit.

    For each limit ``L`` returns the largest ``adversary_error`` among points
    with ``mean_l1 <= l1_budget`` and ``delta_defender_error <= L``; an empty
    feasible set yields `undefended_adversary_error`.
    """
    table = {}
    for limit in delta_def_limits:
        feasible = [p.adversary_error for p in points
                    if p.mean_l1 <= l1_budget and p.delta_defender_error <= limit]
        table[limit] = max(feasible) if feasible else undefended_adversary_error
    return table


def _x_value(point, x_axis):
    if x_axis not in ("defender_error", "mean_l1"):
        raise ValueError(f"x_axis must be 'defender_error' or 'mean_l1', got {x_axis!r}")
    return getattr(point, x_axis)


def pareto_curve(points, x_axis="mean_l1"):
    """Non-dominated points (low x, high adversary error), sorted by x.

    A point is dominated when another has x no larger and error no smaller,
    with at least one strict. Exact duplicates survive together. Ties sort by
    beta, then seed.
    """
    ordered = sorted(points, key=lambda p: (_x_value(p, x_axis), -p.adversary_error,
                                            p.beta, p.seed))
    frontier = []
    best = -math.inf
    best_x = None
    for p in ordered:
        x = _x_value(p, x_axis)
        if p.adversary_error > best:
            frontier.append(p)
            best, best_x = p.adversary_error, x
        elif p.adversary_error == best and x == best_x:
            frontier.append(p)
    return frontier


def nearest_rank(values, q):
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    data = sorted(values)
    if not data:
        raise InsufficientSamples("no samples")
    rank = max(1, math.ceil(q / 100.0 * len(data)))
    return data[rank - 1]


@dataclass
class LatencyRow:
    defense: str
    n: int
    mean_ns: float
    median_ns: float
    p99_ns: float
    overhead_ratio: float

    @property
    def mean_ms(self):
        return round(self.mean_ns / 1e6, 3)

    @property
    def median_ms(self):
        return round(self.median_ns / 1e6, 3)

    @property
    def p99_ms(self):
        return round(self.p99_ns / 1e6, 3)


def latency_summary(samples, baseline="none"):
    """Per-defense mean, median and p99 latency with overhead vs `baseline`.

    Parameters
    ----------
    samples : dict of str -> sequence of int
        Per-query latencies in nanoseconds, keyed by defense name.
    baseline : str
        Key of the undefended reference; ``overhead_ratio`` is
        ``mean / baseline mean`` (NaN if the baseline is missing).

    The median is the ordinary sample median; p99 uses the nearest rank.
    """
    rows = []
    for name, vals in samples.items():
        if len(vals) < MIN_LATENCY_SAMPLES:
            raise InsufficientSamples(
                f"{name}: {len(vals)} samples, need {MIN_LATENCY_SAMPLES}")
    base = float(np.mean(samples[baseline])) if baseline in samples else float("nan")
    for name, vals in samples.items():
        arr = np.asarray(vals, dtype=np.float64)
        mean = float(arr.mean())
        rows.append(LatencyRow(name, len(arr), mean, float(np.median(arr)),
                               float(nearest_rank(arr.tolist(), 99)), mean / base))
    return rows

"""Fast self-checks of the library's core invariants, run by ``posterior-shield selftest``."""

from dataclasses import dataclass

import numpy as np

from .defenses import DEFENSES, DeceptivePerturbation, ReverseSigmoid, rs_noise
from .metrics import CurvePoint, constrained_max, latency_summary, pareto_curve
from .models import SoftmaxMLP, gradient_check
from .simplex import SIMPLEX_ATOL, l1_distance, random_simplex


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def _closure(rng, n):
    Y = random_simplex(n, 10, rng)
    X = rng.normal(size=(n, 3))
    worst = 0.0
    for kind, cls in DEFENSES.items():
        d = cls()
        if kind == "am":
            d = cls(hidden_layer_sizes=(4,)).fit(X, rng.integers(0, 10, n), epochs=2)
        out = d.perturb(Y, X)
        if out.min() < 0:
            return False, f"{kind}: negative entry"
        worst = max(worst, float(np.abs(out.sum(axis=1) - 1).max()))
    return worst <= SIMPLEX_ATOL, f"max |sum - 1| = {worst:.2e}"


def _dcp_identity(rng, n):
    Y = random_simplex(n, 10, rng)
    same = np.array_equal(DeceptivePerturbation(beta=0.0).perturb(Y), Y)
    return same, "bit-exact" if same else "output differs from input"


def _gamma_one(rng, n):
    Y = random_simplex(n, 10, rng)
    err = float(np.abs(rs_noise(Y, 1.0) - (Y - 0.5)).max())
    return err <= 1e-12, f"max error {err:.2e}"


def _dcp_regimes(rng, n):
    Y = random_simplex(n, 10, rng, alpha=0.3)
    beta = 0.5
    top = Y.max(axis=1)
    hi, lo = top > beta + 0.05, top < beta - 0.05
    dcp = DeceptivePerturbation(beta=beta).perturb(Y)
    rs = ReverseSigmoid(beta=beta).perturb(Y)
    above = float(np.abs(dcp[hi] - rs[hi]).sum(axis=1).max(initial=0.0))
    below = float(np.asarray(l1_distance(dcp[lo], Y[lo])).max(initial=0.0))
    return above < 1e-6 and below < 1e-6, f"above {above:.1e}, below {below:.1e}"


def _l1_monotone(rng, n):
    Y = random_simplex(n, 10, rng)
    prev = np.zeros(n)
    for beta in np.linspace(0, 1.5, 16):
        cur = l1_distance(Y, ReverseSigmoid(beta=float(beta)).perturb(Y))
        if np.any(cur < prev - 1e-9):
            return False, f"l1 decreased at beta={beta:g}"
        prev = cur
    return True, "non-decreasing on 16 betas"


def _gradients(rng, n):
    model = SoftmaxMLP(hidden_layer_sizes=(5, 4), n_classes=3).initialize(4, 3, rng)
    # nonzero biases keep pre-activations off the ReLU kink at exactly 0
    model.intercepts_ = [rng.uniform(-0.5, 0.5, b.shape) for b in model.intercepts_]
    X = rng.normal(size=(8, 4))
    T = random_simplex(8, 3, rng)
    err = gradient_check(model, X, T)
    return err < 1e-4, f"max relative error {err:.2e}"


def _random_points(rng, n):
    return [CurvePoint("d", float(i), 0, float(rng.uniform(0, 100)), 0.0, float(rng.uniform(-3, 8)),
                       float(rng.uniform(0, 2)), 0.0) for i in range(n)]


def _constrained_monotone(rng, n):
    for _ in range(100):
        pts = _random_points(rng, 20)
        low = constrained_max(pts, 0.5, [1, 2, 5], 0.0)
        high = constrained_max(pts, 1.0, [1, 2, 5], 0.0)
        vals = [low[1], low[2], low[5]]
        if vals != sorted(vals) or any(high[k] < low[k] for k in low):
            return False, "maximum decreased when a constraint loosened"
    return True, "100 clouds"


def _pareto(rng, n):
    for _ in range(50):
        pts = _random_points(rng, 30)
        front = {p.beta for p in pareto_curve(pts, "mean_l1")}
        brute = {p.beta for p in pts if not any(
            q.mean_l1 <= p.mean_l1 and q.adversary_error >= p.adversary_error
            and (q.mean_l1, q.adversary_error) != (p.mean_l1, p.adversary_error) for q in pts)}
        if front != brute:
            return False, "frontier differs from brute force"
    return True, "50 clouds match brute force"


def _percentiles(rng, n):
    row = latency_summary({"none": list(range(1, 101))})[0]
    ok = row.median_ns == 50.5 and row.p99_ns == 99 and row.overhead_ratio == 1.0
    return ok, f"median {row.median_ns}, p99 {row.p99_ns}"


CHECKS = [
    ("simplex closure", _closure),
    ("dcp beta=0 identity", _dcp_identity),
    ("gamma=1 closed form", _gamma_one),
    ("dcp detector regimes", _dcp_regimes),
    ("l1 monotone in beta", _l1_monotone),
    ("gradient check", _gradients),
    ("constrained max monotone", _constrained_monotone),
    ("pareto frontier", _pareto),
    ("latency percentiles", _percentiles),
]


def run_selftest(n=1000, seed=0):
    """Run every check; returns a list of :class:`Check`. Exceptions count as failures."""
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng, n)
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(Check(name, bool(ok), detail))
    return results

"""Knockoff-style extraction attack against a defended prediction API.

The attacker side (:func:`build_transfer_set`, :func:`knockoff_attack`) only
ever touches :meth:`DefendedOracle.answer_query`. Clean posteriors are
available to the defender through :meth:`DefendedOracle.audit`, which the
evaluation half of :func:`run_knockoff` uses to score utility.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import clone

from .datagen import make_query_pool
from .defenses import NoDefense
from .exceptions import BudgetError, ShapeError
from .models import SoftmaxMLP, evaluate_error
from .simplex import argmax, l1_distance

logger = logging.getLogger(__name__)


class DefendedOracle:
    """A victim model behind a perturbation defense, metering every query.

    ``latencies_ns`` holds the wall-clock cost of forward pass plus defense
    for each answered query, measured with a monotonic clock.
    """

    def __init__(self, victim, defense=None):
        self._victim = victim
        self.defense = NoDefense() if defense is None else defense
        self.n_queries = 0
        self.latencies_ns = []
        self._lock = threading.Lock()

    @property
    def n_features(self):
        return self._victim.n_features_in_

    @property
    def n_classes(self):
        return len(self._victim.classes_)

    def answer_query(self, x):
        """Defended posterior for one query vector."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise ShapeError(f"query must have shape ({self.n_features},), got {x.shape}")
        start = time.perf_counter_ns()
        y = self._victim.forward(x)
        out = self.defense.perturb(y, x[None, :])
        elapsed = time.perf_counter_ns() - start
        with self._lock:
            self.n_queries += 1
            self.latencies_ns.append(elapsed)
        return out

    def audit(self, X):
        """Defender-side batch view: ``(clean, defended)`` posteriors; not metered."""
        clean = self._victim.predict_proba(X)
        return clean, self.defense.perturb(clean, X)

    def clone(self):
        """Fresh meters over the same victim and defense (defenses are stateless)."""
        return DefendedOracle(self._victim, self.defense)


@dataclass
class TransferSet:
    queries: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.queries)


@dataclass
class AttackOutcome:
    """Metrics of one attack run. Errors are fractions in [0, 1]."""

    defense: str
    beta: float
    seed: int
    budget: int
    adversary_error: float = float("nan")
    defender_error: float = float("nan")
    mean_l1: float = float("nan")
    max_l1: float = float("nan")
    queries_used: int = 0
    mean_latency_ns: float = float("nan")
    latencies_ns: list = field(default_factory=list, repr=False)
    error: str = None

    @property
    def key(self):
        return (self.defense, self.beta, self.seed, self.budget)

    def to_dict(self, with_latencies=False):
        out = asdict(self)
        if not with_latencies:
            out.pop("latencies_ns")
        return out


def build_transfer_set(oracle, pool, budget):
    """Label the first `budget` pool queries through the oracle, one query at a time."""
    if budget > len(pool):
        raise BudgetError(f"budget {budget} exceeds pool size {len(pool)}")
    queries = pool.features[:budget]
    if budget == 0:
        return TransferSet(queries.copy(), np.empty((0, oracle.n_classes)))
    targets = np.stack([oracle.answer_query(x) for x in queries])
    return TransferSet(queries.copy(), targets)


def knockoff_attack(oracle, pool, budget, adversary):
    """Query, label, and fit a clone of `adversary` on the soft targets.

    With an empty budget the adversary is only initialized.
    """
    transfer = build_transfer_set(oracle, pool, budget)
    model = clone(adversary).set_params(n_classes=oracle.n_classes)
    if len(transfer) == 0:
        model.initialize(oracle.n_features, oracle.n_classes)
        model.loss_curve_ = []
        return model
    return model.fit(transfer.queries, transfer.targets)


def run_knockoff(oracle, pool, budget, adversary, test_X, test_y, *, defense_name=None,
                 beta=0.0, seed=0):
    """Full attack plus evaluation on the victim's held-out test set."""
    model = knockoff_attack(oracle, pool, budget, adversary)
    clean, defended = oracle.audit(test_X)
    test_y = np.asarray(test_y)
    l1 = l1_distance(clean, defended)
    lat = list(oracle.latencies_ns)
    return AttackOutcome(
        defense=defense_name or oracle.defense.kind,
        beta=float(beta),
        seed=int(seed),
        budget=int(budget),
        adversary_error=evaluate_error(model, test_X, test_y),
        defender_error=float(np.mean(argmax(defended) != test_y)),
        mean_l1=float(np.mean(l1)),
        max_l1=float(np.max(l1)),
        queries_used=oracle.n_queries,
        mean_latency_ns=float(np.mean(lat)) if lat else float("nan"),
        latencies_ns=lat,
    )


class ReportSink:
    """Thread-safe collector; ``callback`` sees every outcome as it lands."""

    def __init__(self, callback=None):
        self._lock = threading.Lock()
        self.outcomes = []
        self.callback = callback

    def add(self, outcome):
        with self._lock:
            self.outcomes.append(outcome)
            if self.callback is not None:
                self.callback(outcome)

    def sorted(self):
        with self._lock:
            return sorted(self.outcomes, key=lambda o: o.key)


@dataclass
class Scenario:
    """Everything one sweep cell needs besides (defense strength, seed, budget).

    Pools are drawn per seed from ``pool_seed + seed`` and cached, so budgets
    slice nested prefixes of the same shuffled pool.
    """

    victim: SoftmaxMLP
    source: object
    test_X: np.ndarray
    test_y: np.ndarray
    defense: object
    adversary: SoftmaxMLP
    pool_size: int
    pool_mode: str = "in_distribution"
    pool_seed: int = 0
    budget: int = None
    name: str = None
    _pools: dict = field(default_factory=dict, repr=False)
    _pool_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def pool_for(self, seed):
        with self._pool_lock:
            if seed not in self._pools:
                self._pools[seed] = make_query_pool(
                    self.source, self.pool_size, self.pool_mode, seed=self.pool_seed + seed)
            return self._pools[seed]


def run_cell(scenario, beta, seed, budget=None, fail_fast=True):
    """One (strength, seed, budget) cell of a sweep."""
    budget = scenario.budget if budget is None else budget
    budget = scenario.pool_size if budget is None else budget
    name = scenario.name or scenario.defense.kind
    try:
        oracle = DefendedOracle(scenario.victim, scenario.defense.with_strength(beta))
        adversary = clone(scenario.adversary).set_params(random_state=int(seed))
        return run_knockoff(oracle, scenario.pool_for(seed), budget, adversary,
                            scenario.test_X, scenario.test_y,
                            defense_name=name, beta=beta, seed=seed)
    except Exception as exc:
        if fail_fast:
            raise
        logger.warning("cell %s beta=%s seed=%s failed: %s", name, beta, seed, exc)
        return AttackOutcome(name, float(beta), int(seed), int(budget),
                             error=f"{type(exc).__name__}: {exc}")


def sweep_beta(scenario, beta_grid, seeds, sink=None, budgets=None, jobs=1, fail_fast=True):
    """Run every (beta, seed, budget) cell; return outcomes sorted by key."""
    beta_grid, seeds = list(beta_grid), list(seeds)
    if not beta_grid or not seeds:
        raise ValueError("beta grid and seeds must be non-empty")
    budgets = [scenario.budget] if budgets is None else list(budgets)
    sink = ReportSink() if sink is None else sink
    cells = [(b, s, q) for q in budgets for b in beta_grid for s in seeds]

    def work(cell):
        outcome = run_cell(scenario, *cell, fail_fast=fail_fast)
        sink.add(outcome)
        return outcome

    if jobs <= 1:
        results = [work(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, cells))
    return sorted(results, key=lambda o: o.key)

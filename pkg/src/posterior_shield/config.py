"""Experiment configuration: TOML files, flag overrides and validation.

Every default is materialized on load so the snapshot stored in
``report.json`` describes the run completely and parses back to an equal
:class:`ExperimentConfig`.
"""

import copy
import inspect
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from .datagen import GENERATORS
from .defenses import DEFENSES, make_defense
from .exceptions import ConfigError, UnknownKeyError
from .models import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

SEED_ENV = "POSTERIOR_SHIELD_SEED"
BETA_SWEEP_MAX = 1.5
DEFAULT_BETAS = [round(0.1 * i, 10) for i in range(16)]


@dataclass
class DatasetSpec:
    generator: str = "blobs"
    seed: int | None = None
    path: str | None = None
    params: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    hidden: list = field(default_factory=lambda: [16])
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class DefenseSpec:
    kind: str
    name: str | None = None
    params: dict = field(default_factory=dict)


@dataclass
class PoolSpec:
    mode: str = "in_distribution"
    size: int = 2000
    seed: int | None = None


@dataclass
class SweepSpec:
    betas: list = field(default_factory=lambda: list(DEFAULT_BETAS))
    seeds: list | None = None
    budgets: list | None = None


@dataclass
class EvaluationSpec:
    l1_budget: float = 0.9
    delta_limits: list = field(default_factory=lambda: [1.0, 2.0, 5.0])


@dataclass
class BenchSpec:
    n_classes: int = 100
    n_features: int = 128
    hidden: list = field(default_factory=lambda: [640, 640])
    per_class: int = 20
    epochs: int = 2
    beta: float = 0.5
    queries: int = 10000
    warmup: int = 100
    block: int = 50


@dataclass
class RunSpec:
    jobs: int = 1
    fail_fast: bool = False
    record_latency: bool = False
    allow_extended_beta: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "results"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    victim: ModelSpec = field(default_factory=ModelSpec)
    adversary: ModelSpec = field(default_factory=lambda: ModelSpec(hidden=[32]))
    defenses: list = field(default_factory=list)
    pool: PoolSpec = field(default_factory=PoolSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data, strict=False):
        return _build(data, strict)


SECTIONS = {
    "dataset": DatasetSpec, "pool": PoolSpec, "sweep": SweepSpec,
    "evaluation": EvaluationSpec, "bench": BenchSpec, "run": RunSpec,
}


def _unknown(keys, where, strict):
    if not keys:
        return
    msg = f"unknown keys {sorted(keys)}"
    if strict:
        raise UnknownKeyError(msg, key=where)
    logger.warning("%s: %s (ignored)", where, msg)


def _section(cls, data, where, strict):
    if not isinstance(data, dict):
        raise ConfigError("must be a table", key=where)
    names = {f.name for f in fields(cls)}
    _unknown(set(data) - names, where, strict)
    try:
        return cls(**{k: copy.deepcopy(v) for k, v in data.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key=where) from None


def _model(data, where, strict, default_hidden):
    data = dict(data or {})
    _unknown(set(data) - {"hidden", "train"}, where, strict)
    train = data.get("train", {})
    train_names = {f.name for f in fields(TrainConfig)}
    _unknown(set(train) - train_names, f"{where}.train", strict)
    try:
        cfg = TrainConfig(**{k: v for k, v in train.items() if k in train_names})
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"{where}.train") from None
    hidden = list(data.get("hidden", default_hidden))
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("hidden widths must be positive integers", key=f"{where}.hidden")
    return ModelSpec(hidden=hidden, train=cfg)


def _defense(data, i, strict):
    where = f"defenses[{i}]"
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("each defense needs a 'kind'", key=where)
    kind = data["kind"]
    if kind not in DEFENSES:
        raise ConfigError(f"unknown defense {kind!r}; choose from {sorted(DEFENSES)}",
                          key=f"{where}.kind")
    params = dict(data.get("params", {}))
    # flat form: [[defenses]] kind = "dcp", gamma = 0.3
    for k, v in data.items():
        if k not in ("kind", "name", "params"):
            params[k] = v
    accepted = set(DEFENSES[kind]().get_params()) - {"misinformation_model"}
    _unknown(set(params) - accepted, where, strict)
    params = {k: v for k, v in params.items() if k in accepted}
    try:
        full = make_defense(kind, **params).get_params()
    except ConfigError as exc:
        raise ConfigError(str(exc), key=where) from None
    full.pop("misinformation_model", None)
    if "hidden_layer_sizes" in full:
        full["hidden_layer_sizes"] = list(full["hidden_layer_sizes"])
    return DefenseSpec(kind=kind, name=data.get("name") or kind, params=full)


def _resolve_seed(data):
    if data.get("seed") is not None:
        return data["seed"]
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _build(data, strict):
    data = copy.deepcopy(data)
    top = {f.name for f in fields(ExperimentConfig)}
    _unknown(set(data) - top, "<root>", strict)
    seed = _resolve_seed(data)
    if not isinstance(seed, int):
        raise ConfigError("must be an integer", key="seed")
    cfg = ExperimentConfig(seed=seed, output_dir=str(data.get("output_dir", "results")))
    for name, cls in SECTIONS.items():
        if name in data:
            setattr(cfg, name, _section(cls, data[name], name, strict))
    cfg.victim = _model(data.get("victim"), "victim", strict, [16])
    cfg.adversary = _model(data.get("adversary"), "adversary", strict, [32])
    cfg.defenses = [_defense(d, i, strict) for i, d in enumerate(data.get("defenses", []))]
    return validate(materialize(cfg))


def materialize(cfg):
    """Fill every derived default in place and return `cfg`."""
    if cfg.dataset.seed is None:
        cfg.dataset.seed = cfg.seed
    if cfg.pool.seed is None:
        cfg.pool.seed = cfg.seed + 1000
    if cfg.sweep.seeds is None:
        cfg.sweep.seeds = [cfg.seed]
    if cfg.sweep.budgets is None:
        cfg.sweep.budgets = [cfg.pool.size]
    gen = GENERATORS.get(cfg.dataset.generator)
    if gen is not None:
        defaults = {k: p.default for k, p in inspect.signature(gen).parameters.items()
                    if k != "seed"}
        unknown = set(cfg.dataset.params) - set(defaults)
        if unknown:
            raise ConfigError(f"{cfg.dataset.generator} does not take {sorted(unknown)}",
                              key="dataset.params")
        cfg.dataset.params = {**defaults, **cfg.dataset.params}
    cfg.sweep.betas = [float(b) for b in cfg.sweep.betas]
    cfg.sweep.seeds = [int(s) for s in cfg.sweep.seeds]
    cfg.sweep.budgets = [int(b) for b in cfg.sweep.budgets]
    cfg.evaluation.delta_limits = [float(v) for v in cfg.evaluation.delta_limits]
    cfg.evaluation.l1_budget = float(cfg.evaluation.l1_budget)
    return cfg


def validate(cfg):
    if cfg.dataset.generator not in (*GENERATORS, "csv"):
        raise ConfigError(f"unknown generator {cfg.dataset.generator!r}", key="dataset.generator")
    if cfg.dataset.generator == "csv" and not cfg.dataset.path:
        raise ConfigError("csv datasets need a path", key="dataset.path")
    if not cfg.defenses:
        raise ConfigError("at least one defense is required", key="defenses")
    names = [d.name for d in cfg.defenses]
    if len(set(names)) != len(names):
        raise ConfigError(f"defense names must be unique, got {names}", key="defenses")
    if not cfg.sweep.betas:
        raise ConfigError("beta grid is empty", key="sweep.betas")
    limit = 10.0 if cfg.run.allow_extended_beta else BETA_SWEEP_MAX
    for b in cfg.sweep.betas:
        if not 0.0 <= b <= limit:
            hint = "" if cfg.run.allow_extended_beta else " (use --allow-extended-beta)"
            raise ConfigError(f"beta {b} outside [0, {limit}]{hint}", key="sweep.betas")
    if not cfg.sweep.seeds:
        raise ConfigError("seed list is empty", key="sweep.seeds")
    if cfg.pool.mode not in ("in_distribution", "ood"):
        raise ConfigError("must be 'in_distribution' or 'ood'", key="pool.mode")
    if cfg.pool.size < 1:
        raise ConfigError("must be >= 1", key="pool.size")
    for b in cfg.sweep.budgets:
        if not 0 <= b <= cfg.pool.size:
            raise ConfigError(f"budget {b} outside [0, pool.size={cfg.pool.size}]",
                              key="sweep.budgets")
    if not 0.0 < cfg.evaluation.l1_budget <= 2.0:
        raise ConfigError("must lie in (0, 2]", key="evaluation.l1_budget")
    if any(v <= 0 for v in cfg.evaluation.delta_limits):
        raise ConfigError("limits must be positive", key="evaluation.delta_limits")
    if cfg.bench.warmup < 100:
        raise ConfigError("must be >= 100", key="bench.warmup")
    if cfg.bench.queries < 100:
        raise ConfigError("must be >= 100", key="bench.queries")
    if cfg.bench.block < 1:
        raise ConfigError("must be >= 1", key="bench.block")
    if cfg.run.jobs < 1:
        raise ConfigError("must be >= 1", key="run.jobs")
    return cfg


def _set_dotted(data, dotted, value):
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a non-table", key=dotted)
    node[parts[-1]] = value


def parse_value(text):
    """Interpret a flag value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key=str(path)) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}", key=str(path)) from None


def parse_config(path=None, overrides=None, strict=False):
    """Build a validated config from a TOML file and/or dotted-key overrides.

    Overrides (``{"seed": 7, "run.jobs": 2}``) win over file keys; the seed
    falls back to ``$POSTERIOR_SHIELD_SEED`` when neither sets it.
    """
    data = load_toml(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    return _build(data, strict)

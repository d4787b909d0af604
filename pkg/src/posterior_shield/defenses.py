"""Posterior-perturbation defenses.

The module has two layers. The functional layer (``rs_noise``, ``dcp_defend``
and friends) implements each perturbation rule on a posterior vector or a
batch of them. The estimator layer wraps every rule in a scikit-learn style
transformer so a defense can be cloned, re-parameterized with ``set_params``
and dropped in front of any classifier exposing ``predict_proba``.

All rules are instances of one general form::

    y' = N(a * y + b * r)

where ``y`` is the clean posterior, ``r`` a noise vector and ``N`` the
clip-and-rescale normalizer of :func:`posterior_shield.simplex.normalize`.
"""

import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone

from .exceptions import ConfigError, DegenerateError, ParamError, ShapeError
from .simplex import (CLAMP, MIN_MASS, argmax, l1_distance, normalize, reverse_sigmoid,
                      sigmoid)

DEFAULT_GAMMA = 0.2
DEFAULT_NU = 1000.0
DEFAULT_AM_TAU = 0.5
#: Random-noise defense draws from this bit generator; recorded in reports.
RNG_ALGORITHM = f"numpy.random.PCG64 (numpy {np.__version__})"

BETA_GRID_STEP = 0.05
BETA_GRID_MAX = 1.5


@dataclass
class DefenseConfig:
    """Parameters shared by the perturbation rules.

    ``tau=None`` means "derive it": DCP uses ``min(beta, 1)``, AM uses 0.5.
    ``coeff_a`` and ``coeff_b`` only matter for :func:`apply_general`.
    """

    beta: float = 0.0
    gamma: float = DEFAULT_GAMMA
    nu: float = DEFAULT_NU
    tau: float | None = None
    coeff_a: float = 1.0
    coeff_b: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.beta <= 10.0:
            raise ConfigError(f"must lie in [0, 10], got {self.beta}", key="beta")
        if not 0.0 < self.gamma <= 10.0:
            raise ConfigError(f"must lie in (0, 10], got {self.gamma}", key="gamma")
        if not 0.0 < self.nu <= 1e6:
            raise ConfigError(f"must lie in (0, 1e6], got {self.nu}", key="nu")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.tau}", key="tau")
        if self.coeff_a > 1.0 or self.coeff_b > 1.0:
            raise ConfigError("linear-combination coefficients must be <= 1", key="coeff")
        return self

    @property
    def dcp_tau(self):
        return min(self.beta, 1.0) if self.tau is None else self.tau

    @property
    def am_tau(self):
        return DEFAULT_AM_TAU if self.tau is None else self.tau

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", key="defense")
        return cls(**data)


# --------------------------------------------------------------------------
# functional rules


def _shifted(y, gamma, coeff):
    """``y - coeff * r(y)`` before normalization, in as few ufunc calls as possible.

    Uses ``S(gamma * S^-1(y)) - 1/2 == 1/2 - 1 / (1 + u**gamma)`` with
    ``u = y / (1 - y)``; `coeff` is a scalar or an ``(n, 1)`` column.
    """
    u = np.maximum(y, CLAMP)
    np.minimum(u, 1.0 - CLAMP, out=u)
    np.divide(u, 1.0 - u, out=u)
    np.power(u, gamma, out=u)
    u += 1.0
    np.divide(coeff, u, out=u)
    u += y
    u -= 0.5 * coeff
    return u


def _normalize(scores):
    # hot-path twin of simplex.normalize; `scores` is a fresh array we may overwrite
    np.maximum(scores, 0.0, out=scores)
    if scores.ndim == 1:
        total = scores.sum()
        if total < MIN_MASS:
            raise DegenerateError("perturbed scores have no positive mass")
    else:
        total = scores.sum(axis=1, keepdims=True)
        if (total < MIN_MASS).any():
            raise DegenerateError("perturbed scores have no positive mass")
    scores /= total
    return scores


def _rs(y, beta, gamma):
    return _normalize(_shifted(y, gamma, beta))


def _dcp(y, beta, gamma, nu, tau):
    # always the full computation, so response time does not reveal the detector state
    if y.ndim == 1:
        u = nu * (float(y.max()) - tau)
        if u >= 0.0:
            alpha = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            alpha = e / (1.0 + e)
        coeff = beta * alpha
    else:
        coeff = (beta * sigmoid(nu * (y.max(axis=1) - tau)))[:, None]
    return _normalize(_shifted(y, gamma, coeff))


def rs_noise(y, gamma=DEFAULT_GAMMA):
    """Reverse-sigmoid noise ``S(gamma * S^-1(y)) - 1/2``, entrywise in (-1/2, 1/2)."""
    if gamma <= 0:
        raise ParamError("gamma must be positive")
    return sigmoid(gamma * reverse_sigmoid(y)) - 0.5


def detector_alpha(y_max, tau, nu=DEFAULT_NU):
    """Confidence switch ``S(nu * (y_max - tau))``: near 1 above `tau`, near 0 below."""
    if np.ndim(y_max) == 0:
        return sigmoid(nu * (float(y_max) - tau))
    return sigmoid(nu * (np.asarray(y_max, dtype=np.float64) - tau))


def apply_general(y, r, a, b):
    """``N(a * y + b * r)``. `a` and `b` may be scalars or per-row arrays."""
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if y.shape != r.shape:
        raise ShapeError(f"posterior {y.shape} and noise {r.shape} differ")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if y.ndim == 2:
        a = a.reshape(-1, 1) if a.ndim else a
        b = b.reshape(-1, 1) if b.ndim else b
    return normalize(a * y + b * r)


def _posteriors(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2) or y.shape[-1] < 2:
        raise ShapeError(f"expected (K,) or (n, K) posteriors with K >= 2, got {y.shape}")
    return y


def rs_defend(y, cfg):
    """Reverse Sigmoid: ``N(y - beta * r(y))`` applied to every query.

    ``beta == 0`` returns an exact copy of `y`.
    """
    y = _posteriors(y)
    if cfg.beta == 0:
        return y.copy()
    return _rs(y, cfg.beta, cfg.gamma)


def am_defend(y, y_mis, cfg):
    """Adaptive Misinformation: ``N((1 - alpha) * y + alpha * y_mis)``.

    ``alpha`` is the detector evaluated at the victim's top probability with
    the AM threshold ``cfg.am_tau``.
    """
    y = _posteriors(y)
    y_mis = np.asarray(y_mis, dtype=np.float64)
    if y.shape != y_mis.shape:
        raise ShapeError(f"victim {y.shape} and misinformation {y_mis.shape} differ")
    alpha = detector_alpha(y.max(axis=-1), cfg.am_tau, cfg.nu)
    if y.ndim == 2:
        alpha = alpha[:, None]
    return _normalize((1.0 - alpha) * y + alpha * y_mis)


def dcp_defend(y, cfg):
    """Deceptive perturbation: reverse-sigmoid noise gated by the confidence detector.

    Computes ``N(y - beta * alpha * r(y))`` with ``alpha = S(nu (y_max - tau))``
    and ``tau = cfg.dcp_tau``. Below the threshold the output collapses to `y`;
    above it the rule matches :func:`rs_defend`. ``beta == 0`` returns an
    exact copy of `y` without normalizing.
    """
    y = _posteriors(y)
    if cfg.beta == 0:
        return y.copy()
    return _dcp(y, cfg.beta, cfg.gamma, cfg.nu, cfg.dcp_tau)


def random_noise_defend(y, magnitude, rng_seed):
    """``N(y + magnitude * u)`` with ``u ~ Uniform[-1, 1]^K`` from a seeded PCG64."""
    if magnitude < 0:
        raise ParamError("magnitude must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if magnitude == 0:
        return y.copy()
    u = np.random.Generator(np.random.PCG64(rng_seed)).uniform(-1.0, 1.0, size=y.shape)
    return normalize(y + magnitude * u)


def topk_truncate_defend(y, k):
    """Keep the `k` largest entries (ties to the lower index), zero the rest, renormalize."""
    y = np.asarray(y, dtype=np.float64)
    n_classes = y.shape[-1]
    if not 1 <= k <= n_classes:
        raise ParamError(f"k must lie in [1, {n_classes}], got {k}")
    if k == n_classes:
        return y.copy()
    order = np.argsort(-y, axis=-1, kind="stable")
    mask = np.zeros_like(y, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return normalize(np.where(mask, y, 0.0))


def hard_label_defend(y):
    """One-hot vector of the argmax."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros_like(y)
    idx = argmax(y)
    if y.ndim == 1:
        out[idx] = 1.0
    else:
        out[np.arange(len(y)), idx] = 1.0
    return out


def beta_grid(step=BETA_GRID_STEP, upper=BETA_GRID_MAX):
    n = int(round(upper / step))
    return [round(i * step, 10) for i in range(n + 1)]


def calibrate_beta(defense, posteriors, l1_budget, X=None, grid=None):
    """Largest grid strength whose mean l1 perturbation stays within `l1_budget`.

    Parameters
    ----------
    defense : PosteriorDefense
        Template with a strength parameter (``strength_param`` not None).
    posteriors : array of shape (n, K)
        Clean posteriors to perturb.
    l1_budget : float in (0, 2]
    X : array of shape (n, D), optional
        Queries matching `posteriors`; needed by defenses that look at them.
    grid : sequence of float, optional
        Defaults to 0, 0.05, ..., 1.5.

    Returns
    -------
    float
        0.0 when no positive grid value qualifies.
    """
    if not 0.0 < l1_budget <= 2.0:
        raise ParamError("l1_budget must lie in (0, 2]")
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 2 or len(posteriors) == 0:
        raise ParamError("posterior sample must be a non-empty 2-D array")
    if defense.strength_param is None:
        raise ParamError(f"{type(defense).__name__} has no strength parameter")
    grid = beta_grid() if grid is None else list(grid)
    best = 0.0
    for beta in grid:
        if beta == 0:
            continue
        defended = defense.with_strength(beta).perturb(posteriors, X)
        if float(np.mean(l1_distance(posteriors, defended))) <= l1_budget and beta > best:
            best = beta
    return best


# --------------------------------------------------------------------------
# estimator layer


class PosteriorDefense(TransformerMixin, BaseEstimator):
    """Base class: stateless perturbation of posterior matrices.

    Subclasses implement :meth:`perturb`. ``transform`` perturbs posteriors
    without query context, which is enough for every defense but AM.
    """

    #: Name of the parameter swept by the beta grid, or None.
    strength_param = None
    #: Registry key used by config files.
    kind = None

    def fit(self, X=None, y=None):
        return self.validate()

    def validate(self):
        """Range-check parameters through :class:`DefenseConfig`."""
        params = self.get_params()
        DefenseConfig(**{k: params[k] for k in ("beta", "gamma", "nu", "tau") if k in params})
        if params.get("magnitude", 0) < 0:
            raise ConfigError("must be >= 0", key="magnitude")
        return self

    def perturb(self, posteriors, X=None):
        raise NotImplementedError

    def transform(self, posteriors):
        return self.perturb(posteriors)

    def with_strength(self, value):
        """Clone with the strength parameter set to `value` (no-op if none)."""
        new = clone(self)
        if self.strength_param is not None:
            new.set_params(**{self.strength_param: value}).validate()
        if hasattr(self, "misinformation_model_"):
            new.misinformation_model_ = self.misinformation_model_
        return new


class NoDefense(PosteriorDefense):
    kind = "none"

    def perturb(self, posteriors, X=None):
        return np.asarray(posteriors, dtype=np.float64)


class RandomNoise(PosteriorDefense):
    """Uniform additive noise. Each row is seeded from `random_state` and the
    row's own bytes, so identical posteriors always receive identical noise."""

    strength_param = "magnitude"
    kind = "random_noise"

    def __init__(self, magnitude=0.1, random_state=0):
        self.magnitude = magnitude
        self.random_state = random_state

    def _row_seed(self, row):
        return [int(self.random_state), zlib.crc32(np.ascontiguousarray(row).tobytes())]

    def perturb(self, posteriors, X=None):
        y = np.asarray(posteriors, dtype=np.float64)
        if y.ndim == 1:
            return random_noise_defend(y, self.magnitude, self._row_seed(y))
        return np.stack([random_noise_defend(row, self.magnitude, self._row_seed(row)) for row in y])


class TopKTruncate(PosteriorDefense):
    kind = "topk"

    def __init__(self, k=1):
        self.k = k

    def perturb(self, posteriors, X=None):
        return topk_truncate_defend(posteriors, self.k)


class HardLabel(PosteriorDefense):
    kind = "hard_label"

    def perturb(self, posteriors, X=None):
        return hard_label_defend(posteriors)


class ReverseSigmoid(PosteriorDefense):
    strength_param = "beta"
    kind = "rs"

    def __init__(self, beta=0.5, gamma=DEFAULT_GAMMA):
        self.beta = beta
        self.gamma = gamma

    def perturb(self, posteriors, X=None):
        y = _posteriors(posteriors)
        if self.beta == 0:
            return y.copy()
        return _rs(y, self.beta, self.gamma)


class DeceptivePerturbation(PosteriorDefense):
    """DCP: reverse-sigmoid noise applied only where the detector fires.

    Parameters
    ----------
    beta : float, default=0.5
        Noise magnitude. Also sets the detector threshold to ``min(beta, 1)``
        unless `tau` is given.
    gamma : float, default=0.2
        Reverse-sigmoid convergence constant.
    nu : float, default=1000
        Detector sharpness.
    tau : float or None, default=None
        Explicit detector threshold overriding the ``min(beta, 1)`` rule.
    """

    strength_param = "beta"
    kind = "dcp"

    def __init__(self, beta=0.5, gamma=DEFAULT_GAMMA, nu=DEFAULT_NU, tau=None):
        self.beta = beta
        self.gamma = gamma
        self.nu = nu
        self.tau = tau

    def perturb(self, posteriors, X=None):
        y = _posteriors(posteriors)
        if self.beta == 0:
            return y.copy()
        tau = min(self.beta, 1.0) if self.tau is None else self.tau
        return _dcp(y, self.beta, self.gamma, self.nu, tau)


class AdaptiveMisinformation(PosteriorDefense):
    """AM: blend in a misinformation model's posterior when the detector fires.

    ``fit(X, y)`` trains the misinformation model on the victim's data unless
    one is supplied. ``perturb`` needs the queries `X` to run it.
    """

    kind = "am"

    def __init__(self, misinformation_model=None, tau=DEFAULT_AM_TAU, nu=DEFAULT_NU,
                 hidden_layer_sizes=(16,), random_state=0):
        self.misinformation_model = misinformation_model
        self.tau = tau
        self.nu = nu
        self.hidden_layer_sizes = hidden_layer_sizes
        self.random_state = random_state

    def fit(self, X, y, **train_params):
        from .models import train_misinformation

        self.validate()
        if self.misinformation_model is not None:
            self.misinformation_model_ = self.misinformation_model
        else:
            self.misinformation_model_ = train_misinformation(
                X, y, hidden_layer_sizes=self.hidden_layer_sizes,
                random_state=self.random_state, **train_params)
        return self

    def perturb(self, posteriors, X=None):
        if X is None:
            raise ParamError("AdaptiveMisinformation needs the queries X")
        model = getattr(self, "misinformation_model_", None)
        if model is None:
            raise ParamError("AdaptiveMisinformation is not fitted")
        y = np.asarray(posteriors, dtype=np.float64)
        y_mis = model.predict_proba(X)
        if y.ndim == 1:
            y_mis = y_mis[0]
        if y_mis.shape != y.shape:
            raise ShapeError(f"misinformation posterior {y_mis.shape} vs victim {y.shape}")
        return am_defend(y, y_mis, DefenseConfig(tau=self.tau, nu=self.nu))


DEFENSES = {cls.kind: cls for cls in (
    NoDefense, RandomNoise, TopKTruncate, HardLabel, ReverseSigmoid,
    AdaptiveMisinformation, DeceptivePerturbation)}


def make_defense(kind, **params):
    """Instantiate a defense from its registry key (``"dcp"``, ``"rs"``, ...)."""
    try:
        cls = DEFENSES[kind]
    except KeyError:
        raise ConfigError(f"unknown defense {kind!r}; choose from {sorted(DEFENSES)}",
                          key="kind") from None
    unknown = set(params) - set(cls().get_params())
    if unknown:
        raise ConfigError(f"{kind} does not take {sorted(unknown)}", key="defense")
    return cls(**params).validate()

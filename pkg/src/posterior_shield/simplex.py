"""Probability-simplex primitives.

Every function accepts a single vector of shape ``(K,)`` or a batch of shape
``(n, K)`` and works along the last axis. All arithmetic is float64.
"""

import math

import numpy as np

from .exceptions import DegenerateError, DomainError, ShapeError

#: Inputs to :func:`reverse_sigmoid` are clamped into ``[CLAMP, 1 - CLAMP]``.
CLAMP = 1e-7
#: Post-clip mass below which :func:`normalize` refuses to divide.
MIN_MASS = 1e-12
SIMPLEX_ATOL = 1e-9


def sigmoid(z):
    """Logistic function ``1 / (1 + exp(-z))``, overflow-free.

    Scalars go through :mod:`math` (cheap on the per-query path); arrays use
    ``exp(-log(1 + exp(-z)))`` which never overflows.
    """
    if np.ndim(z) == 0:
        z = float(z)
        if z >= 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def reverse_sigmoid(y, clamp=CLAMP):
    """Logit ``log(y / (1 - y))`` of probabilities, clamped away from 0 and 1.

    Raises
    ------
    DomainError
        If any entry is NaN or outside ``[0, 1]``.
    """
    scalar = np.ndim(y) == 0
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y >= 0.0) & (y <= 1.0)):
        raise DomainError("reverse_sigmoid expects values in [0, 1]")
    y = np.clip(y, clamp, 1.0 - clamp)
    out = np.log(y) - np.log1p(-y)
    return float(out) if scalar else out


def _as_scores(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim not in (1, 2):
        raise ShapeError(f"expected a vector or a 2-D batch, got ndim={scores.ndim}")
    if scores.shape[-1] < 2:
        raise ShapeError("at least two classes are required")
    return scores


def normalize(scores):
    """Project raw scores onto the simplex: clip negatives, then rescale to sum 1.

    Raises
    ------
    DegenerateError
        If a row has (almost) no positive mass after clipping.
    """
    scores = _as_scores(scores)
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    clipped = np.maximum(scores, 0.0)
    total = clipped.sum(axis=-1, keepdims=True)
    if np.any(total < MIN_MASS):
        raise DegenerateError("perturbed scores have no positive mass")
    return clipped / total


def l1_distance(y, y_prime):
    """Sum of absolute differences along the class axis."""
    y = np.asarray(y, dtype=np.float64)
    y_prime = np.asarray(y_prime, dtype=np.float64)
    if y.shape != y_prime.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_prime.shape}")
    out = np.abs(y_prime - y).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def argmax(y, return_max=False):
    """Index of the largest entry; ties go to the lowest index.

    With ``return_max=True`` also returns the largest value (``y_max``).
    """
    y = _as_scores(y)
    idx = np.argmax(y, axis=-1)
    if y.ndim == 1:
        idx = int(idx)
        return (idx, float(y[idx])) if return_max else idx
    if return_max:
        return idx, np.take_along_axis(y, idx[:, None], axis=-1)[:, 0]
    return idx


def check_simplex(y, atol=SIMPLEX_ATOL):
    """Validate probability vectors and return them as a float64 array.

    Raises
    ------
    ShapeError
        Wrong dimensionality or fewer than two classes.
    DomainError
        Entries outside ``[0, 1]`` or rows not summing to one within `atol`.
    """
    y = _as_scores(y)
    if not np.all(np.isfinite(y)):
        raise DomainError("probabilities must be finite")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise DomainError("probabilities must lie in [0, 1]")
    if not np.allclose(y.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise DomainError("probabilities must sum to one")
    return y


def random_simplex(n, k, rng, alpha=1.0):
    """``n`` Dirichlet(`alpha`) points on the ``k``-class simplex; ``alpha=1`` is uniform.

    Smaller `alpha` concentrates mass on fewer classes (confident posteriors).
    """
    return rng.dirichlet(np.full(k, float(alpha)), size=n)

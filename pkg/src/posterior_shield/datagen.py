"""Seeded synthetic datasets and attacker query pools.

Generated datasets remember their generative parameters in ``generator`` so a
knowledgeable attacker's pool can be drawn fresh from the same distribution.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import IoError, ParamError, ParseError, SchemaError, ShapeError

TEST_FRACTION = 0.2
OOD_INFLATION = 1.5


class RaggedRowError(ParseError, SchemaError):
    """A CSV row has the wrong number of fields."""


@dataclass
class LabeledDataset:
    """Features, dense integer labels and a per-row split tag."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: np.ndarray = None
    generator: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError("features must be 2-D")
        if len(self.features) != len(self.labels):
            raise ShapeError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ShapeError("labels must lie in [0, n_classes)")
        if self.split is None:
            self.split = np.full(len(self.labels), "train")
        self.split = np.asarray(self.split, dtype="<U5")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def X(self):
        return self.features

    @property
    def y(self):
        return self.labels

    def subset(self, mask):
        return LabeledDataset(self.features[mask], self.labels[mask], self.n_classes,
                              self.split[mask], self.generator)

    @property
    def train(self):
        return self.subset(self.split == "train")

    @property
    def test(self):
        return self.subset(self.split == "test")


@dataclass
class QueryPool:
    """Unlabeled attacker queries, already shuffled."""

    features: np.ndarray
    mode: str

    def __len__(self):
        return len(self.features)

    @property
    def n_features(self):
        return self.features.shape[1]


def stratified_split(labels, rng, test_fraction=TEST_FRACTION):
    """Tag ``round(test_fraction * n_c)`` random rows of every class as test."""
    labels = np.asarray(labels)
    split = np.full(len(labels), "train", dtype="<U5")
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_test = int(round(test_fraction * len(idx)))
        split[rng.choice(idx, size=n_test, replace=False)] = "test"
    return split


def _spread_directions(k, d, rng, n_iter=500, step=0.05):
    """`k` unit vectors spread apart by projected gradient descent on the Coulomb energy."""
    x = rng.normal(size=(k, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    if d == 1:
        return x
    for _ in range(n_iter):
        diff = x[:, None, :] - x[None, :, :]
        dist = np.linalg.norm(diff, axis=-1) + np.eye(k)
        force = (diff / dist[..., None] ** 3).sum(axis=1)
        x = x + step * force / k
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def make_blobs(n_classes=5, per_class=200, n_features=2, spread=0.1, seed=0):
    """Isotropic Gaussian clusters centred on a sphere of radius ``4 * spread``.

    Centre directions repel each other on the sphere so clusters stay apart.
    Rows are split 80/20 per class.
    """
    if n_classes < 2 or per_class < 1 or spread <= 0 or n_features < 1:
        raise ParamError("need n_classes >= 2, per_class >= 1, n_features >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    centers = 4.0 * spread * _spread_directions(n_classes, n_features, rng)
    labels = np.repeat(np.arange(n_classes), per_class)
    features = centers[labels] + spread * rng.normal(size=(len(labels), n_features))
    gen = {"name": "blobs", "centers": centers, "spread": float(spread)}
    return LabeledDataset(features, labels, n_classes, stratified_split(labels, rng), gen)


def _ring_points(labels, rng, noise):
    radius = labels + 1.0 + noise * rng.normal(size=len(labels))
    angle = rng.uniform(0.0, 2 * np.pi, size=len(labels))
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])


def make_rings(n_classes=3, per_class=200, seed=0, noise=0.1):
    """Concentric annuli in 2-D: class ``c`` sits at radius ``c + 1``."""
    if n_classes < 2 or per_class < 1 or noise <= 0:
        raise ParamError("need n_classes >= 2, per_class >= 1, noise > 0")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), per_class)
    features = _ring_points(labels, rng, noise)
    gen = {"name": "rings", "noise": float(noise)}
    return LabeledDataset(features, labels, n_classes, stratified_split(labels, rng), gen)


def _draw_in_distribution(source, n, rng):
    gen = source.generator or {}
    labels = rng.integers(0, source.n_classes, size=n)
    if gen.get("name") == "blobs":
        centers = np.asarray(gen["centers"])
        return centers[labels] + gen["spread"] * rng.normal(size=(n, source.n_features))
    if gen.get("name") == "rings":
        return _ring_points(labels, rng, gen["noise"])
    # no generative record (e.g. CSV input): per-class Gaussian fit
    out = np.empty((n, source.n_features))
    for c in range(source.n_classes):
        rows = source.features[source.labels == c]
        mask = labels == c
        if not mask.any():
            continue
        if len(rows) == 0:
            rows = source.features
        mean = rows.mean(axis=0)
        cov = np.cov(rows, rowvar=False) if len(rows) > 1 else np.eye(source.n_features) * 1e-6
        out[mask] = rng.multivariate_normal(mean, np.atleast_2d(cov), size=int(mask.sum()))
    return out


def make_query_pool(source, n, mode="in_distribution", seed=0):
    """Draw `n` attacker queries.

    ``in_distribution`` samples fresh points from `source`'s generative
    parameters and drops any exact copy of a source row. ``ood`` samples
    uniformly from the bounding box of the source features, widened 1.5x
    around its centre. The pool is shuffled once with `seed`.
    """
    if n < 1:
        raise ParamError("pool size must be >= 1")
    rng = np.random.default_rng(seed)
    if mode == "in_distribution":
        seen = {row.tobytes() for row in source.features}
        feats = _draw_in_distribution(source, n, rng)
        keep = np.array([row.tobytes() not in seen for row in feats])
        while not keep.all():
            feats[~keep] = _draw_in_distribution(source, int((~keep).sum()), rng)
            keep = np.array([row.tobytes() not in seen for row in feats])
    elif mode == "ood":
        lo, hi = source.features.min(axis=0), source.features.max(axis=0)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * OOD_INFLATION
        feats = rng.uniform(mid - half, mid + half, size=(n, source.n_features))
    else:
        raise ParamError(f"unknown pool mode {mode!r}")
    if feats.shape[1] != source.n_features:
        raise ShapeError("pool dimension differs from the victim's")
    return QueryPool(feats[rng.permutation(n)], mode)


def load_csv(path, split_seed=None):
    """Read ``f0,...,f{D-1},label`` rows; labels are remapped to 0..K-1 by first appearance.

    With `split_seed` set the rows get a stratified 80/20 split, otherwise
    every row is tagged ``train``.
    """
    if not os.path.isfile(path):
        raise IoError(f"no such file: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not rows:
        raise SchemaError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
    if len(header) < 2 or header != expected:
        raise SchemaError(f"header must be f0,...,f{{D-1}},label; got {','.join(header)}")
    feats, raw_labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise RaggedRowError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
        try:
            feats.append([float(v) for v in row[:-1]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        raw_labels.append(row[-1].strip())
    if not feats:
        raise SchemaError(f"{path} has no data rows")
    remap = {}
    for lab in raw_labels:
        remap.setdefault(lab, len(remap))
    labels = np.array([remap[lab] for lab in raw_labels])
    n_classes = max(len(remap), 2)
    split = stratified_split(labels, np.random.default_rng(split_seed)) if split_seed is not None else None
    ds = LabeledDataset(np.array(feats), labels, n_classes, split)
    ds.label_names = list(remap)
    return ds


GENERATORS = {"blobs": make_blobs, "rings": make_rings}

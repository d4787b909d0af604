import numpy as np
import pytest

from posterior_shield.datagen import (LabeledDataset, RaggedRowError, load_csv, make_blobs,
                                      make_query_pool, make_rings)
from posterior_shield.exceptions import IoError, ParamError, ParseError, SchemaError, ShapeError


class TestBlobs:
    def test_counts_and_split(self):
        ds = make_blobs(n_classes=3, per_class=10, seed=1)
        assert len(ds) == 30 and len(ds.train) == 24 and len(ds.test) == 6

    def test_reproducible(self):
        a, b = make_blobs(seed=5), make_blobs(seed=5)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.split, b.split)
        assert not np.array_equal(a.X, make_blobs(seed=6).X)

    def test_centers_on_sphere(self):
        ds = make_blobs(n_classes=6, n_features=3, spread=0.2, seed=0)
        radii = np.linalg.norm(ds.generator["centers"], axis=1)
        np.testing.assert_allclose(radii, 0.8)

    def test_stratified(self):
        ds = make_blobs(n_classes=4, per_class=53, seed=2)
        for c in range(4):
            frac = np.mean(ds.split[ds.y == c] == "train")
            assert abs(frac - 0.8) <= 0.01

    @pytest.mark.parametrize("kwargs", [dict(n_classes=1), dict(per_class=0), dict(spread=0.0)])
    def test_param_errors(self, kwargs):
        with pytest.raises(ParamError):
            make_blobs(**kwargs)


class TestRings:
    def test_counts(self):
        assert len(make_rings(n_classes=2, per_class=4, seed=0)) == 8

    def test_radii(self):
        ds = make_rings(n_classes=4, per_class=500, seed=3)
        r = np.linalg.norm(ds.X, axis=1)
        assert np.mean(np.abs(r - (ds.y + 1)) <= 0.4) >= 0.99

    def test_reproducible(self):
        assert np.array_equal(make_rings(seed=4).X, make_rings(seed=4).X)


class TestQueryPool:
    def test_size_and_dim(self):
        src = make_blobs(seed=0)
        pool = make_query_pool(src, 100, seed=1)
        assert len(pool) == 100 and pool.n_features == src.n_features

    def test_disjoint_from_source(self):
        src = make_blobs(seed=0)
        pool = make_query_pool(src, 2000, seed=0)
        seen = {row.tobytes() for row in src.X}
        assert not any(row.tobytes() in seen for row in pool.features)

    def test_ood_box_fraction(self):
        src = make_blobs(n_features=2, seed=0)
        pool = make_query_pool(src, 20000, mode="ood", seed=3)
        lo, hi = src.X.min(axis=0), src.X.max(axis=0)
        inside = np.all((pool.features >= lo) & (pool.features <= hi), axis=1).mean()
        assert 0.35 <= inside <= 0.55
        assert inside == pytest.approx((1 / 1.5) ** 2, abs=0.02)

    def test_in_distribution_from_csv_like_source(self):
        src = make_blobs(seed=0)
        bare = LabeledDataset(src.X, src.y, src.n_classes)
        pool = make_query_pool(bare, 50, seed=2)
        assert pool.features.shape == (50, 2)

    def test_rings_pool(self):
        pool = make_query_pool(make_rings(seed=0), 30, seed=1)
        assert pool.features.shape == (30, 2)

    def test_errors(self):
        src = make_blobs(seed=0)
        with pytest.raises(ParamError):
            make_query_pool(src, 0)
        with pytest.raises(ParamError):
            make_query_pool(src, 5, mode="adaptive")

    def test_seeded(self):
        src = make_blobs(seed=0)
        assert np.array_equal(make_query_pool(src, 40, seed=9).features,
                              make_query_pool(src, 40, seed=9).features)


class TestCsv:
    def test_load_and_remap(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,f1,label\n0.1,0.2,7\n0.3,0.4,2\n0.5,0.6,7\n")
        ds = load_csv(p)
        assert len(ds) == 3 and ds.label_names == ["7", "2"]
        np.testing.assert_array_equal(ds.y, [0, 1, 0])
        np.testing.assert_allclose(ds.X[1], [0.3, 0.4])

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,f1,label\n0.1,0.2,1\n0.3,0\n")
        with pytest.raises(ParseError, match="line 3") as info:
            load_csv(p)
        assert isinstance(info.value, SchemaError) and isinstance(info.value, RaggedRowError)
        assert info.value.line == 3

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f0,label\n0.1,a\nxyz,b\n")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(p)

    def test_empty_and_header(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(SchemaError):
            load_csv(p)
        p.write_text("a,b,label\n1,2,0\n")
        with pytest.raises(SchemaError):
            load_csv(p)
        p.write_text("f0,label\n")
        with pytest.raises(SchemaError):
            load_csv(p)

    def test_missing(self, tmp_path):
        with pytest.raises(IoError):
            load_csv(tmp_path / "nope.csv")
        with pytest.raises(OSError):
            load_csv(tmp_path / "nope.csv")

    def test_split_seed(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = "\n".join(f"{i},{i % 2}" for i in range(20))
        p.write_text("f0,label\n" + rows + "\n")
        assert np.all(load_csv(p).split == "train")
        assert np.sum(load_csv(p, split_seed=0).split == "test") == 4


def test_dataset_validation():
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)

import numpy as np
import pytest

from outputation import (
    ClusteredDataset,
    EmptyDataError,
    ParseError,
    SchemaError,
    SizeViolationError,
    load_long_csv,
    screen_predictors,
    validate_min_cluster_size,
    write_long_csv,
)


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadLongCsv:
    def test_basic_grouping_with_intercept(self, tmp_path):
        f = write_csv(tmp_path / "d.csv",
                      "id,y,x\na,1.0,0.5\na,2.0,0.25\nb,3.0,-1\nb,4.0,2\n")
        data = load_long_csv(f, "y", "id", ["x"], add_intercept=True)
        assert data.n == 2
        assert data.sizes.tolist() == [2, 2]
        assert data.p == 2
        assert data.columns == ("intercept", "x")
        assert data.intercept
        np.testing.assert_array_equal(data.X[:, 0], 1.0)
        np.testing.assert_array_equal(data.y, [1, 2, 3, 4])

    def test_non_contiguous_clusters_group_like_contiguous(self, tmp_path):
        interleaved = write_csv(tmp_path / "a.csv",
                                "id,y,x\na,1,0.5\nb,3,1.5\na,2,0.7\nb,4,2.5\n")
        contiguous = write_csv(tmp_path / "b.csv",
                               "id,y,x\na,1,0.5\na,2,0.7\nb,3,1.5\nb,4,2.5\n")
        d1 = load_long_csv(interleaved, "y", "id", ["x"])
        d2 = load_long_csv(contiguous, "y", "id", ["x"])
        assert d1.ids == d2.ids
        np.testing.assert_array_equal(d1.y, d2.y)
        np.testing.assert_array_equal(d1.X, d2.X)
        np.testing.assert_array_equal(d1.sizes, d2.sizes)

    def test_na_cell_reports_row(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "id,y,x\na,1,0.5\na,NA,0.7\n")
        with pytest.raises(ParseError) as err:
            load_long_csv(f, "y", "id", ["x"])
        assert err.value.row == 2
        assert "row 2" in str(err.value)

    def test_infinite_cell_rejected(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "id,y,x\na,1,inf\n")
        with pytest.raises(ParseError):
            load_long_csv(f, "y", "id", ["x"])

    def test_missing_column(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "id,y\na,1\n")
        with pytest.raises(SchemaError):
            load_long_csv(f, "y", "id", ["x"])

    def test_empty_file(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "")
        with pytest.raises(EmptyDataError):
            load_long_csv(f, "y", "id", ["x"])

    def test_header_only(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", "id,y,x\n")
        with pytest.raises(EmptyDataError):
            load_long_csv(f, "y", "id", ["x"])

    def test_round_trip_full_precision(self, tmp_path):
        rng = np.random.default_rng(3)
        sizes = rng.integers(1, 5, size=7)
        labels = np.repeat(np.arange(7), sizes)
        rows = labels.size
        data = ClusteredDataset.from_arrays(
            rng.normal(size=rows) * 1e-7, rng.normal(size=(rows, 3)) * 1e5,
            labels, columns=("a", "b", "c"))
        f = tmp_path / "rt.csv"
        write_long_csv(data, f)
        back = load_long_csv(f, "outcome", "cluster", ["a", "b", "c"])
        assert back.ids == data.ids
        np.testing.assert_array_equal(back.y, data.y)
        np.testing.assert_array_equal(back.X, data.X)
        np.testing.assert_array_equal(back.sizes, data.sizes)


class TestDatasetInvariants:
    def test_rejects_nan_outcome(self):
        with pytest.raises(ValueError):
            ClusteredDataset(y=np.array([1.0, np.nan]), X=np.ones((2, 1)),
                             sizes=np.array([2]), ids=("a",), columns=("c",))

    def test_rejects_inconsistent_sizes(self):
        with pytest.raises(ValueError):
            ClusteredDataset(y=np.ones(3), X=np.ones((3, 1)),
                             sizes=np.array([2, 2]), ids=("a", "b"),
                             columns=("c",))

    def test_rejects_empty(self):
        with pytest.raises(EmptyDataError):
            ClusteredDataset(y=np.ones(0), X=np.ones((0, 1)),
                             sizes=np.zeros(0, dtype=int), ids=(), columns=("c",))

    def test_arrays_read_only(self):
        data = ClusteredDataset.from_arrays([1.0, 2.0], [[1.0], [2.0]], ["a", "a"])
        with pytest.raises(ValueError):
            data.y[0] = 9.0

    def test_observations_iterate_in_order(self):
        data = ClusteredDataset.from_arrays(
            [1.0, 2.0, 3.0], [[1.0], [2.0], [3.0]], ["a", "b", "a"])
        obs = list(data.observations())
        assert [o.cluster_id for o in obs] == ["a", "a", "b"]
        assert [o.outcome for o in obs] == [1.0, 3.0, 2.0]


class TestValidateMinClusterSize:
    def make(self, sizes):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        rng = np.random.default_rng(0)
        return ClusteredDataset.from_arrays(
            rng.normal(size=labels.size), rng.normal(size=(labels.size, 1)), labels)

    def test_reject_passes_at_boundary(self):
        data = self.make([3, 3, 2])
        assert validate_min_cluster_size(data, 2, "reject") is data

    def test_drop_filters(self):
        data = self.make([3, 3, 2])
        out = validate_min_cluster_size(data, 3, "drop")
        assert out.n == 2
        assert out.sizes.tolist() == [3, 3]

    def test_reject_lists_offenders(self):
        data = self.make([2, 2])
        with pytest.raises(SizeViolationError) as err:
            validate_min_cluster_size(data, 3, "reject")
        assert set(err.value.clusters) == {"0", "1"}

    def test_drop_to_nothing_is_empty_error(self):
        data = self.make([2, 2])
        with pytest.raises(EmptyDataError):
            validate_min_cluster_size(data, 3, "drop")

    def test_drop_idempotent(self):
        data = self.make([4, 1, 3, 2])
        once = validate_min_cluster_size(data, 3, "drop")
        twice = validate_min_cluster_size(once, 3, "drop")
        assert twice is once


def dataset_with_correlation(R, rows=400, seed=0, names=None):
    """Columns whose sample correlation matrix is exactly R."""
    rng = np.random.default_rng(seed)
    q = R.shape[0]
    Z = rng.normal(size=(rows, q))
    Z -= Z.mean(axis=0)
    # whiten empirically, then color by chol(R)
    cov = (Z.T @ Z) / rows
    Z = Z @ np.linalg.inv(np.linalg.cholesky(cov)).T
    X = Z @ np.linalg.cholesky(R).T
    names = names or tuple(f"x{j}" for j in range(q))
    labels = np.repeat(np.arange(rows // 4), 4)
    return ClusteredDataset.from_arrays(rng.normal(size=rows), X, labels,
                                        columns=names)


class TestScreenPredictors:
    def test_duplicated_column_drops_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=40)
        data = ClusteredDataset.from_arrays(
            rng.normal(size=40), np.column_stack([x, x]),
            np.repeat(np.arange(10), 4), columns=("a", "b"))
        report = screen_predictors(data, 0.5)
        assert len(report.dropped) == 1
        assert len(report.retained) == 1

    def test_orthogonal_retained(self):
        R = np.eye(3)
        data = dataset_with_correlation(R)
        report = screen_predictors(data, 0.5)
        assert report.dropped == ()
        assert len(report.retained) == 3

    def test_three_predictor_pattern_matches_bruteforce(self):
        # |r| pattern: (x0,x1)=.9, (x0,x2)=.6, (x1,x2)=.2
        R = np.array([[1.0, 0.9, 0.6], [0.9, 1.0, 0.2], [0.6, 0.2, 1.0]])
        data = dataset_with_correlation(R, names=("x0", "x1", "x2"))
        report = screen_predictors(data, 0.5)

        # independent re-implementation of the removal rule
        cols = {name: data.X[:, j] for j, name in enumerate(data.columns)}
        active = list(data.columns)
        dropped = []
        while len(active) >= 2:
            mat = np.corrcoef(np.column_stack([cols[c] for c in active]),
                              rowvar=False)
            absr = np.abs(mat)
            np.fill_diagonal(absr, 0.0)
            if absr.max() <= 0.5:
                break
            means = absr.sum(axis=1) / (len(active) - 1)
            candidates = [i for i in range(len(active))
                          if means[i] == means.max()]
            victim = candidates[-1]
            dropped.append(active[victim])
            del active[victim]

        assert list(report.retained) == active == ["x1", "x2"]
        assert [name for name, _ in report.dropped] == dropped == ["x0"]
        assert report.dropped[0][1] == pytest.approx(0.9, abs=1e-12)

    def test_zero_variance_dropped_first_with_warning(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.full(40, 3.0), rng.normal(size=40)])
        data = ClusteredDataset.from_arrays(
            rng.normal(size=40), X, np.repeat(np.arange(10), 4),
            columns=("const", "x"))
        report = screen_predictors(data, 0.5)
        assert report.dropped[0][0] == "const"
        assert np.isnan(report.dropped[0][1])
        assert report.warnings and "const" in report.warnings[0]
        assert report.retained == ("x",)

    def test_intercept_never_dropped(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=60)
        X = np.column_stack([np.ones(60), x, x + 1e-9 * rng.normal(size=60)])
        data = ClusteredDataset.from_arrays(
            rng.normal(size=60), X, np.repeat(np.arange(15), 4),
            columns=("intercept", "a", "b"), intercept=True)
        report = screen_predictors(data, 0.5)
        assert "intercept" not in [name for name, _ in report.dropped]
        assert len(report.retained) == 1

    @pytest.mark.parametrize("seed", range(6))
    def test_threshold_property_on_random_data(self, seed):
        rng = np.random.default_rng(seed)
        q = int(rng.integers(2, 7))
        base = rng.normal(size=(200, q))
        mix = rng.normal(size=(q, q))
        X = base @ mix
        data = ClusteredDataset.from_arrays(
            rng.normal(size=200), X, np.repeat(np.arange(50), 4))
        threshold = float(rng.uniform(0.3, 0.9))
        report = screen_predictors(data, threshold)
        kept = [list(data.columns).index(c) for c in report.retained]
        if len(kept) >= 2:
            sub = np.corrcoef(data.X[:, kept], rowvar=False)
            np.fill_diagonal(sub, 0.0)
            assert np.abs(sub).max() <= threshold + 1e-12

    def test_bad_threshold(self):
        data = dataset_with_correlation(np.eye(2))
        with pytest.raises(ValueError):
            screen_predictors(data, 0.0)

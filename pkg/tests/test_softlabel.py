import math

import numpy as np
import pytest

import dfquant.softlabel as sl
from dfquant.softlabel import (
    identity_label_matrix,
    init_labels,
    load_labels,
    optimize_labels,
    project_rows,
    project_simplex,
    sample_rows,
    save_labels,
    spread_gradient,
    spread_objective,
)


def min_pairwise(t):
    d = np.sqrt(((t[:, None, :] - t[None, :, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    return d.min()


class TestObjective:
    def test_single_row_zero(self):
        assert spread_objective(np.array([[0.2, 0.8]])) == 0.0

    def test_two_vertices(self):
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert spread_objective(t) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        t = project_rows(rng.random((5, 4)))
        perm = t[rng.permutation(5)]
        assert spread_objective(t) == pytest.approx(spread_objective(perm), rel=1e-12)

    def test_coincident_rows_error(self):
        t = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(ValueError, match="coincident"):
            spread_objective(t)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        t = project_rows(rng.random((4, 3)))
        g = spread_gradient(t)
        eps = 1e-7
        for i in range(4):
            for j in range(3):
                tp = t.copy()
                tp[i, j] += eps
                tm = t.copy()
                tm[i, j] -= eps
                fd = (spread_objective(tp) - spread_objective(tm)) / (2 * eps)
                assert fd == pytest.approx(g[i, j], rel=1e-5, abs=1e-8)


class TestProjection:
    def test_fixed_point(self):
        v = np.array([0.2, 0.3, 0.5])
        assert np.allclose(project_simplex(v), v, atol=1e-12)

    def test_two_zero_case(self):
        assert np.allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])

    def test_symmetric_case(self):
        assert np.allclose(project_simplex(np.array([0.6, 0.6])), [0.5, 0.5])

    def test_random_vectors_land_on_simplex(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            v = rng.normal(scale=3.0, size=rng.integers(2, 12))
            w = project_simplex(v)
            assert w.min() >= 0
            assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=6)
        w = project_simplex(v)
        assert np.allclose(project_simplex(w), w, atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            project_simplex(np.array([1.0, np.nan]))


class TestOptimize:
    def test_two_by_two_reaches_sqrt2(self):
        t = optimize_labels(2, 2, steps=500, rng=0)
        assert spread_objective(t) == pytest.approx(math.sqrt(2), abs=1e-2)

    def test_monotone_vs_init(self):
        rng_a = np.random.default_rng(7)
        init = init_labels(6, 4, rng_a)
        t = optimize_labels(6, 4, steps=300, rng=7)
        assert spread_objective(t) <= spread_objective(init) + 1e-9

    def test_invariants_at_scale(self):
        t = optimize_labels(200, 100, steps=150, rng=0)
        assert t.shape == (200, 100)
        assert np.all(t >= 0)
        assert np.allclose(t.sum(axis=1), 1.0, atol=1e-6)
        assert min_pairwise(t) > 0

    @pytest.mark.parametrize("n", [5, 10, 20])
    @pytest.mark.parametrize("c", [10, 100])
    def test_min_distance_improves(self, n, c):
        seed = 11
        init = init_labels(n, c, np.random.default_rng(seed))
        t = optimize_labels(n, c, steps=400, rng=seed)
        assert min_pairwise(t) > min_pairwise(init)

    def test_deterministic(self):
        a = optimize_labels(5, 3, steps=100, rng=4)
        b = optimize_labels(5, 3, steps=100, rng=4)
        assert np.array_equal(a, b)

    def test_size_validation(self):
        with pytest.raises(ValueError):
            optimize_labels(1, 5)
        with pytest.raises(ValueError):
            optimize_labels(5, 1)

    def test_nonfinite_steps_abort(self, monkeypatch):
        monkeypatch.setattr(sl, "spread_gradient",
                            lambda t: np.full_like(t, np.nan))
        with pytest.raises(RuntimeError, match="diverged"):
            optimize_labels(3, 3, steps=50, rng=0)


class TestServing:
    def test_identity_matrix(self):
        assert np.array_equal(identity_label_matrix(4), np.eye(4))

    def test_sample_rows(self):
        t = np.eye(3)
        rows, idx = sample_rows(t, 10, np.random.default_rng(0))
        assert rows.shape == (10, 3)
        assert ((idx >= 0) & (idx < 3)).all()
        assert np.array_equal(rows, t[idx])
        rows2, idx2 = sample_rows(t, 10, np.random.default_rng(0))
        assert np.array_equal(idx, idx2)

    def test_csv_roundtrip(self, tmp_path):
        t = optimize_labels(4, 3, steps=50, rng=9)
        save_labels(t, tmp_path / "labels.csv")
        back = load_labels(tmp_path / "labels.csv")
        assert np.array_equal(back, t)

import numpy as np
import pytest

from rosettavae import metrics

from oracles import gd_affine_minimizer


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def eq2_objective(a, b, source, target):
    return float(((source @ a.T + b - target) ** 2).sum(axis=1).mean())


def well_conditioned_affine(rng, d):
    """Invertible affine transform with condition number at most 4."""
    q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = rng.uniform(0.5, 2.0, d)
    return q1 @ np.diag(scales) @ q2, rng.uniform(-1, 1, d)


class TestFitAffine:
    def test_identity_when_target_equals_source(self):
        rng = np.random.default_rng(1)
        src = rng.standard_normal((20, 2))
        fit = metrics.fit_affine(src, src)
        assert np.abs(fit.matrix - np.eye(2)).max() < 1e-9
        assert np.abs(fit.offset).max() < 1e-9
        assert fit.fit_residual == pytest.approx(0.0, abs=1e-18)

    def test_exact_affine_relation_recovered(self):
        rng = np.random.default_rng(2)
        src = rng.standard_normal((30, 3))
        tgt = 2.0 * src + 1.0
        fit = metrics.fit_affine(src, tgt)
        assert np.abs(fit.matrix - 2.0 * np.eye(3)).max() < 1e-9
        assert np.abs(fit.offset - 1.0).max() < 1e-9
        assert fit.fit_residual == pytest.approx(0.0, abs=1e-16)

    def test_noisy_rotation_recovery(self):
        rng = np.random.default_rng(9)
        src = rng.standard_normal((50, 2))
        r = rotation(np.deg2rad(30))
        tgt = src @ r.T + 0.01 * rng.standard_normal((50, 2))
        fit = metrics.fit_affine(src, tgt)
        assert np.abs(fit.matrix - r).max() < 0.05
        assert fit.fit_residual <= 2 * 2 * 0.01**2

    def test_underdetermined_rejected(self):
        with pytest.raises(ValueError):
            metrics.fit_affine(np.ones((2, 2)), np.ones((2, 2)))

    def test_optimality_against_random_perturbations(self):
        rng = np.random.default_rng(4)
        src = rng.standard_normal((25, 2))
        tgt = rng.standard_normal((25, 2))
        fit = metrics.fit_affine(src, tgt)
        base = eq2_objective(fit.matrix, fit.offset, src, tgt)
        for _ in range(100):
            da = 1e-3 * rng.standard_normal((2, 2))
            db = 1e-3 * rng.standard_normal(2)
            perturbed = eq2_objective(fit.matrix + da, fit.offset + db, src, tgt)
            assert perturbed >= base - 1e-15


class TestLsd:
    def test_identical_spaces_give_zero(self):
        rng = np.random.default_rng(5)
        src = rng.standard_normal((20, 2))
        fit = metrics.fit_affine(src, src)
        assert metrics.lsd(fit, src, src) == pytest.approx(0.0, abs=1e-18)

    def test_equals_fit_residual_on_fit_set(self):
        rng = np.random.default_rng(6)
        src = rng.standard_normal((20, 2))
        tgt = rng.standard_normal((20, 2))
        fit = metrics.fit_affine(src, tgt)
        assert metrics.lsd(fit, src, tgt) == fit.fit_residual

    def test_one_dimensional_grid_search_oracle(self):
        src = np.array([[0.0], [1.0], [2.0]])
        tgt = np.array([[0.0], [2.0], [4.3]])
        fit = metrics.fit_affine(src, tgt)
        closed = metrics.lsd(fit, src, tgt)
        a_grid = np.arange(1.5, 2.8, 0.001)
        b_grid = np.arange(-0.6, 0.6, 0.001)
        best = np.inf
        for a in a_grid:
            pred = a * src[:, 0]
            for b in b_grid:
                err = pred + b - tgt[:, 0]
                best = min(best, float((err * err).mean()))
        assert closed == pytest.approx(best, abs=1e-4)

    def test_matches_gradient_descent_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            src = rng.standard_normal((20, 2))
            tgt = rng.standard_normal((20, 2))
            fit = metrics.fit_affine(src, tgt)
            _, _, gd_value = gd_affine_minimizer(src, tgt)
            assert abs(fit.fit_residual - gd_value) < 1e-3

    def test_affine_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            src = rng.standard_normal((30, 2))
            tgt = rng.standard_normal((30, 2))
            base = metrics.lsd(metrics.fit_affine(src, tgt), src, tgt)
            t_mat, t_off = well_conditioned_affine(rng, 2)
            moved = src @ t_mat.T + t_off
            value = metrics.lsd(metrics.fit_affine(moved, tgt), moved, tgt)
            assert abs(value - base) < 1e-9

    def test_dimension_mismatch(self):
        fit = metrics.AffineMap(matrix=np.eye(2), offset=np.zeros(2), fit_residual=0.0)
        with pytest.raises(ValueError):
            metrics.lsd(fit, np.ones((5, 3)), np.ones((5, 3)))


class TestRetrainingVariability:
    def test_identical_runs_hit_the_floor(self):
        rng = np.random.default_rng(10)
        means = rng.standard_normal((50, 2))
        runs = [means.copy() for _ in range(5)]
        value = metrics.retraining_variability(runs, eigen_floor=1e-12)
        assert value == pytest.approx(2 * np.log(1e-12), rel=1e-9)

    def test_one_dimensional_hand_case(self):
        runs = [np.array([[0.0]]), np.array([[1.0]]), np.array([[2.0]])]
        value = metrics.retraining_variability(runs, eigen_floor=1e-12)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_too_few_runs_for_dimension_warns(self):
        rng = np.random.default_rng(11)
        runs = [rng.standard_normal((5, 3)) for _ in range(2)]
        with pytest.warns(RuntimeWarning):
            metrics.retraining_variability(runs, eigen_floor=1e-12)

    def test_wishart_monte_carlo_oracle(self):
        rng = np.random.default_rng(17)
        sigma = 0.3
        base = rng.standard_normal((100, 2))
        runs = [base + sigma * rng.standard_normal(base.shape) for _ in range(10)]
        value = metrics.retraining_variability(runs, eigen_floor=1e-12)
        # per point, cov is sigma^2 * (Wishart_9(I_2)/9); estimate the
        # expected log det correction by simulation
        sims = rng.standard_normal((20000, 10, 2))
        correction = 0.0
        for s in sims[:2000]:
            correction += np.linalg.slogdet(np.cov(s.T))[1]
        correction /= 2000
        expected = 2 * np.log(sigma**2) + correction
        assert abs(value - expected) < 0.5

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(12)
        runs = [rng.standard_normal((20, 2)) for _ in range(6)]
        a = metrics.retraining_variability(runs)
        b = metrics.retraining_variability(runs[::-1])
        assert a == b

    def test_noise_monotonicity_statistical(self):
        rng = np.random.default_rng(13)
        base = rng.standard_normal((30, 2))
        clean = [base + 0.05 * rng.standard_normal(base.shape) for _ in range(6)]
        averages = []
        for sigma in (0.1, 0.2, 0.4, 0.8):
            vals = []
            for _ in range(20):
                runs = list(clean)
                runs[0] = runs[0] + sigma * rng.standard_normal(base.shape)
                vals.append(metrics.retraining_variability(runs))
            averages.append(np.mean(vals))
        assert all(b >= a for a, b in zip(averages, averages[1:]))

    def test_requires_two_runs(self):
        with pytest.raises(ValueError):
            metrics.retraining_variability([np.ones((3, 2))])

    def test_requires_identical_ordering(self):
        from rosettavae.distill import EmbeddingTable

        a = EmbeddingTable(indices=np.array([0, 1]), means=np.ones((2, 2)))
        b = EmbeddingTable(indices=np.array([1, 0]), means=np.ones((2, 2)))
        with pytest.raises(ValueError):
            metrics.retraining_variability([a, b])


class TestNormalizeByBaseline:
    def test_baseline_median_becomes_zero(self):
        values = [3.0, 1.0, 7.0, 2.0]
        out = metrics.normalize_by_baseline(values, values)
        assert np.median(out) == pytest.approx(0.0, abs=1e-15)

    def test_hand_case(self):
        assert metrics.normalize_by_baseline([5.0, 7.0], [1.0, 3.0, 5.0]) == [2.0, 4.0]

    def test_empty_baseline_rejected(self):
        with pytest.raises(ValueError):
            metrics.normalize_by_baseline([1.0], [])

    def test_median_iqr_formats_table_cells(self):
        med, iqr = metrics.median_iqr([1.0, 2.0, 3.0, 4.0, 100.0])
        assert med == 3.0
        assert iqr == pytest.approx(2.0)
        assert f"{med:.2f}({iqr:.3f})" == "3.00(2.000)"


class TestAnalyzeMap:
    def test_pure_rescaling(self):
        fit = metrics.AffineMap(matrix=3.0 * np.eye(2), offset=np.zeros(2), fit_residual=0.0)
        analysis = metrics.analyze_map(fit)
        assert np.allclose(analysis.spectrum, [3.0, 3.0], atol=1e-9)
        assert analysis.identity_distance == pytest.approx(0.0, abs=1e-9)
        assert analysis.bias_norm == 0.0

    def test_rotation_ninety_degrees(self):
        fit = metrics.AffineMap(
            matrix=rotation(np.pi / 2), offset=np.zeros(2), fit_residual=0.0
        )
        analysis = metrics.analyze_map(fit)
        assert np.allclose(analysis.spectrum, [1.0, 1.0], atol=1e-9)
        assert analysis.identity_distance == pytest.approx(2.0, abs=1e-9)

    def test_diagonal_stretch(self):
        fit = metrics.AffineMap(
            matrix=np.diag([2.0, 1.0]), offset=np.array([3.0, 4.0]), fit_residual=0.0
        )
        analysis = metrics.analyze_map(fit)
        assert np.allclose(analysis.spectrum, [2.0, 1.0], atol=1e-9)
        assert analysis.identity_distance == pytest.approx(0.5, abs=1e-9)
        assert analysis.bias_norm == pytest.approx(5.0, abs=1e-12)

    def test_zero_map_rejected(self):
        fit = metrics.AffineMap(matrix=np.zeros((2, 2)), offset=np.zeros(2), fit_residual=0.0)
        with pytest.raises(ValueError):
            metrics.analyze_map(fit)

    def test_orthogonal_maps_have_flat_spectrum(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            fit = metrics.AffineMap(matrix=q, offset=np.zeros(3), fit_residual=0.0)
            analysis = metrics.analyze_map(fit)
            assert np.allclose(analysis.spectrum, np.ones(3), atol=1e-9)

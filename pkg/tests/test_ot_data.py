import numpy as np
import pytest

from iot.metrics import fit_two_component_gmm, grid_kl, mixture_grid
from iot.ot_data import (
    Dataset,
    gaussian_points,
    make_recoverable_dataset,
    make_swiss_dataset,
    minibatch_ot_pairs,
    read_dataset,
    rotation_cost,
    sinkhorn,
    swiss_roll,
    write_dataset,
)


class TestSwissRoll:
    def test_zero_noise_points_lie_on_spiral(self):
        rng = np.random.default_rng(0)
        pts = swiss_roll(100, 0.0, rng, scale=0.15)
        radii = np.linalg.norm(pts, axis=1)
        # radius equals scale * t exactly for the generating angle t
        t = radii / 0.15
        rebuilt = 0.15 * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
        assert np.allclose(rebuilt, pts, atol=1e-9)

    def test_support_radius(self):
        pts = swiss_roll(10_000, 0.05, np.random.default_rng(1))
        assert np.max(np.linalg.norm(pts, axis=1)) <= 2.5 * 1.1

    def test_reproducible(self):
        a = swiss_roll(64, 0.1, np.random.default_rng(2))
        b = swiss_roll(64, 0.1, np.random.default_rng(2))
        assert np.array_equal(a, b)


class TestSinkhorn:
    def test_zero_cost_uniform(self):
        c = sinkhorn(np.zeros((2, 2)), np.full(2, 0.5), np.full(2, 0.5), reg=0.1)
        assert np.allclose(c.matrix, 0.25, atol=1e-12)

    def test_strong_diagonal_preference(self):
        cost = np.array([[0.0, 10.0], [10.0, 0.0]])
        c = sinkhorn(cost, np.full(2, 0.5), np.full(2, 0.5), reg=0.1, tol=1e-9)
        assert c.converged
        assert c.matrix[0, 0] >= 0.499 and c.matrix[1, 1] >= 0.499

    def test_marginal_violation_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            cost = rng.uniform(size=(16, 16))
            a = rng.uniform(0.5, 1.5, size=16)
            a /= a.sum()
            b = rng.uniform(0.5, 1.5, size=16)
            b /= b.sum()
            c = sinkhorn(cost, a, b, reg=0.05)
            assert c.converged
            assert c.max_violation <= 1e-6
            assert np.all(c.matrix >= 0.0)

    def test_nonconvergence_flagged(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        a, b = np.array([0.3, 0.7]), np.array([0.6, 0.4])
        c = sinkhorn(cost, a, b, reg=0.01, max_iters=1, tol=1e-9)
        assert not c.converged
        assert c.max_violation > 1e-9


class TestRotationCost:
    def test_hand_rotation_example(self):
        # -y = (0,-1); +90 deg rotation lands on x exactly, -90 deg is 2 away
        c = rotation_cost(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 90.0)
        assert c[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_constructed_zero(self):
        rng = np.random.default_rng(4)
        y = rng.normal(size=(5, 2))
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])  # +90 degrees
        x = (-y) @ rot.T
        c = rotation_cost(x, y, 90.0)
        assert np.allclose(np.diag(c), 0.0, atol=1e-12)

    def test_sign_symmetry(self):
        rng = np.random.default_rng(5)
        xs, ys = rng.normal(size=(6, 2)), rng.normal(size=(7, 2))
        assert np.allclose(rotation_cost(xs, ys, 90.0), rotation_cost(xs, ys, -90.0))

    def test_simultaneous_rotation_invariance(self):
        rng = np.random.default_rng(6)
        xs, ys = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        theta = np.deg2rad(37.0)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        base = rotation_cost(xs, ys, 90.0)
        turned = rotation_cost(xs @ rot.T, ys @ rot.T, 90.0)
        assert np.allclose(base, turned, atol=1e-10)

    def test_non_2d_rejected(self):
        with pytest.raises(ValueError):
            rotation_cost(np.zeros((2, 3)), np.zeros((2, 3)))


class TestMinibatchPairs:
    def test_zero_cost_uniform_picks(self):
        rng = np.random.default_rng(7)
        xs, ys, ok = minibatch_ot_pairs(
            lambda g, n: g.normal(size=(n, 2)),
            lambda g, n: g.normal(size=(n, 2)),
            lambda a, b: np.ones((len(a), len(b))),
            n_pairs=10,
            rng=rng,
            batch=8,
        )
        assert ok and xs.shape == (10, 2) and ys.shape == (10, 2)

    def test_requested_count(self):
        rng = np.random.default_rng(8)
        xs, ys, _ = minibatch_ot_pairs(
            lambda g, n: g.normal(size=(n, 2)),
            lambda g, n: swiss_roll(n, 0.1, g),
            rotation_cost,
            n_pairs=7,
            rng=rng,
        )
        assert len(xs) == 7 and len(ys) == 7

    def test_bimodal_conditionals_near_fixed_x(self):
        # pairs whose x lies in a narrow bin should show two angular modes
        # roughly +-90 degrees from the roll location
        rng = np.random.default_rng(9)
        xs, ys, _ = minibatch_ot_pairs(
            lambda g, n: gaussian_points(n, 2, g),
            lambda g, n: swiss_roll(n, 0.1, g),
            rotation_cost,
            n_pairs=1500,
            rng=rng,
        )
        anchor = np.array([1.0, 0.0])
        nearby = np.linalg.norm(xs - anchor, axis=1) < 0.45
        assert nearby.sum() > 60
        group = ys[nearby]
        weights, means, _ = fit_two_component_gmm(group, np.random.default_rng(0))
        ang = np.degrees(np.arctan2(means[:, 1], means[:, 0]))
        sep = abs((ang[0] - ang[1] + 180.0) % 360.0 - 180.0)
        assert min(weights) > 0.15
        assert sep > 60.0


class TestDatasets:
    def test_prefix_convention(self):
        ds = make_swiss_dataset(8, 16, 20, seed=0)
        assert ds.unpaired_x.shape == (16, 2)
        assert ds.unpaired_y.shape == (20, 2)
        assert np.array_equal(ds.unpaired_x[:8], ds.paired_x)
        assert np.array_equal(ds.unpaired_y[:8], ds.paired_y)

    def test_equal_sizes_degenerate(self):
        ds = make_swiss_dataset(6, 6, 6, seed=1)
        assert np.array_equal(ds.unpaired_x, ds.paired_x)
        assert np.array_equal(ds.unpaired_y, ds.paired_y)

    def test_reproducible(self):
        a = make_swiss_dataset(5, 8, 8, seed=2)
        b = make_swiss_dataset(5, 8, 8, seed=2)
        assert np.array_equal(a.paired_x, b.paired_x)
        assert np.array_equal(a.unpaired_y, b.unpaired_y)

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            make_swiss_dataset(10, 5, 10, seed=0)
        with pytest.raises(ValueError):
            Dataset(
                np.ones((2, 1)), np.ones((2, 1)), np.zeros((3, 1)), np.ones((3, 1))
            ).validate()

    def test_csv_round_trip(self, tmp_path):
        ds = make_swiss_dataset(4, 6, 7, seed=3)
        write_dataset(ds, tmp_path)
        back = read_dataset(tmp_path)
        assert np.array_equal(back.paired_x, ds.paired_x)
        assert np.array_equal(back.paired_y, ds.paired_y)
        assert np.array_equal(back.unpaired_x, ds.unpaired_x)
        assert np.array_equal(back.unpaired_y, ds.unpaired_y)


class TestRecoverable:
    def test_oracle_normalizes_on_grid(self):
        _, oracle = make_recoverable_dataset(4, 4, 4, seed=0)
        for xv in (-1.0, 0.0, 1.5):
            x = np.array([xv])
            grid = mixture_grid(oracle.mixture(x))
            dens = np.exp(oracle.conditional_logpdf(x, grid.points))
            assert np.sum(dens) * grid.cell == pytest.approx(1.0, abs=1e-4)

    def test_pairs_have_finite_density(self):
        ds, oracle = make_recoverable_dataset(50, 60, 60, seed=1)
        vals = [
            oracle.conditional_logpdf(x, y) for x, y in zip(ds.paired_x, ds.paired_y)
        ]
        assert np.all(np.isfinite(vals))

    def test_self_kl_zero(self):
        _, oracle = make_recoverable_dataset(4, 4, 4, seed=2)
        x = np.array([0.5])
        grid = mixture_grid(oracle.mixture(x))
        kl = grid_kl(
            oracle.conditional_logpdf, oracle.conditional_logpdf, x, grid
        )
        assert abs(kl) < 1e-10

    def test_prefix_and_reproducibility(self):
        a, _ = make_recoverable_dataset(10, 20, 30, seed=3)
        b, _ = make_recoverable_dataset(10, 20, 30, seed=3)
        assert np.array_equal(a.paired_y, b.paired_y)
        assert np.array_equal(a.unpaired_x[:10], a.paired_x)

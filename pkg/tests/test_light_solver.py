import numpy as np
import pytest

from iot.cost import cost_param_list, eval_cost, init_cost
from iot.light_solver import (
    DivergenceError,
    TrainConfig,
    build_conditional,
    conditional_logpdf,
    conditional_mean,
    loss,
    loss_grad,
    naive_ss_loss,
    naive_ss_loss_grad,
    sample_conditional,
    train,
)
from iot.metrics import gradcheck
from iot.mlp import LayerSpec, MLPParams, zero_mlp
from iot.numerics import gauss_logpdf, logsumexp
from iot.ot_data import make_recoverable_dataset
from iot.potential import PotentialParams, eval_potential, potential_param_list

from test_cost import linear_cost, random_cost
from test_potential import random_potential


def zero_vector_cost(rng, dim_x, dim_y, n_heads):
    cost = random_cost(rng, dim_x, dim_y, n_heads)
    for w in cost.vectors_net.weights:
        w[:] = 0.0
    for b in cost.vectors_net.biases:
        b[:] = 0.0
    return cost


def quadrature_norm_2d(cost, pot, x, eps, lim=12.0, n=600):
    """Trapezoid quadrature of exp((potential - cost)/eps) over [-lim, lim]^2.

    Runs through eval_potential/eval_cost, independent of the closed form."""
    g = np.linspace(-lim, lim, n)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    xs = np.repeat(x[None, :], len(pts), axis=0)
    vals = np.exp(
        (eval_potential(pot, pts, eps) - eval_cost(cost, xs, pts, eps)) / eps
    ).reshape(n, n)
    return float(np.trapezoid(np.trapezoid(vals, g, axis=1), g, axis=0))


def random_instance(rng, dim_x=2, dim_y=2, n_heads=3, n_comp=4):
    cost = random_cost(rng, dim_x, dim_y, n_heads)
    pot = random_potential(rng, n_comp, dim_y)
    x = rng.normal(size=dim_x)
    eps = float(rng.uniform(0.5, 2.0))
    return cost, pot, x, eps


class TestBuildConditional:
    def test_single_pair_closed_form(self):
        # one head, one component, identity covariance: the normalizer is
        # exp(a'a/2) and the mean shifts by a
        cost = linear_cost(np.eye(2), np.zeros(2), n_heads=1, dim_y=2)
        pot = PotentialParams(np.zeros(1), np.zeros((1, 2)), np.zeros((1, 2)))
        mix = build_conditional(cost, pot, np.array([1.0, 0.0]), eps=1.0)
        assert mix.log_norm == pytest.approx(0.5, abs=1e-12)
        assert np.allclose(mix.means[0, 0], [1.0, 0.0], atol=1e-12)

    def test_zero_vectors_reduce_to_potential_mixture(self):
        rng = np.random.default_rng(0)
        cost = zero_vector_cost(rng, 2, 2, 3)
        pot = random_potential(rng, 4, 2)
        mix = build_conditional(cost, pot, rng.normal(size=2), eps=1.3)
        assert mix.log_norm == pytest.approx(logsumexp(pot.log_weights), abs=1e-12)
        for m in range(3):
            assert np.allclose(mix.means[m], pot.means, atol=1e-12)

    def test_normalizer_matches_quadrature_2d(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            cost, pot, x, eps = random_instance(rng)
            mix = build_conditional(cost, pot, x, eps)
            quad = quadrature_norm_2d(cost, pot, x, eps)
            assert np.exp(mix.log_norm) == pytest.approx(quad, rel=1e-3)

    def test_weights_normalize(self):
        rng = np.random.default_rng(2)
        cost, pot, x, eps = random_instance(rng)
        mix = build_conditional(cost, pot, x, eps)
        assert np.exp(mix.log_z - mix.log_norm).sum() == pytest.approx(1.0, abs=1e-12)


class TestConditionalLogpdf:
    def test_single_component_at_mean(self):
        cost = linear_cost(np.zeros((1, 1)), np.zeros(1), n_heads=1, dim_y=1)
        pot = PotentialParams(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)))
        mix = build_conditional(cost, pot, np.zeros(1), eps=1.0)
        assert conditional_logpdf(mix, np.zeros(1)) == pytest.approx(
            -0.9189385332046727, abs=1e-12
        )

    def test_quadrature_normalization(self):
        rng = np.random.default_rng(3)
        cost, pot, x, eps = random_instance(rng)
        mix = build_conditional(cost, pot, x, eps)
        g = np.linspace(-12.0, 12.0, 600)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
        dens = np.exp(conditional_logpdf(mix, pts)).reshape(600, 600)
        total = np.trapezoid(np.trapezoid(dens, g, axis=1), g, axis=0)
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_two_route_identity(self):
        # density route vs energy route (potential - cost)/eps - log_norm
        rng = np.random.default_rng(4)
        for _ in range(5):
            cost, pot, x, eps = random_instance(rng)
            mix = build_conditional(cost, pot, x, eps)
            for _ in range(5):
                y = rng.normal(size=2) * 2.0
                via_energy = (
                    eval_potential(pot, y, eps) - eval_cost(cost, x, y, eps)
                ) / eps - mix.log_norm
                assert conditional_logpdf(mix, y) == pytest.approx(via_energy, abs=1e-10)

    def test_eps_reparametrization_invariance(self):
        rng = np.random.default_rng(5)
        cost, pot, x, eps = random_instance(rng)
        eps2 = 2.0 * eps
        cost2 = random_cost(np.random.default_rng(99), 2, 2, 3)
        for w, w0 in zip(cost2.vectors_net.weights, cost.vectors_net.weights):
            w[:] = w0
        for b, b0 in zip(cost2.vectors_net.biases, cost.vectors_net.biases):
            b[:] = b0
        for w, w0 in zip(cost2.weights_net.weights, cost.weights_net.weights):
            w[:] = w0
        for b, b0 in zip(cost2.weights_net.biases, cost.weights_net.biases):
            b[:] = b0
        # map: head vectors scale by eps2/eps, covariance diagonals by eps/eps2
        cost2.vectors_net.weights[-1] *= eps2 / eps
        cost2.vectors_net.biases[-1] *= eps2 / eps
        pot2 = PotentialParams(
            pot.log_weights.copy(), pot.means.copy(), pot.log_vars + np.log(eps / eps2)
        )
        mix = build_conditional(cost, pot, x, eps)
        mix2 = build_conditional(cost2, pot2, x, eps2)
        for _ in range(10):
            y = rng.normal(size=2) * 2.0
            assert conditional_logpdf(mix, y) == pytest.approx(
                conditional_logpdf(mix2, y), abs=1e-10
            )


class TestSampleConditional:
    def test_single_component_moments(self):
        cost = linear_cost(np.zeros((1, 1)), np.zeros(1), n_heads=1, dim_y=1)
        pot = PotentialParams(np.zeros(1), np.array([[2.0]]), np.array([[np.log(0.25)]]))
        mix = build_conditional(cost, pot, np.zeros(1), eps=1.0)
        s = sample_conditional(mix, np.random.default_rng(6), 50_000)
        assert abs(s.mean() - 2.0) < 5.0 * 0.5 / np.sqrt(50_000)

    def test_component_frequencies(self):
        # two well-separated components with weights (0.9, 0.1)
        cost = linear_cost(np.zeros((1, 1)), np.zeros(1), n_heads=1, dim_y=1)
        pot = PotentialParams(
            np.log(np.array([0.9, 0.1])),
            np.array([[-20.0], [20.0]]),
            np.log(np.full((2, 1), 0.25)),
        )
        mix = build_conditional(cost, pot, np.zeros(1), eps=1.0)
        n = 100_000
        s = sample_conditional(mix, np.random.default_rng(7), n)
        frac = float(np.mean(s[:, 0] > 0.0))
        assert abs(frac - 0.1) <= 3.0 * np.sqrt(0.9 * 0.1 / n)

    def test_empirical_mean_matches_analytic(self):
        rng = np.random.default_rng(8)
        cost, pot, x, eps = random_instance(rng)
        mix = build_conditional(cost, pot, x, eps)
        n = 200_000
        s = sample_conditional(mix, rng, n)
        mean = conditional_mean(mix)
        spread = s.std(axis=0)
        assert np.all(np.abs(s.mean(axis=0) - mean) < 5.0 * spread / np.sqrt(n))

    def test_reproducible(self):
        rng = np.random.default_rng(9)
        cost, pot, x, eps = random_instance(rng)
        mix = build_conditional(cost, pot, x, eps)
        a = sample_conditional(mix, np.random.default_rng(1), 64)
        b = sample_conditional(mix, np.random.default_rng(1), 64)
        assert np.array_equal(a, b)


class TestLoss:
    def test_pure_gaussian_mle_case(self):
        # zero head vectors and a single unit-weight component: only the
        # marginal-y term remains and equals the Gaussian NLL
        rng = np.random.default_rng(10)
        cost = zero_vector_cost(rng, 2, 1, 2)
        pot = PotentialParams(np.zeros(1), np.array([[0.3]]), np.array([[np.log(0.5)]]))
        xs = rng.normal(size=(4, 2))
        ys = rng.normal(size=(6, 1))
        eps = 1.7
        value, terms = loss(cost, pot, xs[:2], ys[:2], xs, ys, eps)
        expected = -np.mean(
            gauss_logpdf(ys, pot.means[0], np.log(eps) + pot.log_vars[0])
        )
        assert terms["paired"] == pytest.approx(0.0, abs=1e-12)
        assert terms["log_norm"] == pytest.approx(0.0, abs=1e-12)
        assert value == pytest.approx(expected, abs=1e-10)

    def test_aligned_batches_equal_conditional_nll(self):
        rng = np.random.default_rng(11)
        cost, pot, _, eps = random_instance(rng)
        xs = rng.normal(size=(5, 2))
        ys = rng.normal(size=(5, 2))
        value, _ = loss(cost, pot, xs, ys, xs, ys, eps)
        nll = -np.mean(
            [
                conditional_logpdf(build_conditional(cost, pot, x, eps), y)
                for x, y in zip(xs, ys)
            ]
        )
        assert value == pytest.approx(nll, abs=1e-10)

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(12)
        cost, pot, _, eps = random_instance(rng)
        with pytest.raises(ValueError):
            loss(cost, pot, np.empty((0, 2)), np.empty((0, 2)), np.ones((1, 2)), np.ones((1, 2)), eps)


def flatten_instance(cost, pot):
    arrays = cost_param_list(cost) + potential_param_list(pot)
    shapes = [a.shape for a in arrays]
    sizes = [a.size for a in arrays]

    def write(theta):
        off = 0
        for arr, shape, size in zip(arrays, shapes, sizes):
            arr[:] = theta[off:off + size].reshape(shape)
            off += size

    theta0 = np.concatenate([a.reshape(-1) for a in arrays])
    n_cost = sum(a.size for a in cost_param_list(cost))
    groups = {"cost_nets": slice(0, n_cost), "potential": slice(n_cost, theta0.size)}
    return theta0, write, groups


def loss_fd_fn(cost, pot, batches, eps, grad_fn=loss_grad):
    theta0, write, groups = flatten_instance(cost, pot)

    def fn(theta):
        write(theta)
        value, _, cost_grads, pot_grads = grad_fn(cost, pot, *batches, eps)
        (gwv, gbv), (gww, gbw) = cost_grads
        grad = np.concatenate(
            [g.reshape(-1) for g in gwv + gbv + gww + gbw]
            + [g.reshape(-1) for g in pot_grads]
        )
        return value, grad

    return fn, theta0, groups


class TestLossGrad:
    def test_minimal_instance_finite_differences(self):
        rng = np.random.default_rng(13)
        cost = random_cost(rng, 1, 1, 1, hidden=4)
        pot = random_potential(rng, 1, 1)
        batches = (
            rng.normal(size=(1, 1)),
            rng.normal(size=(1, 1)),
            rng.normal(size=(1, 1)),
            rng.normal(size=(1, 1)),
        )
        fn, theta0, groups = loss_fd_fn(cost, pot, batches, eps=1.0)
        report = gradcheck(fn, theta0, h=1e-5, groups=groups)
        assert report.max_rel_err <= 1e-5

    def test_random_instances_finite_differences(self):
        rng = np.random.default_rng(14)
        for _ in range(3):
            cost = random_cost(rng, 2, 2, 3, hidden=5)
            pot = random_potential(rng, 3, 2)
            batches = (
                rng.normal(size=(2, 2)),
                rng.normal(size=(2, 2)),
                rng.normal(size=(3, 2)),
                rng.normal(size=(3, 2)),
            )
            eps = float(rng.uniform(0.5, 2.0))
            fn, theta0, groups = loss_fd_fn(cost, pot, batches, eps)
            report = gradcheck(fn, theta0, h=1e-5, groups=groups)
            assert report.max_rel_err <= 1e-4

    def test_term_exclusivity(self):
        # the paired term never reads the potential; the marginal-y term
        # never reads the cost nets
        rng = np.random.default_rng(15)
        cost, pot, _, eps = random_instance(rng)
        batches = (
            rng.normal(size=(3, 2)),
            rng.normal(size=(3, 2)),
            rng.normal(size=(4, 2)),
            rng.normal(size=(4, 2)),
        )
        _, terms, _, _ = loss_grad(cost, pot, *batches, eps)
        pot2 = PotentialParams(
            pot.log_weights + 0.5, pot.means + 0.2, pot.log_vars - 0.1
        )
        _, terms2, _, _ = loss_grad(cost, pot2, *batches, eps)
        assert terms["paired"] == terms2["paired"]
        cost2 = random_cost(np.random.default_rng(123), 2, 2, 3)
        _, terms3, _, _ = loss_grad(cost2, pot, *batches, eps)
        assert terms["marginal_y"] == terms3["marginal_y"]


class TestNaiveLoss:
    def test_single_x_marginal_degenerates(self):
        rng = np.random.default_rng(16)
        cost, pot, x, eps = random_instance(rng)
        y = rng.normal(size=(1, 2))
        value, terms = naive_ss_loss(cost, pot, x[None, :], y, x[None, :], y, eps)
        assert terms["paired"] == pytest.approx(terms["marginal_y"], abs=1e-12)

    def test_zero_vectors_both_terms_equal_mixture_nll(self):
        rng = np.random.default_rng(17)
        cost = zero_vector_cost(rng, 2, 2, 3)
        pot = random_potential(rng, 3, 2)
        xs = rng.normal(size=(4, 2))
        ys = rng.normal(size=(4, 2))
        value, terms = naive_ss_loss(cost, pot, xs, ys, xs, ys, 1.0)
        mix = build_conditional(cost, pot, xs[0], 1.0)
        nll = -np.mean(conditional_logpdf(mix, ys))
        assert terms["paired"] == pytest.approx(nll, abs=1e-10)
        assert terms["marginal_y"] == pytest.approx(nll, abs=1e-10)

    def test_matches_direct_reimplementation(self):
        rng = np.random.default_rng(18)
        cost, pot, _, eps = random_instance(rng)
        px = rng.normal(size=(3, 2))
        py = rng.normal(size=(3, 2))
        xs = rng.normal(size=(4, 2))
        ys = rng.normal(size=(5, 2))
        value, _ = naive_ss_loss(cost, pot, px, py, xs, ys, eps)
        # straight-line oracle built out of single-point calls
        mixes = [build_conditional(cost, pot, x, eps) for x in xs]
        cond = -np.mean(
            [
                conditional_logpdf(build_conditional(cost, pot, x, eps), y)
                for x, y in zip(px, py)
            ]
        )
        marg = -np.mean(
            [
                logsumexp([conditional_logpdf(m, y) for m in mixes]) - np.log(len(xs))
                for y in ys
            ]
        )
        assert value == pytest.approx(cond + marg, abs=1e-10)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(19)
        cost = random_cost(rng, 2, 2, 2, hidden=4)
        pot = random_potential(rng, 2, 2)
        batches = (
            rng.normal(size=(2, 2)),
            rng.normal(size=(2, 2)),
            rng.normal(size=(3, 2)),
            rng.normal(size=(2, 2)),
        )
        fn, theta0, groups = loss_fd_fn(cost, pot, batches, 1.2, grad_fn=naive_ss_loss_grad)
        report = gradcheck(fn, theta0, h=1e-5, groups=groups)
        assert report.max_rel_err <= 1e-4


class TestTrain:
    def small_config(self, **kw):
        defaults = dict(
            n_heads=2,
            n_components=3,
            iters=5,
            batch_paired=4,
            batch_x=8,
            batch_y=8,
            vec_hidden=(8,),
            weight_hidden=(8,),
            seed=0,
        )
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_zero_iterations_returns_init(self):
        data, _ = make_recoverable_dataset(16, 32, 32, seed=0)
        cfg = self.small_config(iters=0)
        cost, pot, history = train(cfg, data)
        # reproduce the same initialization path with an identical rng
        from iot.potential import init_potential

        rng = np.random.default_rng(cfg.seed)
        pot0 = init_potential(cfg.n_components, data.unpaired_y, rng, cfg.init_var)
        cost0 = init_cost(1, 1, cfg.n_heads, rng, cfg.vec_hidden, cfg.weight_hidden)
        assert np.array_equal(pot.log_weights, pot0.log_weights)
        assert np.array_equal(pot.means, pot0.means)
        for a, b in zip(cost_param_list(cost), cost_param_list(cost0)):
            assert np.array_equal(a, b)
        assert history.iterations == []

    def test_deterministic_given_seed(self):
        data, _ = make_recoverable_dataset(16, 32, 32, seed=1)
        cfg = self.small_config(iters=8)
        c1, p1, h1 = train(cfg, data)
        c2, p2, h2 = train(cfg, data)
        assert h1.total == h2.total
        for a, b in zip(cost_param_list(c1), cost_param_list(c2)):
            assert np.array_equal(a, b)
        for a, b in zip(potential_param_list(p1), potential_param_list(p2)):
            assert np.array_equal(a, b)

    def test_divergence_aborts_with_term(self):
        data, _ = make_recoverable_dataset(8, 16, 16, seed=2)
        cfg = self.small_config(iters=400, lr_paired=3e4, lr_unpaired=3e4)
        with pytest.raises(DivergenceError) as exc:
            with np.errstate(all="ignore"):
                train(cfg, data)
        assert exc.value.term in ("paired", "marginal_y", "log_norm")

    def test_naive_variant_runs(self):
        data, _ = make_recoverable_dataset(8, 16, 16, seed=3)
        cfg = self.small_config(iters=3, variant="naive_ss")
        _, _, history = train(cfg, data)
        assert len(history.total) == 3

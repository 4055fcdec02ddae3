"""Neural variant: both the potential and the cost are free scalar nets and
the conditional density is known only up to its normalizer, with energy
(cost - potential) / eps. Training follows the exact three-part gradient of
the likelihood loss, where the intractable expectation under the model
conditional is estimated with samples from an unadjusted Langevin chain
started from Gaussian noise each iteration (chains are not differentiated
through). Exercised at 2D scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .light_solver import DIVERGENCE_LIMIT, DivergenceError, History
from .mlp import init_mlp, mlp_backward, mlp_forward, mlp_grad_list, mlp_param_list, mlp_spec
from .numerics import logsumexp
from .optim import Adam


@dataclass
class EBMConfig:
    n_langevin: int = 100  # Langevin steps per iteration
    step_size: float = 0.01  # Langevin discretization step
    init_std: float = 1.0  # std of the Gaussian chain initialization
    batch_paired: int = 128
    batch_x: int = 64
    batch_y: int = 256
    lr_paired: float = 5e-4  # drives the cost net
    lr_unpaired: float = 2e-4  # drives the potential net
    iters: int = 3000
    seed: int = 0
    eps: float = 1.0
    f_hidden: tuple = (128, 128)
    c_hidden: tuple = (256, 256, 256)
    slope: float = 0.2  # leaky ReLU negative-side slope
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.n_langevin < 1:
            raise ValueError("need at least one Langevin step")
        if self.step_size <= 0.0 or self.init_std <= 0.0 or self.eps <= 0.0:
            raise ValueError("step_size, init_std and eps must be positive")


@dataclass
class EBMModel:
    potential_net: object  # MLPParams, dim_y -> 1
    cost_net: object  # MLPParams, dim_x + dim_y -> 1
    eps: float

    @property
    def dim_y(self):
        return self.potential_net.in_dim

    @property
    def dim_x(self):
        return self.cost_net.in_dim - self.potential_net.in_dim

    def energy(self, x, y):
        """(cost(x, y) - potential(y)) / eps; scalar or (batch,)."""
        single = np.asarray(x).ndim == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        cval, _ = mlp_forward(self.cost_net, np.concatenate([x, y], axis=1))
        fval, _ = mlp_forward(self.potential_net, y)
        out = (cval[:, 0] - fval[:, 0]) / self.eps
        return float(out[0]) if single else out

    def energy_grad_y(self, x, y):
        """dE/dy for aligned batches x (B, dim_x), y (B, dim_y)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        ones = np.ones((y.shape[0], 1))
        _, cache_c = mlp_forward(self.cost_net, np.concatenate([x, y], axis=1))
        _, _, g_in = mlp_backward(self.cost_net, cache_c, ones)
        grad = g_in[:, x.shape[1]:].copy()
        _, cache_f = mlp_forward(self.potential_net, y)
        _, _, g_f = mlp_backward(self.potential_net, cache_f, ones)
        return (grad - g_f) / self.eps


def init_ebm(dim_x, dim_y, config, rng):
    f_specs = mlp_spec(
        [dim_y, *config.f_hidden, 1], hidden_activation="leaky_relu", slope=config.slope
    )
    c_specs = mlp_spec(
        [dim_x + dim_y, *config.c_hidden, 1],
        hidden_activation="leaky_relu",
        slope=config.slope,
    )
    return EBMModel(init_mlp(f_specs, rng), init_mlp(c_specs, rng), config.eps)


def energy(model, x, y):
    return model.energy(x, y)


def ula_chain(model, x, y0, n_steps, step, rng, noise=True):
    """Unadjusted Langevin chain on the conditional energy at x.

    y <- y - (step/2) dE/dy + sqrt(step) * z per step. `x`/`y0` may be a
    single point pair or aligned batches. `noise=False` suppresses the
    noise term (pure descent on the energy; test hook). Raises on a
    non-finite iterate, naming the step.
    """
    if n_steps < 1:
        raise ValueError("need n_steps >= 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y0, dtype=float).copy()
    single = y.ndim == 1
    if single:
        x, y = x[None, :], y[None, :]
    root = np.sqrt(step)
    for k in range(n_steps):
        y -= 0.5 * step * model.energy_grad_y(x, y)
        if noise:
            y += root * rng.standard_normal(y.shape)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"Langevin iterate became non-finite at step {k + 1}")
    return y[0] if single else y


def ebm_loss_grad(model, paired_x, paired_y, xs, ys, config, rng):
    """Stochastic gradient of the likelihood loss for the neural model.

    Three parts: paired cost term, target-marginal potential term, and the
    model-conditional term estimated from Langevin samples (treated as
    constants; the chain is never differentiated through).

    Returns (surrogate_value, terms, f_grads, c_grads, model_samples) with
    f_grads/c_grads as (grad_weights, grad_biases) lists.
    """
    paired_x = np.asarray(paired_x, dtype=float)
    paired_y = np.asarray(paired_y, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if min(len(paired_x), len(xs), len(ys)) == 0:
        raise ValueError("all three batches must be non-empty")
    eps = model.eps
    n_p, n_q, n_r = len(paired_x), len(xs), len(ys)

    cvals, cache_cp = mlp_forward(model.cost_net, np.concatenate([paired_x, paired_y], axis=1))
    term_paired = float(np.mean(cvals)) / eps
    gw_c, gb_c, _ = mlp_backward(model.cost_net, cache_cp, np.full((n_p, 1), 1.0 / (eps * n_p)))

    fvals, cache_fr = mlp_forward(model.potential_net, ys)
    term_fy = -float(np.mean(fvals)) / eps
    gw_f, gb_f, _ = mlp_backward(
        model.potential_net, cache_fr, np.full((n_r, 1), -1.0 / (eps * n_r))
    )

    y0 = config.init_std * rng.standard_normal((n_q, model.dim_y))
    yk = ula_chain(model, xs, y0, config.n_langevin, config.step_size, rng)

    fvals_k, cache_fk = mlp_forward(model.potential_net, yk)
    cvals_k, cache_ck = mlp_forward(model.cost_net, np.concatenate([xs, yk], axis=1))
    term_model = float(np.mean(fvals_k) - np.mean(cvals_k)) / eps
    gw, gb, _ = mlp_backward(model.potential_net, cache_fk, np.full((n_q, 1), 1.0 / (eps * n_q)))
    gw_f = [a + b for a, b in zip(gw_f, gw)]
    gb_f = [a + b for a, b in zip(gb_f, gb)]
    gw, gb, _ = mlp_backward(model.cost_net, cache_ck, np.full((n_q, 1), -1.0 / (eps * n_q)))
    gw_c = [a + b for a, b in zip(gw_c, gw)]
    gb_c = [a + b for a, b in zip(gb_c, gb)]

    terms = {"paired": term_paired, "marginal_y": term_fy, "log_norm": term_model}
    value = term_paired + term_fy + term_model
    return value, terms, (gw_f, gb_f), (gw_c, gb_c), yk


def train_ebm(config, data, rng=None):
    """Langevin-based training loop; returns (EBMModel, History)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    data.validate()
    model = init_ebm(data.unpaired_x.shape[1], data.unpaired_y.shape[1], config, rng)
    adam_c = Adam(
        mlp_param_list(model.cost_net), config.lr_paired, config.adam_betas, config.adam_eps
    )
    adam_f = Adam(
        mlp_param_list(model.potential_net),
        config.lr_unpaired,
        config.adam_betas,
        config.adam_eps,
    )
    history = History()
    start = time.perf_counter()
    for i in range(config.iters):
        idx = rng.integers(0, len(data.paired_x), size=config.batch_paired) \
            if config.batch_paired < len(data.paired_x) else slice(None)
        bx_p, by_p = data.paired_x[idx], data.paired_y[idx]
        bx = _draw(rng, data.unpaired_x, config.batch_x)
        by = _draw(rng, data.unpaired_y, config.batch_y)
        value, terms, f_grads, c_grads, _ = ebm_loss_grad(
            model, bx_p, by_p, bx, by, config, rng
        )
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            worst = max(terms, key=lambda k: np.inf if not np.isfinite(terms[k]) else abs(terms[k]))
            raise DivergenceError(
                f"loss diverged at iteration {i}: total={value!r}, worst term "
                f"{worst}={terms[worst]!r}",
                term=worst,
                state={"model": model, "iteration": i, "history": history},
            )
        history.append(i, value, terms, time.perf_counter() - start)
        adam_c.step(mlp_grad_list(*c_grads))
        adam_f.step(mlp_grad_list(*f_grads))
    return model, history


def _draw(rng, data, size):
    n = len(data)
    if size >= n:
        return data
    return data[rng.integers(0, n, size=size)]


# quadrature-exact loss and gradient (1D targets); validates the gradient
# formula independently of any sampler


def ebm_loss_quadrature(model, paired_x, paired_y, xs, ys, grid_points, cell):
    """Exact loss with the log-normalizer computed by quadrature. dim_y=1."""
    eps = model.eps
    cvals, _ = mlp_forward(model.cost_net, np.concatenate([paired_x, paired_y], axis=1))
    fvals, _ = mlp_forward(model.potential_net, ys)
    value = (float(np.mean(cvals)) - float(np.mean(fvals))) / eps
    fg, _ = mlp_forward(model.potential_net, grid_points)  # (G, 1)
    total = 0.0
    for x in xs:
        xrep = np.repeat(x[None, :], len(grid_points), axis=0)
        cg, _ = mlp_forward(model.cost_net, np.concatenate([xrep, grid_points], axis=1))
        total += logsumexp((fg[:, 0] - cg[:, 0]) / eps) + np.log(cell)
    return value + total / len(xs)


def ebm_grad_quadrature(model, paired_x, paired_y, xs, ys, grid_points, cell):
    """Gradient of the likelihood loss with the model expectation replaced
    by grid quadrature. Returns (f_grads, c_grads)."""
    eps = model.eps
    n_p, n_q, n_r = len(paired_x), len(xs), len(ys)
    cvals, cache_cp = mlp_forward(model.cost_net, np.concatenate([paired_x, paired_y], axis=1))
    gw_c, gb_c, _ = mlp_backward(model.cost_net, cache_cp, np.full((n_p, 1), 1.0 / (eps * n_p)))
    fvals, cache_fr = mlp_forward(model.potential_net, ys)
    gw_f, gb_f, _ = mlp_backward(
        model.potential_net, cache_fr, np.full((n_r, 1), -1.0 / (eps * n_r))
    )

    fg, cache_fg = mlp_forward(model.potential_net, grid_points)
    f_row_weights = np.zeros((len(grid_points), 1))
    for x in xs:
        xrep = np.repeat(x[None, :], len(grid_points), axis=0)
        cg, cache_cg = mlp_forward(model.cost_net, np.concatenate([xrep, grid_points], axis=1))
        logit = (fg[:, 0] - cg[:, 0]) / eps
        w = np.exp(logit - logsumexp(logit))  # normalized conditional weights
        f_row_weights[:, 0] += w / (eps * n_q)
        gw, gb, _ = mlp_backward(model.cost_net, cache_cg, -w[:, None] / (eps * n_q))
        gw_c = [a + b for a, b in zip(gw_c, gw)]
        gb_c = [a + b for a, b in zip(gb_c, gb)]
    gw, gb, _ = mlp_backward(model.potential_net, cache_fg, f_row_weights)
    gw_f = [a + b for a, b in zip(gw_f, gw)]
    gb_f = [a + b for a, b in zip(gb_f, gb)]
    return (gw_f, gb_f), (gw_c, gb_c)

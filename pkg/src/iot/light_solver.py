"""Closed-form solver: exact normalization, exact conditional mixtures and
sampling, the semi-supervised likelihood loss with exact gradients, the
training loop, and the naive semi-supervised baseline loss.

For a potential mixture (weights w_n, means b_n, covariance diagonals
eps*V_n) and a cost with heads (v_m(x), a_m(x)), the unnormalized
conditional density exp((potential - cost)/eps) is itself a Gaussian
mixture with

    log z_mn(x) = log w_n + log v_m(x) + (a_m' V_n a_m + 2 b_n' a_m) / (2 eps)
    d_mn(x)     = b_n + V_n a_m(x)
    cov_mn      = eps * V_n (diagonal)

so the normalizer is sum_mn z_mn and sampling is categorical + Gaussian.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cost import cost_heads, cost_param_list, init_cost
from .mlp import mlp_backward
from .numerics import gauss_logpdf, logsumexp, logsumexp_softmax, softmax
from .optim import Adam
from .potential import init_potential, potential_param_list

DIVERGENCE_LIMIT = 1e8


class DivergenceError(RuntimeError):
    """Raised when the training loss leaves the finite regime.

    Carries the offending term name and the partial training state so
    callers can persist a diagnostic checkpoint.
    """

    def __init__(self, message, term, state=None):
        super().__init__(message)
        self.term = term
        self.state = state or {}


@dataclass
class ConditionalMixture:
    """Conditional distribution at one input point: an M*N Gaussian mixture."""

    log_z: np.ndarray  # (M, N) unnormalized log component weights
    means: np.ndarray  # (M, N, dim_y)
    comp_log_vars: np.ndarray  # (N, dim_y) log covariance diagonal (eps folded in)
    log_norm: float  # logsumexp(log_z)

    @property
    def dim_y(self):
        return self.means.shape[2]


@dataclass
class TrainConfig:
    eps: float = 1.0
    n_heads: int = 25  # cost mixture heads
    n_components: int = 50  # potential mixture components
    lr_paired: float = 3e-4  # drives the cost nets
    lr_unpaired: float = 1e-3  # drives the potential
    iters: int = 25000
    batch_paired: int = 128
    batch_x: int = 256
    batch_y: int = 256
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    variant: str = "light"  # or "naive_ss"
    vec_hidden: tuple = (128, 128)
    weight_hidden: tuple = (128,)
    init_var: float = 0.1

    def __post_init__(self):
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")
        if self.lr_paired <= 0.0 or self.lr_unpaired <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.variant not in ("light", "naive_ss"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class History:
    iterations: list = field(default_factory=list)
    total: list = field(default_factory=list)
    term_paired: list = field(default_factory=list)
    term_fy: list = field(default_factory=list)
    term_logz: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def append(self, i, total, terms, elapsed):
        self.iterations.append(i)
        self.total.append(total)
        self.term_paired.append(terms["paired"])
        self.term_fy.append(terms["marginal_y"])
        self.term_logz.append(terms["log_norm"])
        self.wall_clock.append(elapsed)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,total,term_paired,term_fy,term_logZ\n")
            for row in zip(
                self.iterations, self.total, self.term_paired, self.term_fy, self.term_logz
            ):
                fh.write("%d,%r,%r,%r,%r\n" % row)


def _contract_heads(vectors, table):
    """(..., M, dim_y) x (N, dim_y) -> (..., M, N) via one BLAS matmul."""
    flat = vectors.reshape(-1, vectors.shape[-1])
    return (flat @ table.T).reshape(vectors.shape[:-1] + (table.shape[0],))


def _log_z_table(cost, pot, x, eps):
    """Unnormalized log component weights for one x or a batch of x.

    Returns (vectors, log_head_weights, log_z, vec_cache, wts_cache) where
    log_z has shape (..., M, N).
    """
    vectors, logw_heads, cache_v, cache_w = cost_heads(cost, x)
    variances = np.exp(pot.log_vars)  # (N, dim_y)
    scale = 1.0 / (2.0 * eps)
    log_z = _contract_heads(vectors * vectors, variances * scale)
    log_z += _contract_heads(vectors, pot.means * (2.0 * scale))
    log_z += logw_heads[..., :, None]
    log_z += pot.log_weights
    return vectors, logw_heads, log_z, cache_v, cache_w


def build_conditional(cost, pot, x, eps):
    """Exact conditional mixture at a single input point."""
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("build_conditional expects a single point")
    vectors, _, log_z, _, _ = _log_z_table(cost, pot, x, eps)
    variances = np.exp(pot.log_vars)
    means = pot.means[None, :, :] + variances[None, :, :] * vectors[:, None, :]
    return ConditionalMixture(
        log_z=log_z,
        means=means,
        comp_log_vars=np.log(eps) + pot.log_vars,
        log_norm=logsumexp(log_z),
    )


def conditional_logpdf(mix, y):
    """Log-density of the conditional mixture at y ((dim_y,) or (batch, dim_y))."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != mix.dim_y:
        raise ValueError("y dimension does not match the mixture")
    comp = gauss_logpdf(y[..., None, None, :], mix.means, mix.comp_log_vars)
    out = logsumexp(mix.log_z + comp, axis=(-2, -1)) - mix.log_norm
    return float(out) if np.ndim(out) == 0 else out


def sample_conditional(mix, rng, n):
    """Draw n samples: categorical over components, then the component Gaussian."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    m, ncomp = mix.log_z.shape
    probs = np.exp(mix.log_z - mix.log_norm).reshape(-1)
    probs = probs / probs.sum()
    idx = rng.choice(m * ncomp, size=n, p=probs)
    means = mix.means.reshape(m * ncomp, -1)[idx]
    stds = np.exp(0.5 * mix.comp_log_vars)[idx % ncomp]
    return means + stds * rng.standard_normal((n, mix.dim_y))


def conditional_mean(mix):
    """Analytic mixture mean sum_mn p_mn d_mn."""
    probs = np.exp(mix.log_z - mix.log_norm)
    return np.einsum("mn,mnj->j", probs, mix.means)


def _check_batches(paired_x, paired_y, xs, ys):
    if len(paired_x) == 0 or len(xs) == 0 or len(ys) == 0:
        raise ValueError("all three batches must be non-empty")
    if len(paired_x) != len(paired_y):
        raise ValueError("paired batch halves disagree in length")


def _potential_values(pot, ys, eps):
    lp = pot.log_weights + gauss_logpdf(
        ys[:, None, :], pot.means, np.log(eps) + pot.log_vars
    )
    return eps * logsumexp(lp, axis=-1), lp


def loss(cost, pot, paired_x, paired_y, xs, ys, eps):
    """Semi-supervised likelihood loss and its term breakdown.

    value = mean cost(paired)/eps - mean potential(ys)/eps + mean log-normalizer(xs)
    """
    paired_x = np.asarray(paired_x, dtype=float)
    paired_y = np.asarray(paired_y, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    _check_batches(paired_x, paired_y, xs, ys)

    vec_p, logw_p, _, _ = cost_heads(cost, paired_x)
    scores = logw_p + np.einsum("pmj,pj->pm", vec_p, paired_y) / eps
    term_paired = float(np.mean(-eps * logsumexp(scores, axis=-1))) / eps

    fvals, _ = _potential_values(pot, ys, eps)
    term_fy = -float(np.mean(fvals)) / eps

    _, _, log_z, _, _ = _log_z_table(cost, pot, xs, eps)
    term_logz = float(np.mean(logsumexp(log_z, axis=(-2, -1))))

    terms = {"paired": term_paired, "marginal_y": term_fy, "log_norm": term_logz}
    return term_paired + term_fy + term_logz, terms


def loss_grad(cost, pot, paired_x, paired_y, xs, ys, eps, _disable_term=None):
    """Loss value, term breakdown, and exact gradients.

    Returns (value, terms, cost_grads, pot_grads) with
    cost_grads = ((gw_vec, gb_vec), (gw_wts, gb_wts)) and
    pot_grads = (g_log_weights, g_means, g_log_vars).

    `_disable_term` ("paired" | "marginal_y" | "log_norm") zeroes that
    term's gradient contribution; negative-control hook for gradcheck.
    """
    paired_x = np.asarray(paired_x, dtype=float)
    paired_y = np.asarray(paired_y, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    _check_batches(paired_x, paired_y, xs, ys)
    n_p, n_q, n_r = len(paired_x), len(xs), len(ys)
    variances = np.exp(pot.log_vars)

    # paired term: mean cost / eps
    vec_p, logw_p, cache_vp, cache_wp = cost_heads(cost, paired_x)
    scores = logw_p + np.sum(vec_p * paired_y[:, None, :], axis=-1) / eps
    score_lse, rho = logsumexp_softmax(scores, axis=-1)  # rho: (P, M)
    term_paired = -float(np.mean(score_lse))

    # marginal-y term: -mean potential / eps
    lp = pot.log_weights + gauss_logpdf(
        ys[:, None, :], pot.means, np.log(eps) + pot.log_vars
    )
    lp_lse, resp = logsumexp_softmax(lp, axis=-1)  # resp: (R, N)
    term_fy = -float(np.mean(lp_lse))

    # log-normalizer term
    vec_q, _, log_z, cache_vq, cache_wq = _log_z_table(cost, pot, xs, eps)
    logz_lse, pz = logsumexp_softmax(log_z.reshape(n_q, -1), axis=-1)
    term_logz = float(np.mean(logz_lse))
    pz = pz.reshape(log_z.shape)  # (Q, M, N)

    terms = {"paired": term_paired, "marginal_y": term_fy, "log_norm": term_logz}
    value = term_paired + term_fy + term_logz

    on = lambda name: 0.0 if _disable_term == name else 1.0

    # cost-net gradients
    d_logw_p = -(on("paired") / n_p) * rho
    d_vec_p = -(on("paired") / (eps * n_p)) * rho[:, :, None] * paired_y[:, None, :]
    gw_wts, gb_wts, _ = mlp_backward(cost.weights_net, cache_wp, d_logw_p)
    gw_vec, gb_vec, _ = mlp_backward(
        cost.vectors_net, cache_vp, d_vec_p.reshape(n_p, -1)
    )

    pz_flat = pz.reshape(-1, pz.shape[-1])  # (Q*M, N)
    d_logw_q = (on("log_norm") / n_q) * np.sum(pz, axis=-1)  # (Q, M)
    d_vec_q = (on("log_norm") / (eps * n_q)) * (
        vec_q * (pz_flat @ variances).reshape(vec_q.shape)
        + (pz_flat @ pot.means).reshape(vec_q.shape)
    )
    gw_wts_q, gb_wts_q, _ = mlp_backward(cost.weights_net, cache_wq, d_logw_q)
    gw_vec_q, gb_vec_q, _ = mlp_backward(
        cost.vectors_net, cache_vq, d_vec_q.reshape(n_q, -1)
    )
    gw_vec = [a + b for a, b in zip(gw_vec, gw_vec_q)]
    gb_vec = [a + b for a, b in zip(gb_vec, gb_vec_q)]
    gw_wts = [a + b for a, b in zip(gw_wts, gw_wts_q)]
    gb_wts = [a + b for a, b in zip(gb_wts, gb_wts_q)]

    # potential gradients
    diff = ys[:, None, :] - pot.means  # (R, N, dim_y)
    scaled = diff * np.exp(-pot.log_vars) / eps
    g_log_weights = -(on("marginal_y") / n_r) * np.sum(resp, axis=0)
    g_means = -(on("marginal_y") / n_r) * np.einsum("rn,rnj->nj", resp, scaled)
    g_log_vars = -(on("marginal_y") / n_r) * np.einsum(
        "rn,rnj->nj", resp, 0.5 * (diff * scaled - 1.0)
    )

    vec_flat = vec_q.reshape(-1, vec_q.shape[-1])  # (Q*M, dim_y)
    g_log_weights = g_log_weights + (on("log_norm") / n_q) * np.sum(pz, axis=(0, 1))
    g_means = g_means + (on("log_norm") / (eps * n_q)) * (pz_flat.T @ vec_flat)
    g_log_vars = g_log_vars + (on("log_norm") / (2.0 * eps * n_q)) * variances * (
        pz_flat.T @ (vec_flat * vec_flat)
    )

    cost_grads = ((gw_vec, gb_vec), (gw_wts, gb_wts))
    pot_grads = (g_log_weights, g_means, g_log_vars)
    return value, terms, cost_grads, pot_grads


def naive_ss_loss(cost, pot, paired_x, paired_y, xs, ys, eps):
    """Baseline loss: paired conditional NLL plus a Monte-Carlo marginal
    NLL that averages the conditional density over the x batch (a biased
    plug-in estimate of the y-marginal).
    """
    paired_x = np.asarray(paired_x, dtype=float)
    paired_y = np.asarray(paired_y, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    _check_batches(paired_x, paired_y, xs, ys)

    cond = _cross_conditional_logpdf(cost, pot, paired_x, paired_y, eps, aligned=True)
    term_cond = -float(np.mean(cond))
    cross = _cross_conditional_logpdf(cost, pot, xs, ys, eps, aligned=False)  # (R, Q)
    term_marg = -float(np.mean(logsumexp(cross, axis=1) - np.log(len(xs))))
    terms = {"paired": term_cond, "marginal_y": term_marg, "log_norm": 0.0}
    return term_cond + term_marg, terms


def _cross_conditional_logpdf(cost, pot, xs, ys, eps, aligned):
    """Conditional log-densities. aligned=True pairs xs[k] with ys[k] and
    returns (K,); aligned=False returns the full (R, Q) table."""
    vectors, _, log_z, _, _ = _log_z_table(cost, pot, xs, eps)
    variances = np.exp(pot.log_vars)
    d = pot.means[None, None, :, :] + variances[None, None, :, :] * vectors[:, :, None, :]
    log_var = np.log(eps) + pot.log_vars  # (N, dim_y)
    log_norm = logsumexp(log_z, axis=(-2, -1))  # (Q,)
    if aligned:
        comp = gauss_logpdf(ys[:, None, None, :], d, log_var)
        return logsumexp(log_z + comp, axis=(-2, -1)) - log_norm
    comp = gauss_logpdf(ys[:, None, None, None, :], d[None], log_var)  # (R, Q, M, N)
    return logsumexp(log_z[None] + comp, axis=(-2, -1)) - log_norm[None, :]


def _weighted_conditional_grad(cost, pot, xs, ys, wts, eps):
    """Gradient of sum_k wts[k] * conditional_logpdf(ys[k] | xs[k]).

    Shared backbone of the naive-loss gradient; xs/ys are aligned (K, .)
    batches and wts a (K,) weight vector (signs included by the caller).
    """
    n_k = len(xs)
    variances = np.exp(pot.log_vars)
    inv_var = np.exp(-pot.log_vars)
    vectors, _, log_z, cache_v, cache_w = _log_z_table(cost, pot, xs, eps)
    d = pot.means[None, None, :, :] + variances[None, None, :, :] * vectors[:, :, None, :]
    comp = gauss_logpdf(ys[:, None, None, :], d, np.log(eps) + pot.log_vars)

    q = softmax((log_z + comp).reshape(n_k, -1), axis=-1).reshape(log_z.shape)
    pz = softmax(log_z.reshape(n_k, -1), axis=-1).reshape(log_z.shape)
    delta = wts[:, None, None] * (q - pz)  # (K, M, N)
    wq = wts[:, None, None] * q

    g_log_weights = np.sum(delta, axis=(0, 1))
    d_logw = np.sum(delta, axis=-1)  # (K, M) -> weights net
    # d(log z + comp)/d a_m = y/eps for the numerator, d(log z)/d a_m = d_mn/eps
    d_vec = (
        np.sum(wq, axis=-1)[:, :, None] * ys[:, None, :]
        - np.einsum("kmn,kmnj->kmj", wts[:, None, None] * pz, d)
    ) / eps
    ydiff = (ys[:, None, None, :] - d) * inv_var[None, None, :, :]  # (y-d)/V
    g_means = (
        np.einsum("kmn,kmj->nj", delta, vectors) + np.einsum("kmn,kmnj->nj", wq, ydiff)
    ) / eps
    g_log_vars = (
        np.einsum("kmn,kmj->nj", delta, vectors * vectors) * variances / (2.0 * eps)
        + np.einsum("kmn,kmnj->nj", wq, (ys[:, None, None, :] - d) * vectors[:, :, None, :])
        / eps
        + np.einsum("kmn,kmnj->nj", wq, 0.5 * ((ys[:, None, None, :] - d) * ydiff / eps - 1.0))
    )

    gw_wts, gb_wts, _ = mlp_backward(cost.weights_net, cache_w, d_logw)
    gw_vec, gb_vec, _ = mlp_backward(cost.vectors_net, cache_v, d_vec.reshape(n_k, -1))
    return ((gw_vec, gb_vec), (gw_wts, gb_wts)), (g_log_weights, g_means, g_log_vars)


def naive_ss_loss_grad(cost, pot, paired_x, paired_y, xs, ys, eps):
    """Value, terms and exact gradients of the naive baseline loss."""
    paired_x = np.asarray(paired_x, dtype=float)
    paired_y = np.asarray(paired_y, dtype=float)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    _check_batches(paired_x, paired_y, xs, ys)
    n_p, n_q, n_r = len(paired_x), len(xs), len(ys)

    value, terms = naive_ss_loss(cost, pot, paired_x, paired_y, xs, ys, eps)

    cg1, pg1 = _weighted_conditional_grad(
        cost, pot, paired_x, paired_y, np.full(n_p, -1.0 / n_p), eps
    )
    cross = _cross_conditional_logpdf(cost, pot, xs, ys, eps, aligned=False)  # (R, Q)
    alpha = softmax(cross, axis=1)  # (R, Q)
    flat_x = np.repeat(xs[None, :, :], n_r, axis=0).reshape(n_r * n_q, -1)
    flat_y = np.repeat(ys[:, None, :], n_q, axis=1).reshape(n_r * n_q, -1)
    cg2, pg2 = _weighted_conditional_grad(
        cost, pot, flat_x, flat_y, -alpha.reshape(-1) / n_r, eps
    )

    cost_grads = (
        (
            [a + b for a, b in zip(cg1[0][0], cg2[0][0])],
            [a + b for a, b in zip(cg1[0][1], cg2[0][1])],
        ),
        (
            [a + b for a, b in zip(cg1[1][0], cg2[1][0])],
            [a + b for a, b in zip(cg1[1][1], cg2[1][1])],
        ),
    )
    pot_grads = tuple(a + b for a, b in zip(pg1, pg2))
    return value, terms, cost_grads, pot_grads


def cost_grad_list(cost_grads):
    (gw_vec, gb_vec), (gw_wts, gb_wts) = cost_grads
    return list(gw_vec) + list(gb_vec) + list(gw_wts) + list(gb_wts)


def _draw(rng, data, size):
    n = len(data)
    if size >= n:
        return data
    return data[rng.integers(0, n, size=size)]


def train(config, data, rng=None):
    """Run the configured number of Adam steps on the selected loss.

    Paired-data learning rate drives the cost nets, unpaired-data rate the
    potential. Batches for the three terms are drawn independently each
    iteration (the full set is used whenever the batch size covers it).
    Deterministic for a fixed rng/seed. Raises DivergenceError when the
    loss leaves the finite regime.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    data.validate()
    dim_x = data.unpaired_x.shape[1]
    dim_y = data.unpaired_y.shape[1]

    pot = init_potential(
        config.n_components, data.unpaired_y, rng, init_var=config.init_var
    )
    cost = init_cost(
        dim_x,
        dim_y,
        config.n_heads,
        rng,
        vec_hidden=tuple(config.vec_hidden),
        weight_hidden=tuple(config.weight_hidden),
    )
    adam_cost = Adam(
        cost_param_list(cost), config.lr_paired, config.adam_betas, config.adam_eps
    )
    adam_pot = Adam(
        potential_param_list(pot), config.lr_unpaired, config.adam_betas, config.adam_eps
    )
    grad_fn = loss_grad if config.variant == "light" else naive_ss_loss_grad

    history = History()
    start = time.perf_counter()
    for i in range(config.iters):
        idx = rng.integers(0, len(data.paired_x), size=config.batch_paired) \
            if config.batch_paired < len(data.paired_x) else slice(None)
        bx_p, by_p = data.paired_x[idx], data.paired_y[idx]
        bx = _draw(rng, data.unpaired_x, config.batch_x)
        by = _draw(rng, data.unpaired_y, config.batch_y)

        value, terms, cost_grads, pot_grads = grad_fn(
            cost, pot, bx_p, by_p, bx, by, config.eps
        )
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            worst = max(terms, key=lambda k: np.inf if not np.isfinite(terms[k]) else abs(terms[k]))
            raise DivergenceError(
                f"loss diverged at iteration {i}: total={value!r}, worst term "
                f"{worst}={terms[worst]!r}",
                term=worst,
                state={"cost": cost, "pot": pot, "iteration": i, "history": history},
            )
        history.append(i, value, terms, time.perf_counter() - start)
        adam_cost.step(cost_grad_list(cost_grads))
        adam_pot.step(list(pot_grads))
    return cost, pot, history

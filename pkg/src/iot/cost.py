"""Learnable transport cost built from two network heads.

value(x, y) = -eps * log sum_m v_m(x) * exp(<a_m(x), y> / eps)

where the head weights v_m(x) come from a log-softmax net (so they sum to
one structurally) and the head vectors a_m(x) from an unconstrained net
whose flat output is reshaped to (n_heads, dim_y). By construction
value(x, 0) = 0 for every x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import init_mlp, mlp_backward, mlp_forward, mlp_param_list, mlp_spec
from .numerics import logsumexp, softmax


@dataclass
class CostParams:
    vectors_net: object  # MLPParams, dim_x -> n_heads * dim_y, identity output
    weights_net: object  # MLPParams, dim_x -> n_heads, log_softmax output
    n_heads: int
    dim_y: int

    @property
    def dim_x(self):
        return self.vectors_net.in_dim


def init_cost(dim_x, dim_y, n_heads, rng, vec_hidden=(128, 128), weight_hidden=(128,)):
    """Two-hidden-layer vectors net and one-hidden-layer weights net by
    default; both ReLU."""
    if n_heads < 1:
        raise ValueError("need at least one head")
    vec_specs = mlp_spec([dim_x, *vec_hidden, n_heads * dim_y])
    w_specs = mlp_spec([dim_x, *weight_hidden, n_heads], output="log_softmax")
    return CostParams(init_mlp(vec_specs, rng), init_mlp(w_specs, rng), n_heads, dim_y)


def cost_heads(cost, x):
    """Evaluate both heads. x: (dim_x,) or (batch, dim_x).

    Returns (vectors (..., n_heads, dim_y), log_weights (..., n_heads),
    vectors_cache, weights_cache).
    """
    flat, cache_v = mlp_forward(cost.vectors_net, x)
    logw, cache_w = mlp_forward(cost.weights_net, x)
    vectors = flat.reshape(flat.shape[:-1] + (cost.n_heads, cost.dim_y))
    return vectors, logw, cache_v, cache_w


def _check_eps(eps):
    if not eps > 0.0:
        raise ValueError("eps must be positive")


def eval_cost(cost, x, y, eps):
    """Cost value. Accepts a single (x, y) pair or aligned batches."""
    _check_eps(eps)
    y = np.asarray(y, dtype=float)
    vectors, logw, _, _ = cost_heads(cost, x)
    scores = logw + np.einsum("...mj,...j->...m", vectors, y) / eps
    out = -eps * logsumexp(scores, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def grad_cost(cost, x, y, eps):
    """Gradients of eval_cost at a single (x, y).

    Returns ((gw_vec, gb_vec), (gw_wts, gb_wts), grad_y). grad_y is a
    responsibility-weighted combination -sum_m rho_m a_m(x), with the
    rho_m forming a probability vector.
    """
    _check_eps(eps)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("grad_cost expects a single pair")
    vectors, logw, cache_v, cache_w = cost_heads(cost, x)
    scores = logw + vectors @ y / eps
    rho = softmax(scores)  # (n_heads,)

    grad_y = -np.einsum("m,mj->j", rho, vectors)
    gw_wts, gb_wts, _ = mlp_backward(cost.weights_net, cache_w, -eps * rho)
    grad_flat = (-rho[:, None] * y[None, :]).reshape(-1)
    gw_vec, gb_vec, _ = mlp_backward(cost.vectors_net, cache_v, grad_flat)
    return (gw_vec, gb_vec), (gw_wts, gb_wts), grad_y


def cost_param_list(cost):
    return mlp_param_list(cost.vectors_net) + mlp_param_list(cost.weights_net)

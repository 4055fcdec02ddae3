"""Dual potential: a scaled log-density of a Gaussian mixture with
unnormalized positive weights and diagonal covariances.

value(y) = eps * log sum_n w_n N(y | mean_n, eps * diag(exp(log_vars_n)))

Weights are stored as logs and covariance diagonals as log-variances, so
positivity is structural. `eps` is a call-site argument, never stored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import gauss_logpdf, logsumexp, softmax


@dataclass
class PotentialParams:
    log_weights: np.ndarray  # (N,)
    means: np.ndarray  # (N, dim_y)
    log_vars: np.ndarray  # (N, dim_y) log of the pre-eps covariance diagonal

    @property
    def n_components(self):
        return self.log_weights.shape[0]

    @property
    def dim_y(self):
        return self.means.shape[1]

    def copy(self):
        return PotentialParams(
            self.log_weights.copy(), self.means.copy(), self.log_vars.copy()
        )


def init_potential(n_components, target_samples, rng, init_var=0.1):
    """Initialization: log w_n = log(1/n), means drawn from the target
    sample pool, every log-variance at log(init_var)."""
    if n_components < 1:
        raise ValueError("need at least one component")
    target_samples = np.asarray(target_samples, dtype=float)
    if target_samples.ndim != 2 or target_samples.shape[0] < 1:
        raise ValueError("target_samples must be a non-empty (n, dim_y) array")
    idx = rng.integers(0, target_samples.shape[0], size=n_components)
    return PotentialParams(
        log_weights=np.log(1.0 / np.arange(1, n_components + 1)),
        means=target_samples[idx].copy(),
        log_vars=np.full((n_components, target_samples.shape[1]), np.log(init_var)),
    )


def _check_eps(eps):
    if not eps > 0.0:
        raise ValueError("eps must be positive")


def component_logpdfs(pot, y, eps):
    """log N(y | mean_n, eps*V_n) for every component.

    y: (dim_y,) -> (N,), or (batch, dim_y) -> (batch, N).
    """
    _check_eps(eps)
    y = np.asarray(y, dtype=float)
    log_var = np.log(eps) + pot.log_vars  # (N, dim_y)
    return gauss_logpdf(y[..., None, :], pot.means, log_var)


def eval_potential(pot, y, eps):
    """Potential value at y. Scalar for a single point, (batch,) for a batch."""
    lp = pot.log_weights + component_logpdfs(pot, y, eps)
    out = eps * logsumexp(lp, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def grad_potential(pot, y, eps):
    """Gradients of eval_potential at a single point y.

    Returns (g_log_weights (N,), g_means (N, dim_y), g_log_vars (N, dim_y),
    g_y (dim_y,)). Component responsibilities act as mixing weights.
    """
    _check_eps(eps)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("grad_potential expects a single point")
    lp = pot.log_weights + component_logpdfs(pot, y, eps)
    resp = softmax(lp)  # (N,)
    inv_var = np.exp(-pot.log_vars)  # 1/V_n, the eps factor cancels below
    diff = y[None, :] - pot.means  # (N, dim_y)
    scaled = diff * inv_var / eps  # (y - mean) / (eps V)

    g_log_weights = eps * resp
    g_means = eps * resp[:, None] * scaled
    g_log_vars = eps * resp[:, None] * 0.5 * (diff * scaled - 1.0)
    g_y = -eps * np.sum(resp[:, None] * scaled, axis=0)
    return g_log_weights, g_means, g_log_vars, g_y


def potential_param_list(pot):
    return [pot.log_weights, pot.means, pot.log_vars]

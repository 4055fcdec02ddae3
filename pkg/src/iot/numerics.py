"""Shared numerical primitives: stable log-sum-exp, diagonal-Gaussian
log-density and sampling, and the PSD square-root trace term used by the
Frechet distance.

All probability arithmetic stays in the log domain; covariances are passed
around as log-diagonals so positivity is structural. Everything is float64.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(values, axis=None):
    """log(sum(exp(values))) computed with a max shift.

    Raises ValueError on an empty reduction.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("logsumexp of an empty array")
    vmax = np.max(v, axis=axis, keepdims=True)
    out = vmax + np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(values, axis=None):
    """exp(values) normalized along `axis` (whole array when None)."""
    v = np.asarray(values, dtype=float)
    vmax = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - vmax)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp_softmax(values, axis):
    """(logsumexp, softmax) along `axis` from one exp pass."""
    v = np.asarray(values, dtype=float)
    vmax = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - vmax)
    total = np.sum(e, axis=axis, keepdims=True)
    lse = np.squeeze(vmax + np.log(total), axis=axis)
    e /= total
    return lse, e


def gauss_logpdf(y, mean, log_var):
    """Log-density of a diagonal Gaussian.

    `log_var` is the log of the covariance diagonal. `y` may be a single
    point (dim,) or a batch (batch, dim); the batch form returns (batch,).
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    if y.shape[-1] != mean.shape[-1] or mean.shape[-1] != log_var.shape[-1]:
        raise ValueError(
            f"dimension mismatch: y {y.shape}, mean {mean.shape}, log_var {log_var.shape}"
        )
    diff = y - mean
    quad = diff * diff * np.exp(-log_var)
    return -0.5 * np.sum(quad + log_var + LOG_2PI, axis=-1)


def gauss_sample(rng, mean, log_var, n):
    """Draw `n` i.i.d. samples from a diagonal Gaussian, shape (n, dim)."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    mean = np.asarray(mean, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    if mean.shape != log_var.shape:
        raise ValueError("mean and log_var dimensions disagree")
    std = np.exp(0.5 * log_var)
    return mean + std * rng.standard_normal((n, mean.shape[-1]))


def psd_sqrt_trace_term(s1, s2, sym_tol=1e-8):
    """Tr(S1) + Tr(S2) - 2 Tr((S1^{1/2} S2 S1^{1/2})^{1/2}) for PSD S1, S2.

    Uses symmetric eigendecompositions; eigenvalues below zero (from
    round-off) are clamped to zero. Inputs asymmetric beyond `sym_tol`
    are rejected.
    """
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    for name, s in (("S1", s1), ("S2", s2)):
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"{name} must be a square matrix")
        if np.max(np.abs(s - s.T)) > sym_tol:
            raise ValueError(f"{name} is not symmetric within {sym_tol}")
    if s1.shape != s2.shape:
        raise ValueError("S1 and S2 shapes disagree")

    w1, u1 = np.linalg.eigh(0.5 * (s1 + s1.T))
    root1 = (u1 * np.sqrt(np.clip(w1, 0.0, None))) @ u1.T
    inner = root1 @ s2 @ root1
    w, _ = np.linalg.eigh(0.5 * (inner + inner.T))
    cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    return float(np.trace(s1) + np.trace(s2) - 2.0 * cross)

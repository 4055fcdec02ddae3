"""Synthetic data pipelines and dataset handling.

Provides the 2D Gaussian-to-Swiss-Roll task (pairs built by sampling
mini-batch entropic couplings under a rotation-aware cost, which makes the
conditionals bi-modal), an exactly-recoverable oracle task whose true
conditional lives inside the closed-form model family, and CSV I/O for the
three-file dataset layout (paired.csv / unpaired_x.csv / unpaired_y.csv).

Semi-supervised convention: the first P rows of both unpaired files
coincide with the paired rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .cost import CostParams
from .light_solver import build_conditional, conditional_logpdf, sample_conditional
from .mlp import LayerSpec, MLPParams, zero_mlp
from .numerics import logsumexp
from .potential import PotentialParams


@dataclass
class Dataset:
    paired_x: np.ndarray  # (P, dim_x)
    paired_y: np.ndarray  # (P, dim_y)
    unpaired_x: np.ndarray  # (Q, dim_x), first P rows == paired_x
    unpaired_y: np.ndarray  # (R, dim_y), first P rows == paired_y

    @property
    def n_paired(self):
        return self.paired_x.shape[0]

    def validate(self):
        p = self.n_paired
        if p < 1 or self.unpaired_x.shape[0] < p or self.unpaired_y.shape[0] < p:
            raise ValueError("need P >= 1 paired samples and P <= Q, P <= R")
        if self.paired_y.shape[0] != p:
            raise ValueError("paired halves disagree in length")
        if not np.array_equal(self.unpaired_x[:p], self.paired_x) or not np.array_equal(
            self.unpaired_y[:p], self.paired_y
        ):
            raise ValueError("unpaired prefixes must equal the paired samples")
        return self


@dataclass
class Coupling:
    matrix: np.ndarray  # (B, B), nonnegative
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool
    n_iters: int
    max_violation: float


def gaussian_points(n, dim, rng):
    return rng.standard_normal((n, dim))


def swiss_roll(n, noise_std, rng, scale=0.15):
    """2D spiral: radius grows linearly with angle; points land roughly in
    [-2.5, 2.5]^2 at the default scale."""
    if n < 1:
        raise ValueError("need n >= 1 points")
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
    pts = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    if noise_std > 0.0:
        pts = pts + noise_std * rng.standard_normal((n, 2))
    return pts


def sinkhorn(cost, a, b, reg, max_iters=5000, tol=1e-6, check_every=5):
    """Log-domain Sinkhorn scaling for the entropic coupling.

    Stops when the worst row/column marginal violation drops below `tol`
    (checked every `check_every` sweeps); otherwise returns the final
    iterate with converged=False.
    """
    cost = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not reg > 0.0:
        raise ValueError("reg must be positive")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9 or (a < 0).any() or (b < 0).any():
        raise ValueError("marginals must be probability vectors")
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    for it in range(1, max_iters + 1):
        f = reg * (log_a - logsumexp((g[None, :] - cost) / reg, axis=1))
        g = reg * (log_b - logsumexp((f[:, None] - cost) / reg, axis=0))
        if it % check_every == 0 or it == max_iters:
            plan = np.exp((f[:, None] + g[None, :] - cost) / reg)
            violation = max(
                np.max(np.abs(plan.sum(axis=1) - a)),
                np.max(np.abs(plan.sum(axis=0) - b)),
            )
            if violation <= tol:
                return Coupling(
                    plan, plan.sum(axis=1), plan.sum(axis=0), True, it, violation
                )
    return Coupling(plan, plan.sum(axis=1), plan.sum(axis=0), False, it, violation)


def _rot(deg):
    rad = np.deg2rad(deg)
    return np.array([[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]])


def rotation_cost(xs, ys, phi_deg=90.0):
    """Pairwise distances between x and -y rotated by +/- phi, taking the
    smaller of the two rotations per pair. 2D only."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[1] != 2 or ys.shape[1] != 2:
        raise ValueError("rotation cost is defined for 2D points only")
    c = np.empty((2, xs.shape[0], ys.shape[0]))
    for k, sign in enumerate((+1.0, -1.0)):
        targets = (-ys) @ _rot(sign * phi_deg).T
        diff = xs[:, None, :] - targets[None, :, :]
        c[k] = np.sqrt(np.sum(diff * diff, axis=-1))
    return np.minimum(c[0], c[1])


def minibatch_ot_pairs(
    sample_source, sample_target, cost_fn, n_pairs, rng, batch=64, reg=0.05
):
    """Build pairs by repeatedly coupling small batches.

    Each repetition draws `batch` source and target points, solves the
    entropic coupling for `cost_fn` (normalized to unit mean) and samples a
    single index pair from the plan. Per-repetition rng streams are spawned
    from `rng`, so repetitions are order-independent.

    Returns (xs (n_pairs, dx), ys (n_pairs, dy), all_converged).
    """
    if n_pairs < 1:
        raise ValueError("need n_pairs >= 1")
    uniform = np.full(batch, 1.0 / batch)
    out_x, out_y = [], []
    all_converged = True
    for child in rng.spawn(n_pairs):
        xs = sample_source(child, batch)
        ys = sample_target(child, batch)
        cost = cost_fn(xs, ys)
        cost = cost / np.mean(cost)
        coupling = sinkhorn(cost, uniform, uniform, reg)
        all_converged = all_converged and coupling.converged
        probs = coupling.matrix.reshape(-1)
        probs = np.clip(probs, 0.0, None)
        idx = child.choice(batch * batch, p=probs / probs.sum())
        out_x.append(xs[idx // batch])
        out_y.append(ys[idx % batch])
    return np.array(out_x), np.array(out_y), all_converged


def make_swiss_dataset(p, q, r, seed, noise_std=0.1, batch=64, reg=0.05):
    """Gaussian-to-Swiss-Roll dataset with P coupled pairs and Q/R unpaired
    samples (prefix convention)."""
    if p > min(q, r):
        raise ValueError("need P <= Q and P <= R")
    rng = np.random.default_rng(seed)
    px, py, converged = minibatch_ot_pairs(
        lambda g, n: gaussian_points(n, 2, g),
        lambda g, n: swiss_roll(n, noise_std, g),
        rotation_cost,
        p,
        rng,
        batch=batch,
        reg=reg,
    )
    if not converged:
        raise RuntimeError("mini-batch coupling did not converge; loosen reg or tol")
    ux = np.concatenate([px, gaussian_points(q - p, 2, rng)]) if q > p else px.copy()
    uy = np.concatenate([py, swiss_roll(r - p, noise_std, rng)]) if r > p else py.copy()
    return Dataset(px, py, ux, uy).validate()


@dataclass
class RecoverableOracle:
    """Ground-truth model for the oracle task; the true conditional lies
    exactly in the closed-form family."""

    cost: CostParams
    pot: PotentialParams
    eps: float

    def mixture(self, x):
        return build_conditional(self.cost, self.pot, np.atleast_1d(x), self.eps)

    def conditional_logpdf(self, x, y):
        return conditional_logpdf(self.mixture(x), y)

    def sample(self, x, n, rng):
        return sample_conditional(self.mixture(x), rng, n)


def _recoverable_truth():
    # two heads with opposite linear responses, two potential components
    vec = MLPParams(
        [LayerSpec(1, 2, "identity")],
        [np.array([[1.4], [-1.4]])],
        [np.array([0.3, -0.3])],
    )
    wts = zero_mlp([LayerSpec(1, 2, "log_softmax")])  # constant (1/2, 1/2)
    cost = CostParams(vec, wts, n_heads=2, dim_y=1)
    pot = PotentialParams(
        log_weights=np.array([0.0, 0.0]),
        means=np.array([[-1.2], [1.2]]),
        log_vars=np.log(np.array([[0.25], [0.25]])),
    )
    return RecoverableOracle(cost, pot, eps=1.0)


def make_recoverable_dataset(p, q, r, seed):
    """Oracle task: 1D inputs and outputs, pairs sampled exactly from the
    fixed ground-truth conditionals. Returns (Dataset, RecoverableOracle)."""
    if p > min(q, r):
        raise ValueError("need P <= Q and P <= R")
    oracle = _recoverable_truth()
    rng = np.random.default_rng(seed)

    def draw_pairs(n):
        xs = rng.standard_normal((n, 1))
        ys = np.empty((n, 1))
        for i in range(n):
            ys[i] = oracle.sample(xs[i], 1, rng)[0]
        return xs, ys

    px, py = draw_pairs(p)
    fx = rng.standard_normal((q - p, 1)) if q > p else np.empty((0, 1))
    _, fy = draw_pairs(r - p) if r > p else (None, np.empty((0, 1)))
    ds = Dataset(
        px, py, np.concatenate([px, fx]), np.concatenate([py, fy])
    ).validate()
    return ds, oracle


# CSV layout: UTF-8, '.' decimal, no index column; float cells use repr so
# rereading reproduces the exact doubles.


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_dataset(ds, directory):
    ds.validate()
    dx = ds.paired_x.shape[1]
    dy = ds.paired_y.shape[1]
    xcols = [f"x{i}" for i in range(dx)]
    ycols = [f"y{i}" for i in range(dy)]
    _write_csv(
        os.path.join(directory, "paired.csv"),
        xcols + ycols,
        np.concatenate([ds.paired_x, ds.paired_y], axis=1),
    )
    _write_csv(os.path.join(directory, "unpaired_x.csv"), xcols, ds.unpaired_x)
    _write_csv(os.path.join(directory, "unpaired_y.csv"), ycols, ds.unpaired_y)


def _read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = [line.strip().split(",") for line in fh if line.strip()]
    if data:
        arr = np.array([[float(v) for v in row] for row in data])
    else:
        arr = np.empty((0, len(header)))
    return header, arr


def read_dataset(directory):
    header, paired = _read_csv(os.path.join(directory, "paired.csv"))
    dx = sum(1 for h in header if h.startswith("x"))
    _, ux = _read_csv(os.path.join(directory, "unpaired_x.csv"))
    _, uy = _read_csv(os.path.join(directory, "unpaired_y.csv"))
    return Dataset(paired[:, :dx], paired[:, dx:], ux, uy).validate()

"""Evaluation tools: test log-likelihood, conditional Frechet distance,
grid KL against a known conditional, two-sample energy distance with a
permutation null, and the finite-difference gradient checker."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import psd_sqrt_trace_term

LOGPDF_FLOOR = -700.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (metric, value, stderr, n)
    metadata: dict = field(default_factory=dict)

    def add(self, metric, value, stderr=0.0, n=0):
        if not np.isfinite(value):
            raise ValueError(f"metric {metric} is not finite: {value!r}")
        self.rows.append((metric, float(value), float(stderr), int(n)))

    def value(self, metric):
        for name, value, _, _ in self.rows:
            if name == metric:
                return value
        raise KeyError(metric)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("metric,value,stderr,n\n")
            for name, value, stderr, n in self.rows:
                fh.write("%s,%r,%r,%d\n" % (name, value, stderr, n))


def test_log_likelihood(logpdf_fn, xs, ys):
    """Mean conditional log-density over test pairs. Returns (mean, stderr)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) == 0 or len(xs) != len(ys):
        raise ValueError("need a non-empty, aligned set of test pairs")
    vals = np.array([logpdf_fn(x, y) for x, y in zip(xs, ys)])
    return float(np.mean(vals)), float(np.std(vals) / np.sqrt(len(vals)))


def gaussian_frechet2(mean1, cov1, mean2, cov2):
    """Squared Frechet distance between two Gaussians."""
    diff = np.asarray(mean1, dtype=float) - np.asarray(mean2, dtype=float)
    return float(diff @ diff) + psd_sqrt_trace_term(cov1, cov2)


def _moments(samples, ridge):
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    ridged = False
    if not np.all(np.linalg.eigvalsh(0.5 * (cov + cov.T)) > 0.0):
        cov = cov + ridge * np.eye(cov.shape[0])
        ridged = True
    return mean, cov, ridged


def conditional_frechet_distance(sampler, groups, n_model_samples, rng, ridge=1e-6):
    """Average per-input squared Frechet distance between model samples and
    true samples.

    `sampler(x, n, rng)` draws model samples; `groups` is a list of
    (x, true_ys) with at least two true points per input. Degenerate sample
    covariances get a ridge and are counted in the returned report.

    Returns (value, per_x_values, n_ridged).
    """
    if n_model_samples < 2:
        raise ValueError("need at least two model samples per input")
    per_x = []
    n_ridged = 0
    for x, true_ys in groups:
        true_ys = np.asarray(true_ys, dtype=float)
        if len(true_ys) < 2:
            raise ValueError("every group needs at least two true samples")
        model_ys = sampler(np.asarray(x, dtype=float), n_model_samples, rng)
        m1, c1, r1 = _moments(model_ys, ridge)
        m2, c2, r2 = _moments(true_ys, ridge)
        n_ridged += int(r1) + int(r2)
        per_x.append(gaussian_frechet2(m1, c1, m2, c2))
    if not per_x:
        raise ValueError("no groups supplied")
    return float(np.mean(per_x)), per_x, n_ridged


@dataclass
class Grid:
    points: np.ndarray  # (G, dim)
    cell: float  # volume of one cell


def grid_1d(lo, hi, n):
    pts = np.linspace(lo, hi, n)
    return Grid(pts[:, None], float(pts[1] - pts[0]))


def grid_2d(box_x, box_y, n):
    gx = np.linspace(box_x[0], box_x[1], n)
    gy = np.linspace(box_y[0], box_y[1], n)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    cell = float((gx[1] - gx[0]) * (gy[1] - gy[0]))
    return Grid(np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1), cell)


def mixture_grid(mix, n=400, inflate=0.2):
    """Grid covering the support of a conditional mixture: component means
    +- 8 std, box inflated by `inflate` on each side."""
    stds = np.exp(0.5 * mix.comp_log_vars)  # (N, dim)
    lo = (mix.means - 8.0 * stds[None, :, :]).reshape(-1, mix.dim_y).min(axis=0)
    hi = (mix.means + 8.0 * stds[None, :, :]).reshape(-1, mix.dim_y).max(axis=0)
    pad = inflate * (hi - lo) / 2.0
    lo, hi = lo - pad, hi + pad
    if mix.dim_y == 1:
        return grid_1d(lo[0], hi[0], max(n * n // 100, 1000))
    if mix.dim_y == 2:
        return grid_2d((lo[0], hi[0]), (lo[1], hi[1]), n)
    raise ValueError("grids are provided for 1D and 2D targets only")


def grid_kl(true_logpdf, model_logpdf, x, grid, coverage_tol=1e-6):
    """KL(true || model) for the conditional at x, by quadrature on `grid`.

    The true density is renormalized on the grid; the grid must capture at
    least 1 - coverage_tol of its mass. Model log-densities are floored at
    -700 (a warning flags floored cells carrying true mass).
    """
    true_lp = np.asarray(true_logpdf(x, grid.points), dtype=float)
    mass = np.exp(true_lp) * grid.cell
    total = float(mass.sum())
    if total < 1.0 - coverage_tol:
        raise ValueError(f"grid covers only {total} of the true mass")
    probs = mass / total
    model_lp = np.asarray(model_logpdf(x, grid.points), dtype=float)
    floored = model_lp < LOGPDF_FLOOR
    if np.any(floored & (probs > 1e-12)):
        warnings.warn("model density underflowed on cells carrying true mass")
    model_lp = np.maximum(model_lp, LOGPDF_FLOOR)
    true_norm_lp = true_lp - np.log(total)
    return float(np.sum(probs * (true_norm_lp - model_lp)))


def _mean_pairwise_distance(a, b, chunk=512):
    total = 0.0
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        total += float(np.sqrt(np.sum(diff * diff, axis=-1)).sum())
    return total / (len(a) * len(b))


def energy_distance(a, b):
    """2 E|a-b| - E|a-a'| - E|b-b'| with all-pairs (V-statistic) means."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples on each side")
    return (
        2.0 * _mean_pairwise_distance(a, b)
        - _mean_pairwise_distance(a, a)
        - _mean_pairwise_distance(b, b)
    )


@dataclass
class PermutationTestResult:
    statistic: float
    threshold: float  # null quantile at 1 - level
    p_value: float
    level: float

    @property
    def passed(self):
        """True when the statistic is consistent with the null at `level`."""
        return self.statistic <= self.threshold


def energy_distance_test(a, b, rng, n_permutations=500, level=0.01):
    """Permutation test of the two-sample energy distance.

    The null resamples the pooled set into groups of the original sizes.
    Uses the pooled pairwise-distance matrix once; each permutation only
    needs one block sum, so 500 permutations at n=4000 stay tractable.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n, m = len(a), len(b)
    pooled = np.concatenate([a, b], axis=0)
    dist = np.empty((n + m, n + m), dtype=np.float32)
    chunk = 256
    for start in range(0, n + m, chunk):
        diff = pooled[start:start + chunk, None, :] - pooled[None, :, :]
        dist[start:start + chunk] = np.sqrt(np.sum(diff * diff, axis=-1))
    row_sums = dist.sum(axis=1, dtype=np.float64)
    s_all = float(row_sums.sum())

    def stat_for(idx_a):
        w_a = float(dist[np.ix_(idx_a, idx_a)].sum(dtype=np.float64))
        t_a = float(row_sums[idx_a].sum())
        cross = t_a - w_a
        w_b = s_all + w_a - 2.0 * t_a
        return 2.0 * cross / (n * m) - w_a / (n * n) - w_b / (m * m)

    statistic = stat_for(np.arange(n))
    null = np.empty(n_permutations)
    order = np.arange(n + m)
    for i in range(n_permutations):
        rng.shuffle(order)
        null[i] = stat_for(order[:n])
    threshold = float(np.quantile(null, 1.0 - level))
    p_value = float((np.sum(null >= statistic) + 1) / (n_permutations + 1))
    return PermutationTestResult(statistic, threshold, p_value, level)


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_index: int
    group_max: dict
    n_skipped: int


def gradcheck(fn, x0, h=1e-5, groups=None, denom_floor=1e-4):
    """Central-difference check of an analytic gradient.

    `fn(x)` returns (value, gradient) for a flat parameter vector. The
    relative error denominator is floored so exact zeros compare at a tight
    absolute tolerance. Coordinates where the perturbed loss is non-finite
    are skipped and counted.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    x0 = np.asarray(x0, dtype=float)
    value, grad = fn(x0)
    if not np.isfinite(value):
        raise ValueError("loss is not finite at the evaluation point")
    grad = np.asarray(grad, dtype=float)
    rel = np.zeros_like(x0)
    n_skipped = 0
    for i in range(x0.size):
        step = np.zeros_like(x0)
        step[i] = h
        f_plus, _ = fn(x0 + step)
        f_minus, _ = fn(x0 - step)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            n_skipped += 1
            continue
        fd = (f_plus - f_minus) / (2.0 * h)
        rel[i] = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), denom_floor)
    worst = int(np.argmax(rel))
    group_max = {}
    if groups:
        for name, sl in groups.items():
            seg = rel[sl]
            group_max[name] = float(seg.max()) if seg.size else 0.0
    return GradcheckReport(float(rel[worst]), worst, group_max, n_skipped)


def fit_two_component_gmm(points, rng, n_iters=100, n_restarts=3):
    """Small full-covariance EM fit with two components.

    Returns (weights (2,), means (2, d), covs (2, d, d)) of the best
    restart by in-sample log-likelihood.
    """
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    best = None
    best_ll = -np.inf
    for _ in range(n_restarts):
        idx = rng.choice(n, size=2, replace=False)
        means = points[idx].copy()
        covs = np.stack([np.cov(points, rowvar=False) + 1e-6 * np.eye(d)] * 2)
        weights = np.array([0.5, 0.5])
        for _ in range(n_iters):
            logp = np.stack(
                [_mvn_logpdf(points, means[k], covs[k]) + np.log(weights[k]) for k in range(2)],
                axis=1,
            )
            shift = logp.max(axis=1, keepdims=True)
            post = np.exp(logp - shift)
            post /= post.sum(axis=1, keepdims=True)
            nk = post.sum(axis=0) + 1e-12
            weights = nk / n
            means = (post.T @ points) / nk[:, None]
            for k in range(2):
                diff = points - means[k]
                covs[k] = (post[:, k, None] * diff).T @ diff / nk[k] + 1e-6 * np.eye(d)
        ll = float(np.sum(shift[:, 0] + np.log(np.exp(logp - shift).sum(axis=1))))
        if ll > best_ll:
            best_ll = ll
            best = (weights.copy(), means.copy(), covs.copy())
    return best


def _mvn_logpdf(points, mean, cov):
    d = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    solved = np.linalg.solve(chol, (points - mean).T)
    return -0.5 * (
        np.sum(solved * solved, axis=0)
        + 2.0 * np.sum(np.log(np.diag(chol)))
        + d * np.log(2.0 * np.pi)
    )

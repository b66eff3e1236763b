"""Evaluation utilities: ensemble distances, FPCA summaries, prediction.

The 2-Wasserstein distance between equal-size curve ensembles uses squared
L2 trapezoid ground cost and an exact optimal assignment.  FPCA summaries
(mean, leading eigenfunctions, pointwise median) are computed either from a
dense ensemble on the grid or from sparse irregular data via penalized
spline smoothing of pooled observations and centered cross-products.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .copula import psd_clip
from .dataset import IrregularDataset, RegularGrid, dataset_to_matrix
from .errors import ValidationError
from .regress import (PenalizedProblem, fit_reml, smoothing_spline_1d,
                      solve_fixed_lambda)
from .splines import BSplineBasis, make_bivariate, marginal_gram

logger = logging.getLogger(__name__)

MAX_ASSIGNMENT_SIZE = 2000
X_MARGIN = 0.05


def _times_of(grid) -> np.ndarray:
    if isinstance(grid, RegularGrid):
        return grid.values
    return np.asarray(grid, dtype=float)


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Quadrature weights w with sum(w * f) = trapezoid integral of f."""
    t = np.asarray(times, dtype=float)
    w = np.empty_like(t)
    w[1:-1] = 0.5 * (t[2:] - t[:-2])
    w[0] = 0.5 * (t[1] - t[0])
    w[-1] = 0.5 * (t[-1] - t[-2])
    return w


# ---------------------------------------------------------------------------
# Wasserstein distance
# ---------------------------------------------------------------------------


def wasserstein2(a: np.ndarray, b: np.ndarray, grid) -> float:
    """Empirical 2-Wasserstein distance between equal-size curve ensembles.

    Ground cost is the squared L2 distance by trapezoid on the grid; the
    optimal coupling is the exact assignment between the two ensembles.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValidationError(
            f"ensembles must have identical shape, got {a.shape} vs {b.shape}")
    if a.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise ValidationError(
            f"exact assignment limited to {MAX_ASSIGNMENT_SIZE} curves")
    w = trapezoid_weights(_times_of(grid))
    if a.shape[1] != len(w):
        raise ValidationError("curve length does not match the grid")
    aw = a * w
    sq_a = np.sum(aw * a, axis=1)
    sq_b = np.sum(b * w * b, axis=1)
    cost = sq_a[:, None] + sq_b[None, :] - 2.0 * (aw @ b.T)
    np.clip(cost, 0.0, None, out=cost)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


# ---------------------------------------------------------------------------
# Mean / covariance estimation from sparse data
# ---------------------------------------------------------------------------


def _fit_possibly_small(problem, fallback_lambda: float = 1e-8):
    """REML when the row count allows it, fixed small lambda otherwise."""
    if problem.n_rows >= problem.dim + 1:
        return fit_reml(problem)
    logger.warning("too few rows (%d) for REML at dim %d; using fixed lambda",
                   problem.n_rows, problem.dim)
    return solve_fixed_lambda(
        problem, np.full(len(problem.penalties), fallback_lambda))


def estimate_mean_curve(ds: IrregularDataset, dim: int = 10) -> np.ndarray:
    """Pooled penalized-spline mean on the grid, weights 1/(n*J_i)."""
    grid = ds.grid
    basis = BSplineBasis(dim, (grid.t_min, grid.t_max))
    penalty = [marginal_gram(basis, deriv=2)]
    n = ds.n_subjects

    def blocks():
        for s in ds.subjects:
            w = np.full(s.n_points, 1.0 / (n * s.n_points))
            yield basis.design_matrix(s.times), s.values, w

    problem = PenalizedProblem.from_blocks(blocks(), penalty)
    result = _fit_possibly_small(problem)
    return basis.design_matrix(grid.values) @ result.beta


def estimate_covariance_matrix(ds: IrregularDataset, mean_on_grid: np.ndarray,
                               dim: int = 10) -> np.ndarray:
    """Covariance surface from centered cross-products (off-diagonal pairs).

    Subject i contributes all ordered pairs j1 != j2 with weight
    1/(n * J_i * (J_i - 1)); the fitted surface is evaluated on the grid,
    symmetrized, and eigen-clipped to PSD.
    """
    grid = ds.grid
    mean_on_grid = np.asarray(mean_on_grid, dtype=float)
    domain = (grid.t_min, grid.t_max)
    tensor, penalties = make_bivariate(domain, domain, dim_1=dim)
    n = ds.n_subjects

    def blocks():
        for s in ds.subjects:
            j = s.n_points
            if j < 2:
                continue
            resid = s.values - mean_on_grid[s.grid_idx]
            off = ~np.eye(j, dtype=bool)
            t1 = np.repeat(s.times, j)[off.ravel()]
            t2 = np.tile(s.times, j)[off.ravel()]
            y = np.outer(resid, resid)[off]
            w = np.full(j * (j - 1), 1.0 / (n * j * (j - 1)))
            yield tensor.rows(t1, t2), y, w

    problem = PenalizedProblem.from_blocks(blocks(), penalties)
    if problem.n_rows == 0:
        raise ValidationError(
            "no subject has two or more observations; "
            "covariance surface is not estimable")
    result = _fit_possibly_small(problem)
    gv = grid.values
    raw = tensor.evaluate_grid(result.beta, gv, gv)
    return psd_clip(raw)


# ---------------------------------------------------------------------------
# FPCA summary
# ---------------------------------------------------------------------------


@dataclass
class FpcaSummary:
    """Mean, top-k eigenpairs, and (for dense input) pointwise median."""

    grid: RegularGrid
    mean: np.ndarray
    eigenfunctions: np.ndarray  # (k, n_grid), grid-orthonormal
    eigenvalues: np.ndarray  # (k,), functional scale, nonincreasing
    median: np.ndarray | None = None


def _align_sign(ef: np.ndarray, spacing: float) -> np.ndarray:
    """Flip so the inner product with the constant function 1 is >= 0."""
    s = float(np.sum(ef) * spacing)
    if s < 0:
        return -ef
    if s == 0:
        nz = np.nonzero(ef)[0]
        if nz.size and ef[nz[0]] < 0:
            return -ef
    return ef


def _eigen_from_matrix(cov: np.ndarray, grid: RegularGrid, k: int):
    """Top-k eigenpairs of the discretized kernel, functional scaling.

    Matrix eigenvectors v (unit Euclidean norm) become eigenfunctions
    v / sqrt(dt), orthonormal under the rectangle-rule inner product; matrix
    eigenvalues scale by dt.
    """
    dt = grid.spacing
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order][:k], 0.0, None)
    vecs = vecs[:, order][:, :k]
    efs = np.empty((k, grid.n_points))
    for a in range(k):
        efs[a] = _align_sign(vecs[:, a] / np.sqrt(dt), dt)
    return efs, vals * dt


def _smooth_on_grid(values: np.ndarray, grid: RegularGrid,
                    dim: int = 10) -> np.ndarray:
    curve = smoothing_spline_1d(list(zip(grid.values, values)), basis_dim=dim)
    return curve(grid.values)


def fpca_summary(data, grid: RegularGrid | None = None, k: int = 2,
                 mean_dim: int = 10, cov_dim: int = 10) -> FpcaSummary:
    """FPCA-style summary from a dense ensemble or sparse irregular data.

    Dense input (matrix or ensemble object): spline-smoothed column means,
    empirical covariance of the centered curves, pointwise median.  Sparse
    input (IrregularDataset): pooled spline mean and smoothed off-diagonal
    cross-product covariance; no median.
    """
    if isinstance(data, IrregularDataset):
        mean = estimate_mean_curve(data, dim=mean_dim)
        cov = estimate_covariance_matrix(data, mean, dim=cov_dim)
        efs, vals = _eigen_from_matrix(cov, data.grid, k)
        return FpcaSummary(grid=data.grid, mean=mean, eigenfunctions=efs,
                           eigenvalues=vals, median=None)

    if hasattr(data, "curves") and hasattr(data, "grid"):
        curves, grid = np.asarray(data.curves, dtype=float), data.grid
    else:
        if grid is None:
            raise ValidationError("matrix input needs an explicit grid")
        curves = np.atleast_2d(np.asarray(data, dtype=float))
    if curves.ndim != 2 or curves.shape[1] != grid.n_points:
        raise ValidationError("curve matrix does not match the grid")
    if curves.shape[0] < 2:
        raise ValidationError("need at least 2 curves for an FPCA summary")
    mean = _smooth_on_grid(curves.mean(axis=0), grid)
    centered = curves - mean[None, :]
    cov = psd_clip(centered.T @ centered / (curves.shape[0] - 1))
    efs, vals = _eigen_from_matrix(cov, grid, k)
    return FpcaSummary(grid=grid, mean=mean, eigenfunctions=efs,
                       eigenvalues=vals,
                       median=np.median(curves, axis=0))


def mse_against_truth(summary: FpcaSummary, truth) -> dict:
    """Integrated squared errors {MF, EF1, EF2, ..., MDF} against the truth.

    Eigenfunction errors take the minimum over the sign flip.  MDF appears
    only when the summary carries a median curve.
    """
    gv = summary.grid.values
    tmean = truth.mean_curve()
    if len(tmean) != len(gv):
        raise ValidationError("summary and truth use different grids")
    out = {"MF": float(np.trapezoid((summary.mean - tmean) ** 2, gv))}
    n_ef = min(summary.eigenfunctions.shape[0], truth.components.shape[1])
    for a in range(n_ef):
        ef = summary.eigenfunctions[a]
        psi = truth.components[:, a]
        out[f"EF{a + 1}"] = float(min(
            np.trapezoid((ef - psi) ** 2, gv),
            np.trapezoid((ef + psi) ** 2, gv)))
    if summary.median is not None:
        out["MDF"] = float(
            np.trapezoid((summary.median - truth.median_curve()) ** 2, gv))
    return out


# ---------------------------------------------------------------------------
# Prediction task
# ---------------------------------------------------------------------------


class TransitionModel:
    """One-step transition x -> f(x, t) fitted by bivariate penalized spline."""

    def __init__(self, basis, beta: np.ndarray, x_domain: tuple):
        self.basis = basis
        self.beta = np.asarray(beta, dtype=float)
        self.x_domain = (float(x_domain[0]), float(x_domain[1]))

    def __call__(self, x, t) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        x = np.clip(x, *self.x_domain)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
        return self.basis.rows(x, t) @ self.beta


def fit_transition(train_curves: np.ndarray, grid, dim: int = 5) -> TransitionModel:
    """Fit f with X(T_{j+1}) = f(X(T_j), T_j) from curves on the grid.

    NaN entries are allowed; a pair contributes only when both endpoints are
    observed.
    """
    curves = np.atleast_2d(np.asarray(train_curves, dtype=float))
    times = _times_of(grid)
    if curves.shape[1] != len(times):
        raise ValidationError("training curves do not match the grid")
    xs, ts, ys = [], [], []
    for j in range(len(times) - 1):
        ok = np.isfinite(curves[:, j]) & np.isfinite(curves[:, j + 1])
        if ok.any():
            xs.append(curves[ok, j])
            ts.append(np.full(int(ok.sum()), times[j]))
            ys.append(curves[ok, j + 1])
    if not xs:
        raise ValidationError("no valid consecutive training pairs")
    x = np.concatenate(xs)
    t = np.concatenate(ts)
    y = np.concatenate(ys)
    lo, hi = float(x.min()), float(x.max())
    margin = X_MARGIN * max(hi - lo, 1e-8)
    x_domain = (lo - margin, hi + margin)
    tensor, penalties = make_bivariate(
        x_domain, (float(times[0]), float(times[-1])), dim_1=dim)
    problem = PenalizedProblem.from_rows(tensor.rows(x, t), y,
                                         penalties=penalties)
    result = _fit_possibly_small(problem)
    return TransitionModel(tensor, result.beta, x_domain)


def prediction_task(train_curves, grid, validation, horizons=(1, 2, 3),
                    dim: int = 5) -> np.ndarray:
    """g-step-ahead square-root error sums on held-out validation curves.

    The fitted one-step map is applied recursively g times; a validation
    curve contributes at origin T_j only when it is observed at both T_j
    and T_{j+g}.  Errors are unnormalized square roots of the summed squared
    prediction errors, one per horizon.
    """
    times = _times_of(grid)
    model = fit_transition(train_curves, times, dim=dim)
    if isinstance(validation, IrregularDataset):
        val = dataset_to_matrix(validation)
    else:
        val = np.atleast_2d(np.asarray(validation, dtype=float))
    if val.shape[1] != len(times):
        raise ValidationError("validation curves do not match the grid")
    errors = []
    for g in horizons:
        g = int(g)
        if g < 1 or g >= len(times):
            raise ValidationError(f"horizon {g} outside 1..{len(times) - 1}")
        total = 0.0
        for j in range(len(times) - g):
            ok = np.isfinite(val[:, j]) & np.isfinite(val[:, j + g])
            if not ok.any():
                continue
            x = val[ok, j]
            for r in range(g):
                x = model(x, times[j + r])
            total += float(np.sum((val[ok, j + g] - x) ** 2))
        errors.append(np.sqrt(total))
    return np.asarray(errors)

"""Gaussian-process and KL-expansion baseline generators.

Both baselines estimate the mean and covariance from the sparse data by the
same penalized smoothing used for FPCA summaries, then sample new curves
either directly from the Gaussian model (GP) or from a truncated
eigen-expansion with independent Gaussian scores (KL).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .copula import psd_cholesky
from .dataset import IrregularDataset, RegularGrid
from .errors import NumericalError, ValidationError
from .evaluate import estimate_covariance_matrix, estimate_mean_curve
from .generator import GeneratedEnsemble

DEFAULT_KL_COMPONENTS = 4


@dataclass
class GaussianModel:
    """Mean curve and PSD covariance matrix on the working grid."""

    grid: RegularGrid
    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.grid.n_points
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise ValidationError("mean/covariance sizes do not match grid")

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = psd_cholesky(self.cov)
        return self._chol


def fit_gp(ds: IrregularDataset, mean_dim: int = 10,
           cov_dim: int = 10) -> GaussianModel:
    """Estimate the Gaussian model from sparse irregular data."""
    mean = estimate_mean_curve(ds, dim=mean_dim)
    cov = estimate_covariance_matrix(ds, mean, dim=cov_dim)
    return GaussianModel(grid=ds.grid, mean=mean, cov=cov)


def sample_gp(model: GaussianModel, m: int, seed=None) -> GeneratedEnsemble:
    """Draw m curves from the fitted Gaussian model."""
    if m < 1:
        raise ValidationError("need m >= 1 curves")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    z = rng.standard_normal((m, model.grid.n_points))
    curves = model.mean[None, :] + z @ model.chol.T
    return GeneratedEnsemble(curves=curves, grid=model.grid, seed=seed)


def sample_kl(model: GaussianModel, k: int = DEFAULT_KL_COMPONENTS,
              m: int = 1, seed=None) -> GeneratedEnsemble:
    """Draw m curves from the top-k eigen-expansion of the fitted model.

    Scores are independent Gaussians with the matrix eigenvalues as
    variances, so k equal to the grid size reproduces the GP sampler's
    distribution.
    """
    n = model.grid.n_points
    if not 0 <= k <= n:
        raise ValidationError(f"k must lie in 0..{n}")
    if m < 1:
        raise ValidationError("need m >= 1 curves")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    if k == 0:
        curves = np.tile(model.mean, (m, 1))
        return GeneratedEnsemble(curves=curves, grid=model.grid, seed=seed)
    vals, vecs = np.linalg.eigh(model.cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order][:k]
    vecs = vecs[:, order][:, :k]
    if vals[0] <= 0:
        raise NumericalError("leading covariance eigenvalue is not positive")
    scales = np.sqrt(np.clip(vals, 0.0, None))
    scores = rng.standard_normal((m, k)) * scales
    curves = model.mean[None, :] + scores @ vecs.T
    return GeneratedEnsemble(curves=curves, grid=model.grid, seed=seed)

"""Copula base models on the latent (denoised) scale.

Sparse curves are mapped back to time-zero latent scores with the reverse
flow; the cross-time dependence of those scores is summarised by a smooth
correlation surface rho(t, s).  Sampling new base curves then draws from a
Gaussian or Student-t copula whose correlation matrix is the surface
evaluated on the working grid, projected to the nearest valid correlation
matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky
from scipy.special import gammaln, ndtr, ndtri, stdtr, stdtrit
from scipy.stats import kendalltau, rankdata

from .dataset import IrregularDataset, RegularGrid
from .errors import NumericalError, ValidationError
from .flow import FlowMap, TensorSplineField, integrate_points
from .regress import PenalizedProblem, fit_reml
from .splines import TensorBasis2, make_bivariate

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian", "student-t")

# Clipping for probability-scale values before inverse CDF transforms.
_P_EPS = 1e-15

# Bounds for the degrees-of-freedom search, on the nu scale.
NU_BOUNDS = (2.05, 200.0)


# ---------------------------------------------------------------------------
# Latent scores
# ---------------------------------------------------------------------------


@dataclass
class LatentScores:
    """Per-subject latent scores obtained by reverse flow integration.

    ``times[i]``, ``grid_idx[i]`` and ``scores[i]`` are aligned arrays for
    subject ``ids[i]``.  ``n_dropped`` counts observation points discarded
    because the reverse integration produced non-finite values.
    """

    ids: list
    times: list
    grid_idx: list
    scores: list
    n_dropped: int = 0

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def n_points(self) -> int:
        return int(sum(len(s) for s in self.scores))

    def pooled(self):
        """All scores concatenated, with matching times."""
        if not self.scores:
            return np.empty(0), np.empty(0)
        return np.concatenate(self.times), np.concatenate(self.scores)


def latent_scores(dataset: IrregularDataset, fitted_field: TensorSplineField,
                  steps: int = 50) -> LatentScores:
    """Map every observed value back to its time-zero latent score.

    Runs the reverse flow from u=1 to u=0 for all observation points in one
    batched integration.
    """
    subjects = dataset.subjects
    t_all = np.concatenate([s.times for s in subjects])
    x_all = np.concatenate([s.values for s in subjects])
    fmap = FlowMap(fitted_field, direction="backward", steps=steps)
    z_all = integrate_points(fmap, t_all, x_all)

    ids, times, grid_idx, scores = [], [], [], []
    n_dropped = 0
    offset = 0
    for s in subjects:
        j = s.n_points
        z = z_all[offset:offset + j]
        offset += j
        keep = np.isfinite(z)
        n_dropped += int(j - keep.sum())
        if not keep.any():
            continue
        ids.append(s.id)
        times.append(s.times[keep])
        grid_idx.append(s.grid_idx[keep])
        scores.append(z[keep])
    if n_dropped:
        logger.warning("dropped %d non-finite latent scores", n_dropped)
    if not ids:
        raise NumericalError("reverse flow produced no finite latent scores")
    return LatentScores(ids=ids, times=times, grid_idx=grid_idx,
                        scores=scores, n_dropped=n_dropped)


# ---------------------------------------------------------------------------
# Correlation matrix projection
# ---------------------------------------------------------------------------


def nearest_correlation(matrix: np.ndarray, max_rounds: int = 20) -> np.ndarray:
    """Project a symmetric matrix to a valid correlation matrix.

    Clips negative eigenvalues to zero and rescales to a unit diagonal,
    repeating until the numerically computed spectrum is nonnegative.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("nearest_correlation expects a square matrix")
    a = 0.5 * (a + a.T)
    for _ in range(max_rounds):
        if (np.linalg.eigvalsh(a)[0] >= 0.0
                and np.max(np.abs(np.diag(a) - 1.0)) <= 1e-13):
            return a
        w, v = np.linalg.eigh(a)
        if w[-1] <= 0.0:
            raise NumericalError(
                "correlation projection got a nonpositive spectrum; "
                "the estimated surface is degenerate")
        # Clip to a small positive floor rather than zero so the projected
        # matrix stays strictly PD under any eigenvalue routine's rounding.
        w = np.clip(w, 1e-10 * w[-1], None)
        a = (v * w) @ v.T
        d = np.diag(a).copy()
        if np.min(d) <= 0.0:
            raise NumericalError(
                "correlation projection hit a zero diagonal; "
                "the estimated surface is degenerate")
        scale = 1.0 / np.sqrt(d)
        a = a * scale[:, None] * scale[None, :]
        a = 0.5 * (a + a.T)
        np.fill_diagonal(a, 1.0)
    raise NumericalError(
        f"correlation projection did not converge in {max_rounds} rounds")


def psd_clip(matrix: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero (no rescaling)."""
    a = np.asarray(matrix, dtype=float)
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    if w[0] >= 0.0:
        return a
    w = np.clip(w, 0.0, None)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def psd_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, tolerating a semidefinite matrix via jitter."""
    a = np.asarray(matrix, dtype=float)
    try:
        return cholesky(a, lower=True)
    except np.linalg.LinAlgError:
        pass
    norm = float(np.linalg.norm(a, 2))
    jitter = 1e-8 * (norm if norm > 0 else 1.0)
    try:
        return cholesky(a + jitter * np.eye(a.shape[0]), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "correlation matrix is not positive semidefinite "
            "even after jitter") from exc


# ---------------------------------------------------------------------------
# Correlation surface
# ---------------------------------------------------------------------------


@dataclass
class CorrelationSurface:
    """Smooth correlation surface with its grid evaluation.

    ``grid_matrix`` is the surface evaluated on ``grid`` and projected to a
    valid correlation matrix; it is the matrix actually used for sampling.
    """

    basis: TensorBasis2
    coef: np.ndarray
    grid: RegularGrid
    grid_matrix: np.ndarray
    fit_info: dict = field(default_factory=dict)

    FORMAT = 1

    def rho(self, t, s):
        """Raw (unprojected) surface values at time pairs."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo, hi = self.grid.t_min, self.grid.t_max
        t = np.clip(t, lo, hi)
        s = np.clip(s, lo, hi)
        b1, b2 = self.basis.bases
        d1 = b1.design_matrix(t)
        d2 = b2.design_matrix(s)
        c = self.coef.reshape(self.basis.dims)
        vals = np.einsum("na,ab,nb->n", d1, c, d2)
        return vals if vals.size > 1 else float(vals[0])

    def to_dict(self) -> dict:
        return {
            "format": self.FORMAT,
            "basis": self.basis.to_dict(),
            "coef": np.asarray(self.coef, dtype=float).tolist(),
            "grid": self.grid.to_dict(),
            "grid_matrix": np.asarray(self.grid_matrix, dtype=float).tolist(),
            "fit_info": dict(self.fit_info),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorrelationSurface":
        if data.get("format") != cls.FORMAT:
            raise ValidationError("unsupported correlation surface format")
        return cls(
            basis=TensorBasis2.from_dict(data["basis"]),
            coef=np.asarray(data["coef"], dtype=float),
            grid=RegularGrid.from_dict(data["grid"]),
            grid_matrix=np.asarray(data["grid_matrix"], dtype=float),
            fit_info=dict(data.get("fit_info", {})),
        )


def estimate_surface(scores: LatentScores, grid: RegularGrid,
                     dim: int = 10) -> CorrelationSurface:
    """Fit a smooth correlation surface to latent score cross-products.

    For subject i with J_i scores, all J_i^2 ordered pairs (including the
    diagonal) contribute rows s_j1 * s_j2 with weight 1 / (n * J_i^2).
    """
    n = scores.n_subjects
    if n < 2:
        raise ValidationError("correlation surface needs at least 2 subjects")
    pooled = np.concatenate(scores.scores)
    if pooled.size and float(np.var(pooled)) < 1e-12:
        raise NumericalError(
            "latent scores are (numerically) constant; "
            "correlation surface is degenerate")
    domain = (grid.t_min, grid.t_max)
    tensor, penalties = make_bivariate(domain, domain, dim_1=dim)

    def blocks():
        for times, vals in zip(scores.times, scores.scores):
            j = len(times)
            if j == 0:
                continue
            t1 = np.repeat(times, j)
            t2 = np.tile(times, j)
            y = np.outer(vals, vals).ravel()
            w = np.full(j * j, 1.0 / (n * j * j))
            yield tensor.rows(t1, t2), y, w

    problem = PenalizedProblem.from_blocks(blocks(), penalties)
    result = fit_reml(problem)
    gv = grid.values
    raw = tensor.evaluate_grid(result.beta, gv, gv)
    projected = nearest_correlation(raw)
    info = {
        "lambdas": [float(v) for v in result.lambdas],
        "sigma2": float(result.sigma2),
        "edf": float(result.edf),
        "reml": float(result.reml),
        "converged": bool(result.converged),
        "n_pairs": int(sum(len(s) ** 2 for s in scores.scores)),
    }
    return CorrelationSurface(basis=tensor, coef=result.beta, grid=grid,
                              grid_matrix=projected, fit_info=info)


# ---------------------------------------------------------------------------
# Degrees of freedom estimation (Student-t family)
# ---------------------------------------------------------------------------


def bivariate_t_copula_logpdf(u, v, rho: float, nu: float) -> np.ndarray:
    """Log density of the bivariate Student-t copula at (u, v)."""
    if not -1.0 < rho < 1.0:
        raise ValidationError("rho must lie strictly inside (-1, 1)")
    if nu <= 2.0:
        raise ValidationError("nu must exceed 2")
    u = np.clip(np.asarray(u, dtype=float), _P_EPS, 1.0 - _P_EPS)
    v = np.clip(np.asarray(v, dtype=float), _P_EPS, 1.0 - _P_EPS)
    x = stdtrit(nu, u)
    y = stdtrit(nu, v)
    om = 1.0 - rho * rho
    quad = (x * x - 2.0 * rho * x * y + y * y) / om
    log_joint = (gammaln(0.5 * (nu + 2.0)) - gammaln(0.5 * nu)
                 - np.log(nu * np.pi) - 0.5 * np.log(om)
                 - 0.5 * (nu + 2.0) * np.log1p(quad / nu))

    def log_marg(z):
        return (gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu)
                - 0.5 * np.log(nu * np.pi)
                - 0.5 * (nu + 1.0) * np.log1p(z * z / nu))

    return log_joint - log_marg(x) - log_marg(y)


def _golden_max(fun, lo: float, hi: float, iters: int = 45):
    """Golden-section maximization on [lo, hi]; returns (argmax, max)."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    if fc >= fd:
        return c, fc
    return d, fd


def estimate_nu(values: np.ndarray, min_pairs: int = 10,
                nu_bounds=NU_BOUNDS) -> float:
    """Estimate Student-t copula degrees of freedom from a score matrix.

    ``values`` is (n_subjects, n_columns) with NaN marking missing entries;
    columns are time points, rows are subjects.  Pairwise correlations come
    from Kendall's tau (rho = sin(pi * tau / 2)); the single nu is chosen by
    maximizing the summed pairwise t-copula log likelihood over pseudo
    observations rank / (n_j + 1).
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 2:
        raise ValidationError("estimate_nu expects a 2-d score matrix")
    n, d = vals.shape
    obs = np.isfinite(vals)

    pseudo = np.full_like(vals, np.nan)
    for j in range(d):
        mask = obs[:, j]
        nj = int(mask.sum())
        if nj:
            pseudo[mask, j] = rankdata(vals[mask, j]) / (nj + 1.0)

    pairs = []
    usable = 0
    for j in range(d):
        for k in range(j + 1, d):
            mask = obs[:, j] & obs[:, k]
            m = int(mask.sum())
            if m < min_pairs:
                continue
            usable += 1
            tau = kendalltau(vals[mask, j], vals[mask, k]).statistic
            if not np.isfinite(tau):
                continue
            rho = float(np.clip(np.sin(0.5 * np.pi * tau), -0.999, 0.999))
            pairs.append((pseudo[mask, j], pseudo[mask, k], rho))
    if not pairs:
        raise ValidationError(
            f"no column pair has at least {min_pairs} common observations "
            f"({usable} usable pairs)")

    def loglik_of_lognu(s):
        nu = 2.0 + np.exp(s)
        total = 0.0
        for u, v, rho in pairs:
            total += float(np.sum(bivariate_t_copula_logpdf(u, v, rho, nu)))
        return total

    lo = np.log(nu_bounds[0] - 2.0)
    hi = np.log(nu_bounds[1] - 2.0)
    s_hat, _ = _golden_max(loglik_of_lognu, lo, hi)
    nu_hat = 2.0 + float(np.exp(s_hat))
    # A maximum pinned to the upper bracket end means "effectively Gaussian".
    if nu_hat > nu_bounds[1] * 0.999:
        return float(nu_bounds[1])
    return nu_hat


def scores_to_matrix(scores: LatentScores, grid: RegularGrid) -> np.ndarray:
    """Arrange latent scores as an (n_subjects, n_grid) matrix with NaN."""
    out = np.full((scores.n_subjects, grid.n_points), np.nan)
    for i, (idx, vals) in enumerate(zip(scores.grid_idx, scores.scores)):
        out[i, idx] = vals
    return out


def t_transform_scores(scores: LatentScores, nu: float) -> LatentScores:
    """Map Gaussian-scale scores to rescaled Student-t scale.

    Applies s -> t_nu^{-1}(Phi(s)) * sqrt((nu - 2) / nu) so the transformed
    scores have unit variance under the t model.
    """
    if nu <= 2.0:
        raise ValidationError("nu must exceed 2 for the t transform")
    factor = np.sqrt((nu - 2.0) / nu)
    new_scores = []
    for s in scores.scores:
        p = np.clip(ndtr(s), _P_EPS, 1.0 - _P_EPS)
        new_scores.append(stdtrit(nu, p) * factor)
    return LatentScores(ids=list(scores.ids), times=list(scores.times),
                        grid_idx=list(scores.grid_idx), scores=new_scores,
                        n_dropped=scores.n_dropped)


# ---------------------------------------------------------------------------
# Base model and sampling
# ---------------------------------------------------------------------------


class CopulaBaseModel:
    """Base-curve distribution: a copula family plus a correlation surface."""

    FORMAT = 1

    def __init__(self, family: str, surface: CorrelationSurface,
                 nu: float | None = None):
        if family not in FAMILIES:
            raise ValidationError(
                f"family must be one of {FAMILIES}, got {family!r}")
        if family == "student-t":
            if nu is None or not np.isfinite(nu) or nu <= 2.0:
                raise ValidationError(
                    "student-t family needs finite nu > 2")
            nu = float(nu)
        else:
            nu = None
        self.family = family
        self.surface = surface
        self.nu = nu
        self._chol = psd_cholesky(surface.grid_matrix)

    @property
    def grid(self) -> RegularGrid:
        return self.surface.grid

    def to_dict(self) -> dict:
        return {
            "format": self.FORMAT,
            "family": self.family,
            "nu": self.nu,
            "surface": self.surface.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CopulaBaseModel":
        if data.get("format") != cls.FORMAT:
            raise ValidationError("unsupported base model format")
        return cls(family=data["family"],
                   surface=CorrelationSurface.from_dict(data["surface"]),
                   nu=data.get("nu"))


def sample_base(model: CopulaBaseModel, m: int, seed=None) -> np.ndarray:
    """Draw m base curves on the model grid; returns (m, n_grid) N(0,1) margins."""
    if m < 0:
        raise ValidationError("sample count must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    npts = model.grid.n_points
    if m == 0:
        return np.empty((0, npts))
    z = rng.standard_normal((m, npts))
    w = z @ model._chol.T
    if model.family == "gaussian":
        return w
    nu = model.nu
    chi2 = rng.chisquare(nu, size=m)
    t_vals = w / np.sqrt(chi2 / nu)[:, None]
    p = np.clip(stdtr(nu, t_vals), _P_EPS, 1.0 - _P_EPS)
    return ndtri(p)

"""Synthetic ground-truth generators for the desk-scale experiments.

Latent curves follow a Karhunen-Loeve expansion: a random smooth mean plus
K Fourier components with decaying score scales.  The Gaussian case observes
the latent curves directly; the Gamma case pushes each latent value through
its exact marginal CDF and the Gamma(0.5, 1) quantile, producing positive,
heavy-tailed margins while keeping the latent dependence.  Observation
designs are sparse and irregular: J_i grid times per subject, drawn without
replacement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import gammaincinv, ndtr

from .dataset import DEFAULT_GRID_SIZE, IrregularDataset, RegularGrid, Subject
from .errors import ValidationError

MEAN_DEGREE = 4
DEFAULT_COMPONENTS = 4
DEFAULT_MEAN_DIM = 6
GAMMA_SHAPE = 0.5

# Expected squared L2 norm of the random mean; this single knob fixes the
# absolute signal scale of the experiments (component scales are tied to
# ||mu||), independent of the mean basis size.
TARGET_MEAN_SQ = 1.1

_P_EPS = 1e-15


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Bases
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _mean_basis(dim: int):
    """Degree-4 B-spline basis on [0,1] with its coefficient scale.

    Returns (spline, coef_sd) where coef_sd makes i.i.d. N(0, coef_sd^2)
    coefficients give E||mu||^2 = TARGET_MEAN_SQ exactly (via the basis Gram
    trace), so the signal scale does not drift with the basis size.
    """
    k = MEAN_DEGREE
    if dim < k + 1:
        raise ValidationError(f"mean basis dim must be >= {k + 1}")
    edges = np.linspace(0.0, 1.0, dim - k + 1)
    knots = np.concatenate([np.zeros(k + 1), edges[1:-1], np.ones(k + 1)])
    spline = BSpline(knots, np.eye(dim), k, extrapolate=True)
    # Exact Gram trace by Gauss-Legendre per knot cell (degree 8 integrand).
    gx, gw = np.polynomial.legendre.leggauss(8)
    trace = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        design = spline(0.5 * (a + b) + half * gx)
        trace += float(np.sum(design * design * (half * gw)[:, None]))
    return spline, float(np.sqrt(TARGET_MEAN_SQ / trace))


def mean_design(t, dim: int = DEFAULT_MEAN_DIM) -> np.ndarray:
    """Design matrix of the quartic mean basis at times t."""
    spline, _ = _mean_basis(dim)
    t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, 1.0)
    return spline(t)


def mean_coef_sd(dim: int = DEFAULT_MEAN_DIM) -> float:
    """SD of the i.i.d. mean coefficients for a given basis size."""
    return _mean_basis(dim)[1]


def fourier_components(t, k: int) -> np.ndarray:
    """First k non-constant Fourier functions on [0,1], unit L2 norm.

    Columns alternate sqrt(2) sin(2 pi r t), sqrt(2) cos(2 pi r t) for
    r = 1, 2, ...
    """
    if k < 1:
        raise ValidationError("component count must be >= 1")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((len(t), k))
    for idx in range(1, k + 1):
        r = (idx + 1) // 2
        phase = 2.0 * np.pi * r * t
        out[:, idx - 1] = np.sqrt(2.0) * (
            np.sin(phase) if idx % 2 == 1 else np.cos(phase))
    return out


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass
class KlSpec:
    """One realization of the data-generating KL expansion."""

    k: int
    mean_dim: int
    mean_coeffs: np.ndarray
    sigmas: np.ndarray
    seed: object = None

    def __post_init__(self):
        self.mean_coeffs = np.asarray(self.mean_coeffs, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        if self.k < 1:
            raise ValidationError("K must be >= 1")
        if len(self.sigmas) != self.k or np.any(self.sigmas <= 0):
            raise ValidationError("need K positive component scales")
        if len(self.mean_coeffs) != self.mean_dim:
            raise ValidationError("mean_coeffs length must equal mean_dim")

    @classmethod
    def draw(cls, seed, k: int = DEFAULT_COMPONENTS,
             mean_dim: int = DEFAULT_MEAN_DIM,
             grid: RegularGrid | None = None) -> "KlSpec":
        """Draw the mean coefficients and derive the component scales.

        Coefficients are i.i.d. normal with the scale from mean_coef_sd;
        sigma_k = ||mu|| * exp((5 - k) / 5) / 2 with ||mu|| the L2 norm by
        trapezoid on the working grid.
        """
        rng = _as_rng(seed)
        if grid is None:
            grid = RegularGrid(0.0, 1.0, DEFAULT_GRID_SIZE)
        coeffs = rng.standard_normal(mean_dim) * mean_coef_sd(mean_dim)
        mu = mean_design(grid.values, mean_dim) @ coeffs
        norm = float(np.sqrt(np.trapezoid(mu * mu, grid.values)))
        ks = np.arange(1, k + 1)
        sigmas = norm * np.exp((5.0 - ks) / 5.0) / 2.0
        return cls(k=k, mean_dim=mean_dim, mean_coeffs=coeffs,
                   sigmas=sigmas, seed=None if isinstance(seed, np.random.Generator) else seed)

    def mean(self, t) -> np.ndarray:
        return mean_design(t, self.mean_dim) @ self.mean_coeffs

    def components(self, t) -> np.ndarray:
        return fourier_components(t, self.k)

    def latent_sd(self, t) -> np.ndarray:
        """Pointwise SD of the latent process (clipped away from zero)."""
        psi = self.components(t)
        var = psi * psi @ (self.sigmas ** 2)
        return np.sqrt(np.clip(var, 1e-24, None))


@dataclass
class SamplingSpec:
    """Sparse observation design: n subjects, J_i uniform on j_range."""

    n: int
    j_range: tuple
    grid: RegularGrid = field(
        default_factory=lambda: RegularGrid(0.0, 1.0, DEFAULT_GRID_SIZE))
    noise_level: float = 0.0

    def __post_init__(self):
        self.j_range = (int(self.j_range[0]), int(self.j_range[1]))
        lo, hi = self.j_range
        if self.n < 1:
            raise ValidationError("need at least one subject")
        if not 2 <= lo <= hi <= self.grid.n_points:
            raise ValidationError(
                f"j_range must satisfy 2 <= lo <= hi <= {self.grid.n_points}, "
                f"got {self.j_range}")
        if not np.isfinite(self.noise_level) or self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")


# ---------------------------------------------------------------------------
# Truth oracle
# ---------------------------------------------------------------------------


def gamma_median() -> float:
    """Median of Gamma(0.5, 1)."""
    return float(gammaincinv(GAMMA_SHAPE, 0.5))


def _gamma_transform(latent: np.ndarray, mean: np.ndarray,
                     sd: np.ndarray) -> np.ndarray:
    """Push latent values through their exact marginal CDF into Gamma(0.5,1)."""
    z = (latent - mean) / sd
    p = np.clip(ndtr(z), _P_EPS, 1.0 - _P_EPS)
    return gammaincinv(GAMMA_SHAPE, p)


@dataclass
class TruthOracle:
    """Ground-truth summaries on the working grid, plus fresh sampling.

    ``components`` columns are the true eigenfunctions (orthonormal Fourier),
    with eigenvalues sigmas**2 in decreasing order.
    """

    kind: str
    grid: RegularGrid
    mean: np.ndarray
    components: np.ndarray
    sigmas: np.ndarray

    FORMAT = 1

    def __post_init__(self):
        if self.kind not in ("gaussian", "gamma"):
            raise ValidationError("truth kind must be 'gaussian' or 'gamma'")
        self.mean = np.asarray(self.mean, dtype=float)
        self.components = np.asarray(self.components, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.sigmas ** 2

    @property
    def latent_sd(self) -> np.ndarray:
        var = self.components ** 2 @ (self.sigmas ** 2)
        return np.sqrt(np.clip(var, 1e-24, None))

    def mean_curve(self) -> np.ndarray:
        """True mean function on the grid (latent mean for the Gaussian case)."""
        if self.kind == "gaussian":
            return self.mean.copy()
        # Gamma margins are Gamma(0.5, 1) at every t: mean = shape = 0.5.
        return np.full(self.grid.n_points, GAMMA_SHAPE)

    def median_curve(self) -> np.ndarray:
        if self.kind == "gaussian":
            return self.mean.copy()
        return np.full(self.grid.n_points, gamma_median())

    def sample_dense(self, m: int, seed) -> np.ndarray:
        """m fresh curves on the grid from the true model."""
        rng = _as_rng(seed)
        xi = rng.standard_normal((m, len(self.sigmas))) * self.sigmas
        latent = self.mean[None, :] + xi @ self.components.T
        if self.kind == "gaussian":
            return latent
        return _gamma_transform(latent, self.mean[None, :],
                                self.latent_sd[None, :])

    def to_dict(self) -> dict:
        return {
            "format": self.FORMAT,
            "kind": self.kind,
            "grid": self.grid.to_dict(),
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "sigmas": self.sigmas.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TruthOracle":
        if data.get("format") != cls.FORMAT:
            raise ValidationError("unsupported truth oracle format")
        return cls(kind=data["kind"], grid=RegularGrid.from_dict(data["grid"]),
                   mean=np.asarray(data["mean"], dtype=float),
                   components=np.asarray(data["components"], dtype=float),
                   sigmas=np.asarray(data["sigmas"], dtype=float))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "TruthOracle":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Simulators
# ---------------------------------------------------------------------------


def _truth_from_spec(kind: str, spec: KlSpec, grid: RegularGrid) -> TruthOracle:
    return TruthOracle(kind=kind, grid=grid,
                       mean=spec.mean(grid.values),
                       components=spec.components(grid.values),
                       sigmas=spec.sigmas.copy())


def _draw_design(rng, sampling: SamplingSpec):
    """Per-subject observation indices: J_i uniform, times without replacement."""
    lo, hi = sampling.j_range
    n_grid = sampling.grid.n_points
    designs = []
    for _ in range(sampling.n):
        j = int(rng.integers(lo, hi + 1))
        idx = np.sort(rng.choice(n_grid, size=j, replace=False))
        designs.append(idx)
    return designs


def _build_dataset(subject_values, sampling: SamplingSpec) -> IrregularDataset:
    grid = sampling.grid
    subjects = [
        Subject(id=f"subj{i:04d}", times=grid.values[idx], values=vals,
                grid_idx=idx)
        for i, (idx, vals) in enumerate(subject_values)
    ]
    return IrregularDataset(subjects=subjects, grid=grid)


def simulate_gaussian(spec: KlSpec, sampling: SamplingSpec,
                      seed=None) -> tuple:
    """Sparse draws from the Gaussian KL model; returns (dataset, truth)."""
    rng = _as_rng(seed)
    designs = _draw_design(rng, sampling)
    rows = []
    for idx in designs:
        t = sampling.grid.values[idx]
        xi = rng.standard_normal(spec.k) * spec.sigmas
        x = spec.mean(t) + spec.components(t) @ xi
        rows.append((idx, x))
    ds = _build_dataset(rows, sampling)
    if sampling.noise_level > 0:
        ds = add_noise(ds, sampling.noise_level, rng)
    return ds, _truth_from_spec("gaussian", spec, sampling.grid)


def simulate_gamma(spec: KlSpec, sampling: SamplingSpec, seed=None) -> tuple:
    """Gamma-transformed draws: margins exactly Gamma(0.5, 1) at every time."""
    rng = _as_rng(seed)
    designs = _draw_design(rng, sampling)
    rows = []
    for idx in designs:
        t = sampling.grid.values[idx]
        xi = rng.standard_normal(spec.k) * spec.sigmas
        latent = spec.mean(t) + spec.components(t) @ xi
        x = _gamma_transform(latent, spec.mean(t), spec.latent_sd(t))
        rows.append((idx, x))
    ds = _build_dataset(rows, sampling)
    if sampling.noise_level > 0:
        ds = add_noise(ds, sampling.noise_level, rng)
    return ds, _truth_from_spec("gamma", spec, sampling.grid)


def simulate(kind: str, sampling: SamplingSpec, seed,
             k: int = DEFAULT_COMPONENTS,
             mean_dim: int = DEFAULT_MEAN_DIM) -> tuple:
    """One-seed convenience wrapper: draws the KL spec, then the data."""
    if kind not in ("gaussian", "gamma"):
        raise ValidationError("kind must be 'gaussian' or 'gamma'")
    rng = _as_rng(seed)
    spec = KlSpec.draw(rng, k=k, mean_dim=mean_dim, grid=sampling.grid)
    sim = simulate_gaussian if kind == "gaussian" else simulate_gamma
    return sim(spec, sampling, rng)


def add_noise(ds: IrregularDataset, noise_level: float,
              seed=None) -> IrregularDataset:
    """Add mean-zero Gaussian noise with per-subject variance.

    Variance for subject i is (1/J_i) sum_j X_i(T_ij)^2 * noise_level.
    """
    if not np.isfinite(noise_level) or noise_level < 0:
        raise ValidationError("noise_level must be >= 0")
    if noise_level == 0:
        return ds
    rng = _as_rng(seed)
    subjects = []
    for s in ds.subjects:
        sd = float(np.sqrt(np.mean(s.values ** 2) * noise_level))
        noisy = s.values + rng.normal(0.0, sd, size=s.n_points)
        subjects.append(Subject(id=s.id, times=s.times.copy(), values=noisy,
                                grid_idx=s.grid_idx.copy()))
    return IrregularDataset(subjects=subjects, grid=ds.grid)

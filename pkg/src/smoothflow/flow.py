"""Flow-matching training assembly, vector-field fitting, and RK4 flow maps.

The vector field V(u, t, x) lives on [0,1] x time-domain x value-domain and is
represented on a tensor-product cubic B-spline basis.  Training rows follow
the rectified-flow recipe: draw white standard-normal base curves Z0 on the
grid, interpolate Z_u = (1-u) Z0 + u X along a fixed u-grid, and regress the
displacement X - Z0 on the basis at (u, t, Z_u) with subject-balanced weights.
Forward integration of dx/du = V(u, t, x) maps base curves to synthetic
curves; backward integration (dx/du = -V(1-u, t, x)) inverts the transport.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IrregularDataset, RegularGrid
from .errors import NumericalError, ValidationError
from .regress import FitResult, PenalizedProblem, fit_reml
from .splines import BSplineBasis, TensorBasis3, penalty_matrices

X_MARGIN = 0.05  # widen the value domain by this fraction of the data range


@dataclass
class FlowTrainingConfig:
    H: int = 10            # base-curve pool size
    F: int = 15            # u-grid size (endpoints included)
    L_u: int = 6
    L_t: int = 6
    L_x: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.H < 1:
            raise ValidationError(f"H must be >= 1, got {self.H}")
        if self.F < 2:
            raise ValidationError(f"F must be >= 2, got {self.F}")
        for name in ("L_u", "L_t", "L_x"):
            if getattr(self, name) < 4:
                raise ValidationError(f"{name} must be >= 4, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {"H": self.H, "F": self.F, "L_u": self.L_u, "L_t": self.L_t,
                "L_x": self.L_x, "seed": self.seed}


class TensorSplineField:
    """V(u, t, x) on a 3D tensor spline; x is clamped into the value domain."""

    FORMAT = 1

    def __init__(self, tensor: TensorBasis3, beta: np.ndarray,
                 x_domain: tuple[float, float], fit_info: dict | None = None):
        beta = np.asarray(beta, float)
        if beta.shape != (tensor.dim,):
            raise ValidationError(f"beta must have length {tensor.dim}")
        if not np.all(np.isfinite(beta)):
            raise ValidationError("non-finite field coefficients")
        self.tensor = tensor
        self.beta = beta
        self.x_domain = (float(x_domain[0]), float(x_domain[1]))
        self.fit_info = fit_info or {}
        self._beta3 = beta.reshape(tensor.dims)

    @property
    def beta3(self) -> np.ndarray:
        return self._beta3

    def evaluate(self, u, t, x) -> np.ndarray:
        """Field values at broadcast (u, t, x); x outside the domain is clamped."""
        x = np.clip(np.asarray(x, float), *self.x_domain)
        rows = self.tensor.rows(u, t, x)
        return rows @ self.beta

    def to_dict(self) -> dict:
        return {
            "format": self.FORMAT,
            "tensor": self.tensor.to_dict(),
            "x_domain": [self.x_domain[0], self.x_domain[1]],
            "beta": self.beta.tolist(),
            "fit_info": {k: v for k, v in self.fit_info.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSplineField":
        if d.get("format") != cls.FORMAT:
            raise ValidationError(f"unsupported field format {d.get('format')!r}")
        return cls(TensorBasis3.from_dict(d["tensor"]), np.asarray(d["beta"], float),
                   tuple(d["x_domain"]), dict(d.get("fit_info", {})))


@dataclass
class FlowMap:
    field: TensorSplineField
    direction: str = "forward"
    steps: int = 50

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValidationError(f"direction must be forward|backward, got {self.direction!r}")
        if self.steps < 10:
            raise ValidationError(f"steps must be >= 10, got {self.steps}")


@dataclass
class TrainingAssembly:
    problem: PenalizedProblem
    tensor: TensorBasis3
    x_domain: tuple[float, float]
    u_grid: np.ndarray
    n_rows: int


def white_normal_sampler(rng: np.random.Generator, h: int, grid: RegularGrid) -> np.ndarray:
    """H independent standard-normal curves on the grid (identity covariance)."""
    return rng.standard_normal((h, grid.n_points))


def assemble_training(
    ds: IrregularDataset,
    cfg: FlowTrainingConfig,
    base_sampler=white_normal_sampler,
    keep_rows: bool = False,
) -> TrainingAssembly:
    """Build the penalized regression problem for the vector-field fit.

    One pool of H base curves is shared by all subjects.  Rows cover every
    (subject point, base curve, u-grid value) combination, with weight
    1/(n * H * F * J_i); the row count is therefore H * F * sum_i J_i.
    """
    rng = np.random.default_rng(cfg.seed)
    n = ds.n_subjects
    grid = ds.grid

    t_all = np.concatenate([s.times for s in ds.subjects])
    gi_all = np.concatenate([s.grid_idx for s in ds.subjects])
    x_all = np.concatenate([s.values for s in ds.subjects])
    w_all = np.concatenate([
        np.full(s.n_points, 1.0 / (n * cfg.H * cfg.F * s.n_points)) for s in ds.subjects
    ])

    z0_pool = np.asarray(base_sampler(rng, cfg.H, grid), float)
    if z0_pool.shape != (cfg.H, grid.n_points):
        raise ValidationError("base sampler returned wrong shape")
    z0_pts = z0_pool[:, gi_all]  # (H, n_points_total)

    # Z_u is linear in u, so its range over all rows is set by the endpoints
    pooled = np.concatenate([x_all, z0_pts.ravel()])
    lo = float(pooled.min())
    hi = float(pooled.max())
    margin = X_MARGIN * max(hi - lo, 1e-8)
    x_domain = (lo - margin, hi + margin)

    tensor = TensorBasis3(
        BSplineBasis(cfg.L_u, (0.0, 1.0)),
        BSplineBasis(cfg.L_t, (grid.t_min, grid.t_max)),
        BSplineBasis(cfg.L_x, x_domain),
    )
    pen = penalty_matrices(tensor)
    u_grid = np.linspace(0.0, 1.0, cfg.F)

    basis_u, basis_t, basis_x = tensor.bases
    bt_rows = basis_t.design_matrix(t_all)
    bu_rows = basis_u.design_matrix(u_grid)

    def blocks():
        for h in range(cfg.H):
            resp = x_all - z0_pts[h]
            for f, u in enumerate(u_grid):
                zu = (1.0 - u) * z0_pts[h] + u * x_all
                bx_rows = basis_x.design_matrix(zu)
                W = np.einsum("a,nb,nc->nabc", bu_rows[f], bt_rows, bx_rows)
                yield W.reshape(len(t_all), tensor.dim), resp, w_all

    problem = PenalizedProblem.from_blocks(blocks(), pen.as_list(), keep_rows=keep_rows)
    return TrainingAssembly(problem, tensor, x_domain, u_grid, problem.n_rows)


def fit_vector_field(
    ds: IrregularDataset,
    cfg: FlowTrainingConfig | None = None,
    base_sampler=white_normal_sampler,
    init_lambdas=None,
) -> TensorSplineField:
    """REML-selected penalized fit of the flow-matching vector field."""
    cfg = cfg or FlowTrainingConfig()
    assembly = assemble_training(ds, cfg, base_sampler=base_sampler)
    fit = fit_reml(assembly.problem, init_lambdas=init_lambdas)
    info = {
        "lambdas": fit.lambdas.tolist(),
        "sigma2": fit.sigma2,
        "edf": fit.edf,
        "reml": fit.reml,
        "converged": fit.converged,
        "n_rows": assembly.n_rows,
        "config": cfg.to_dict(),
    }
    return TensorSplineField(assembly.tensor, fit.beta, assembly.x_domain, fit_info=info)


def _integrate_states(field: TensorSplineField, t_points: np.ndarray, x0: np.ndarray,
                      direction: str, steps: int, strict: bool = True) -> np.ndarray:
    """Classical RK4 over u in [0,1] for a batch of states, one time each.

    All u abscissae that RK4 visits lie on the half-step grid j/(2M), so the
    u-contraction of the coefficient tensor is computed once per node.  With
    strict=False, states that turn non-finite are parked and returned as NaN
    instead of raising.
    """
    basis_u, basis_t, basis_x = field.tensor.bases
    m_steps = int(steps)
    nodes = np.linspace(0.0, 1.0, 2 * m_steps + 1)
    cu = np.einsum("ja,abc->jbc", basis_u.design_matrix(nodes), field.beta3)
    bt = basis_t.design_matrix(np.asarray(t_points, float))  # (N, L_t)
    backward = direction == "backward"
    lo, hi = field.x_domain
    mid = 0.5 * (lo + hi)

    def rhs(node_idx: int, xv: np.ndarray) -> np.ndarray:
        j = 2 * m_steps - node_idx if backward else node_idx
        ct = bt @ cu[j]  # (N, L_x)
        bx = basis_x.design_matrix(np.clip(xv, lo, hi))
        v = np.einsum("nc,nc->n", bx, ct)
        return -v if backward else v

    x = np.asarray(x0, float).copy()
    dead = ~np.isfinite(x)
    if dead.any():
        if strict:
            bad = int(np.flatnonzero(dead)[0])
            raise NumericalError(f"non-finite initial state (state {bad})")
        x[dead] = mid
    du = 1.0 / m_steps
    # overflowing states are detected and handled below, so the intermediate
    # arithmetic may produce inf/nan without warning
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(m_steps):
            k1 = rhs(2 * m, x)
            k2 = rhs(2 * m + 1, x + 0.5 * du * k1)
            k3 = rhs(2 * m + 1, x + 0.5 * du * k2)
            k4 = rhs(2 * m + 2, x + du * k3)
            x = x + (du / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            newly_dead = ~np.isfinite(x) & ~dead
            if newly_dead.any():
                if strict:
                    bad = int(np.flatnonzero(newly_dead)[0])
                    raise NumericalError(
                        f"non-finite state at RK4 step {m + 1} (state {bad})")
                dead |= newly_dead
                x[dead] = mid
    if dead.any():
        x[dead] = np.nan
    return x


def integrate(fmap: FlowMap, t: float, x0: float) -> float:
    """Transport a single value through the flow at time t."""
    out = _integrate_states(fmap.field, np.array([t], float), np.array([x0], float),
                            fmap.direction, fmap.steps)
    return float(out[0])


def integrate_points(fmap: FlowMap, t_points, x0) -> np.ndarray:
    """Transport many (t, x) states at once."""
    return _integrate_states(fmap.field, np.asarray(t_points, float),
                             np.asarray(x0, float), fmap.direction, fmap.steps)


def integrate_curves(field: TensorSplineField, curves: np.ndarray, grid: RegularGrid,
                     direction: str = "forward", steps: int = 50,
                     strict: bool = True) -> np.ndarray:
    """Transport an (m, n_grid) matrix of curve values, column times from the grid."""
    curves = np.asarray(curves, float)
    m, g = curves.shape
    if g != grid.n_points:
        raise ValidationError("curve matrix does not match the grid")
    t_tiled = np.tile(grid.values, m)
    out = _integrate_states(field, t_tiled, curves.ravel(), direction, steps,
                            strict=strict)
    return out.reshape(m, g)


def roundtrip_error(field: TensorSplineField, grid: RegularGrid, probes,
                    steps: int = 50) -> dict:
    """Mean and max of |backward(forward(x)) - x| over probes x grid times."""
    probes = np.asarray(probes, float)
    t_rep = np.repeat(grid.values, len(probes))
    x_rep = np.tile(probes, grid.n_points)
    fwd = _integrate_states(field, t_rep, x_rep, "forward", steps)
    back = _integrate_states(field, t_rep, fwd, "backward", steps)
    err = np.abs(back - x_rep)
    return {"mean": float(err.mean()), "max": float(err.max())}

"""Cubic B-spline bases with equally spaced knots, tensor products, and
second-derivative roughness penalties.

Bases are clamped (full-multiplicity boundary knots), so evaluation at the
domain ends picks out the corner coefficients.  Penalty matrices are exact:
the integrands are piecewise polynomials, integrated cell by cell with
Gauss-Legendre quadrature of sufficient order.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

from .errors import ValidationError

ORDER = 4  # cubic splines throughout


class BSplineBasis:
    """Cubic B-spline basis of ``dim`` functions on [a, b], equally spaced knots."""

    def __init__(self, dim: int, domain: tuple[float, float]):
        a, b = float(domain[0]), float(domain[1])
        if dim < ORDER:
            raise ValidationError(f"basis dim must be >= {ORDER}, got {dim}")
        if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
            raise ValidationError(f"bad domain ({a}, {b})")
        self.order = ORDER
        self.dim = int(dim)
        self.domain = (a, b)
        n_interior = dim - ORDER
        self._edges = np.linspace(a, b, n_interior + 2)
        self.knots = np.r_[[a] * ORDER, self._edges[1:-1], [b] * ORDER]
        # one BSpline with identity coefficients evaluates every basis function
        self._spl = BSpline(self.knots, np.eye(self.dim), ORDER - 1, extrapolate=True)

    @property
    def cell_edges(self) -> np.ndarray:
        """Breakpoints of the polynomial pieces (dim - 3 cells)."""
        return self._edges

    def design_matrix(self, x, deriv: int = 0) -> np.ndarray:
        """Dense (len(x), dim) matrix of basis values (or derivatives) at x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        a, b = self.domain
        if np.any(x < a) or np.any(x > b):
            bad = x[(x < a) | (x > b)][0]
            raise ValidationError(f"point {bad} outside basis domain [{a}, {b}]")
        return self._spl(x, nu=deriv)

    def __repr__(self):
        return f"BSplineBasis(dim={self.dim}, domain={self.domain})"

    def to_dict(self) -> dict:
        return {"dim": self.dim, "domain": [self.domain[0], self.domain[1]]}

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineBasis":
        return cls(int(d["dim"]), tuple(d["domain"]))


def eval_basis(basis: BSplineBasis, t: float) -> np.ndarray:
    """Basis-function values at a single point (nonnegative, summing to 1)."""
    return basis.design_matrix([t])[0]


def _gauss_cells(edges: np.ndarray, quad_points: int):
    """Gauss-Legendre nodes/weights mapped onto each cell, concatenated."""
    g, w = np.polynomial.legendre.leggauss(quad_points)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(half * (g + 1.0) + lo)
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def marginal_gram(basis: BSplineBasis, deriv: int = 0, quad_points: int = 2 * ORDER) -> np.ndarray:
    """Exact Gram matrix of basis derivatives: G[k,l] = int B_k^(d) B_l^(d)."""
    if quad_points < 2 * ORDER:
        raise ValidationError(f"need quad_points >= {2 * ORDER}, got {quad_points}")
    nodes, weights = _gauss_cells(basis.cell_edges, quad_points)
    D = basis.design_matrix(nodes, deriv=deriv)
    return (D * weights[:, None]).T @ D


class TensorBasis3:
    """Tensor product of three cubic bases over [0,1] x time x value space."""

    def __init__(self, basis_u: BSplineBasis, basis_t: BSplineBasis, basis_x: BSplineBasis):
        self.bases = (basis_u, basis_t, basis_x)
        self.dims = (basis_u.dim, basis_t.dim, basis_x.dim)
        self.dim = basis_u.dim * basis_t.dim * basis_x.dim

    def rows(self, u, t, x) -> np.ndarray:
        """Design-matrix rows at broadcast (u, t, x) points; shape (n, dim).

        Coefficient layout is C-order: u slowest, x fastest.
        """
        bu, bt, bx = self.bases
        u, t, x = np.broadcast_arrays(
            np.atleast_1d(np.asarray(u, float)),
            np.atleast_1d(np.asarray(t, float)),
            np.atleast_1d(np.asarray(x, float)),
        )
        Du = bu.design_matrix(u)
        Dt = bt.design_matrix(t)
        Dx = bx.design_matrix(x)
        n = len(u)
        return np.einsum("na,nb,nc->nabc", Du, Dt, Dx).reshape(n, self.dim)

    def to_dict(self) -> dict:
        return {"bases": [b.to_dict() for b in self.bases]}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorBasis3":
        return cls(*(BSplineBasis.from_dict(bd) for bd in d["bases"]))


def eval_tensor(tb: TensorBasis3, u: float, t: float, x: float) -> np.ndarray:
    """Single tensor design row; at most 4^3 nonzeros, sums to 1."""
    return tb.rows([u], [t], [x])[0]


class PenaltyMatrices3:
    """Second-derivative roughness penalties R_u, R_t, R_x for a 3D tensor basis."""

    def __init__(self, r_u: np.ndarray, r_t: np.ndarray, r_x: np.ndarray):
        self.r_u = r_u
        self.r_t = r_t
        self.r_x = r_x

    def as_list(self) -> list[np.ndarray]:
        return [self.r_u, self.r_t, self.r_x]


def penalty_matrices(tb: TensorBasis3, quad_points: int = 2 * ORDER) -> PenaltyMatrices3:
    """R_d[k,l] = ∫∫∫ (d²ψ_k/dd²)(d²ψ_l/dd²) over the box, one matrix per direction.

    Each factorizes into a Kronecker product of a marginal curvature Gram and
    the mass Grams of the other two directions.
    """
    bu, bt, bx = tb.bases
    mass = [marginal_gram(b, 0, quad_points) for b in (bu, bt, bx)]
    curv = [marginal_gram(b, 2, quad_points) for b in (bu, bt, bx)]
    r_u = np.kron(np.kron(curv[0], mass[1]), mass[2])
    r_t = np.kron(np.kron(mass[0], curv[1]), mass[2])
    r_x = np.kron(np.kron(mass[0], mass[1]), curv[2])
    return PenaltyMatrices3(r_u, r_t, r_x)


class TensorBasis2:
    """Tensor product of two cubic bases (for surface smoothing)."""

    def __init__(self, basis_1: BSplineBasis, basis_2: BSplineBasis):
        self.bases = (basis_1, basis_2)
        self.dims = (basis_1.dim, basis_2.dim)
        self.dim = basis_1.dim * basis_2.dim

    def rows(self, t, s) -> np.ndarray:
        b1, b2 = self.bases
        t, s = np.broadcast_arrays(
            np.atleast_1d(np.asarray(t, float)),
            np.atleast_1d(np.asarray(s, float)),
        )
        D1 = b1.design_matrix(t)
        D2 = b2.design_matrix(s)
        return np.einsum("na,nb->nab", D1, D2).reshape(len(t), self.dim)

    def evaluate_grid(self, coef: np.ndarray, t: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Surface values on the full t x s grid for coefficient vector coef."""
        C = np.asarray(coef, float).reshape(self.dims)
        D1 = self.bases[0].design_matrix(t)
        D2 = self.bases[1].design_matrix(s)
        return D1 @ C @ D2.T

    def to_dict(self) -> dict:
        return {"bases": [b.to_dict() for b in self.bases]}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorBasis2":
        return cls(*(BSplineBasis.from_dict(bd) for bd in d["bases"]))


def make_bivariate(
    domain_1: tuple[float, float],
    domain_2: tuple[float, float],
    dim_1: int = 10,
    dim_2: int | None = None,
    quad_points: int = 2 * ORDER,
) -> tuple[TensorBasis2, list[np.ndarray]]:
    """Bivariate tensor basis plus its two curvature penalties [R_1, R_2]."""
    if dim_2 is None:
        dim_2 = dim_1
    tb = TensorBasis2(BSplineBasis(dim_1, domain_1), BSplineBasis(dim_2, domain_2))
    b1, b2 = tb.bases
    m1, m2 = marginal_gram(b1, 0, quad_points), marginal_gram(b2, 0, quad_points)
    c1, c2 = marginal_gram(b1, 2, quad_points), marginal_gram(b2, 2, quad_points)
    return tb, [np.kron(c1, m2), np.kron(m1, c2)]

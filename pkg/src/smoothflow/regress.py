"""Weighted penalized least squares with REML smoothing-parameter selection.

One engine serves every smoothing task in the package: the 3D vector-field
fit, bivariate surface smoothing, pooled mean curves, per-subject denoising
and the prediction model.  Problems are handed over as accumulated normal
equations (design rows can be streamed in blocks), with a list of quadratic
penalty matrices whose weights are chosen by maximizing a profiled restricted
likelihood.

With weights D, design W, response y and combined penalty S(λ) = Σ λ_d R_d,
the restricted criterion is

    l_R(λ) = -1/2 [ m·log(yᵀV⁻¹y) + log|V| ],   V = D⁻¹ + W S⁻¹ Wᵀ,

evaluated through the penalized-regression identities

    yᵀV⁻¹y = yᵀD(y - Wβ̂),   log|V| = log|A| - log|S| - log|D|,

where A = WᵀDW + S and β̂ = A⁻¹WᵀDy, so the m×m matrix V is never formed.
Because second-derivative penalties share a null space, S carries a tiny
fixed ridge to make both sides of these identities well defined; the same
ridge is used everywhere so the two forms agree exactly.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh, solve_triangular

from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

LOG_LAMBDA_RANGE = (-8.0, 8.0)   # search window for log10(lambda)
MAX_CYCLES = 20
CRITERION_TOL = 1e-4
S_RIDGE_REL = 1e-13              # relative ridge making S(lambda) invertible
PENALTY_NULL_TOL = 1e-10         # relative eigenvalue cutoff for the penalty null space

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


class PenalizedProblem:
    """Accumulated weighted normal equations plus penalty matrices.

    Build with :meth:`from_blocks` (streaming) or :meth:`from_rows` (dense).
    Setting ``keep_rows`` retains the raw design for small problems so the
    criterion can be cross-checked against the direct V-form.
    """

    def __init__(self, gram, moment, yty, n_rows, sum_log_w, penalties, rows=None):
        self.gram = gram
        self.moment = moment
        self.yty = float(yty)
        self.n_rows = int(n_rows)
        self.sum_log_w = float(sum_log_w)
        self.penalties = [np.asarray(R, float) for R in penalties]
        self.dim = gram.shape[0]
        self.rows = rows
        for R in self.penalties:
            if R.shape != (self.dim, self.dim):
                raise ValidationError("penalty matrix shape mismatch")
        if not self.penalties:
            raise ValidationError("need at least one penalty matrix")
        # fixed ridge scale for S(lambda); part of the criterion definition
        self.s_ridge = S_RIDGE_REL * float(
            np.mean([np.trace(R) / self.dim for R in self.penalties])
        )
        if not np.isfinite(self.s_ridge) or self.s_ridge <= 0:
            self.s_ridge = S_RIDGE_REL
        self._rot = None

    def rotation(self):
        """Eigenbasis of the unit-scaled penalty sum, with the joint null split off.

        Every second-derivative penalty annihilates the same low-order
        directions; because the penalties are PSD, the null space of their
        (unit-scaled) sum is exactly the intersection of their null spaces.
        Rotating into this basis and zeroing the null rows of each penalty
        exactly removes the rounding junk lambda*eps*|R| that direct assembly
        of gram + S(lambda) would deposit there — junk that otherwise corrupts
        both the solve and the log|S| term of the REML criterion once any
        lambda is large.  Cached: the basis does not depend on lambda.

        Returns (vecs, null_mask, gram_r, moment_r, rotated_penalties).
        """
        if self._rot is None:
            unit = np.zeros_like(self.gram)
            for R in self.penalties:
                scale = np.trace(R) / self.dim
                unit += R / (scale if scale > 0 else 1.0)
            vals, vecs = eigh((unit + unit.T) / 2.0)
            null = np.clip(vals, 0.0, None) <= PENALTY_NULL_TOL * max(vals[-1], 0.0)
            pen_r = []
            for R in self.penalties:
                Rr = vecs.T @ R @ vecs
                Rr = (Rr + Rr.T) / 2.0
                Rr[null, :] = 0.0
                Rr[:, null] = 0.0
                pen_r.append(Rr)
            gram_r = vecs.T @ self.gram @ vecs
            gram_r = (gram_r + gram_r.T) / 2.0
            self._rot = (vecs, null, gram_r, vecs.T @ self.moment, pen_r)
        return self._rot

    @classmethod
    def from_blocks(cls, blocks, penalties, keep_rows: bool = False) -> "PenalizedProblem":
        """Accumulate from an iterable of (W_block, y_block, w_block) triples."""
        gram = moment = None
        yty = 0.0
        n_rows = 0
        sum_log_w = 0.0
        kept = [] if keep_rows else None
        for W, y, w in blocks:
            W = np.asarray(W, float)
            y = np.asarray(y, float)
            w = np.asarray(w, float)
            if W.ndim != 2 or len(y) != W.shape[0] or len(w) != W.shape[0]:
                raise ValidationError("block shapes inconsistent")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValidationError("weights must be positive and finite")
            if not np.all(np.isfinite(y)) or not np.all(np.isfinite(W)):
                raise ValidationError("non-finite design row or response")
            if gram is None:
                gram = np.zeros((W.shape[1], W.shape[1]))
                moment = np.zeros(W.shape[1])
            Ww = W * w[:, None]
            gram += Ww.T @ W
            moment += Ww.T @ y
            yty += float(np.dot(w * y, y))
            n_rows += W.shape[0]
            sum_log_w += float(np.sum(np.log(w)))
            if keep_rows:
                kept.append((W, y, w))
        if gram is None:
            raise ValidationError("no design rows")
        return cls(gram, moment, yty, n_rows, sum_log_w, penalties, rows=kept)

    @classmethod
    def from_rows(cls, W, y, w=None, penalties=(), keep_rows: bool = True) -> "PenalizedProblem":
        W = np.asarray(W, float)
        if w is None:
            w = np.ones(W.shape[0])
        return cls.from_blocks([(W, np.asarray(y, float), np.asarray(w, float))],
                               penalties, keep_rows=keep_rows)

    def dense_rows(self):
        if self.rows is None:
            raise ValidationError("problem was built without keep_rows")
        W = np.vstack([b[0] for b in self.rows])
        y = np.concatenate([b[1] for b in self.rows])
        w = np.concatenate([b[2] for b in self.rows])
        return W, y, w


@dataclass
class FitResult:
    beta: np.ndarray
    lambdas: np.ndarray
    sigma2: float
    edf: float
    reml: float
    converged: bool = True


class _Factor:
    """Cholesky factor of a symmetrically equilibrated SPD matrix.

    Holds L with L Lᵀ = D⁻¹ A D⁻¹ where D = diag(scale); solves and the
    log-determinant refer to the original A.  Solves apply one step of
    iterative refinement, which recovers the digits lost to equilibrated
    factorization when the penalty blocks dwarf the data Gram.
    """

    def __init__(self, c, scale: np.ndarray, matrix: np.ndarray):
        self._c = c
        self._a = matrix
        self.scale = scale

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        if b.ndim == 1:
            return cho_solve(self._c, b / self.scale) / self.scale
        return cho_solve(self._c, b / self.scale[:, None]) / self.scale[:, None]

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, float)
        x = self._raw_solve(b)
        if b.ndim != 1:
            resid = b - self._a @ x
            return x + self._raw_solve(resid)
        # extended-precision residuals push the refinement limit below the
        # usual cond * eps floor, which huge-lambda penalty systems need
        a_ext = self._a.astype(np.longdouble)
        b_ext = b.astype(np.longdouble)
        for _ in range(3):
            resid = np.asarray(b_ext - a_ext @ x.astype(np.longdouble), dtype=float)
            step = self._raw_solve(resid)
            x = x + step
            if np.max(np.abs(step)) <= 1e-16 * max(np.max(np.abs(x)), 1.0):
                break
        return x

    def tri_solve(self, b: np.ndarray) -> np.ndarray:
        """x with (D L) x = b, i.e. a triangular 'half solve' of A."""
        L = np.tril(self._c[0])
        return solve_triangular(L, b / self.scale[:, None], lower=True)

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._c[0])))) \
            + 2.0 * float(np.sum(np.log(self.scale)))


def _chol_with_jitter(A: np.ndarray) -> _Factor:
    """Equilibrated Cholesky of A, escalating a diagonal jitter when not PD.

    The matrix is symmetrically scaled by its diagonal first, so the jitter
    ladder acts relative to each diagonal entry; blocks of very different
    magnitude (e.g. huge-lambda penalties next to a small data Gram) keep
    their small directions intact.
    """
    n = A.shape[0]
    diag = np.diag(A)
    scale = np.sqrt(np.where(diag > 0, diag, 1.0))
    As = A / np.outer(scale, scale)
    for jit in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            c = cho_factor(As + jit * np.eye(n), lower=True)
            if jit:
                logger.debug("factorization needed relative jitter %.1e", jit)
            return _Factor(c, scale, A)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("singular design: factorization failed at maximum jitter")


def _generalized_eigh(R: np.ndarray, B: np.ndarray, eigvals_only: bool = False):
    """eigh(R, B) with an escalating jitter on B when the pencil degenerates."""
    base = np.trace(B) / B.shape[0]
    if not np.isfinite(base) or base <= 0:
        base = 1.0
    for jit in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            return eigh(R, B + (jit * base) * np.eye(B.shape[0]),
                        eigvals_only=eigvals_only)
        except (np.linalg.LinAlgError, ValueError):
            continue
    raise NumericalError("generalized eigenproblem failed: design/penalty pencil singular")


def _combined_penalty(problem: PenalizedProblem, lambdas) -> np.ndarray:
    S = problem.s_ridge * np.eye(problem.dim)
    for lam, R in zip(lambdas, problem.penalties):
        S += lam * R
    return S


def _solve_penalized(problem: PenalizedProblem, lambdas):
    """Solve (gram + Σ λ_d R_d) β = moment in the null-separated basis.

    Directions in the joint penalty null space (constants under derivative
    penalties, say) are fitted purely from the data even at enormous lambda;
    assembling gram + λR directly would bury them under rounding noise of
    size λ·eps·|R|, which the small eigenvalues of the system then amplify.
    Returns (beta, edf).
    """
    vecs, _, gram_r, moment_r, pen_r = problem.rotation()
    S = np.zeros_like(gram_r)
    for lam, Rr in zip(lambdas, pen_r):
        S += lam * Rr
    cA = _chol_with_jitter(gram_r + S)
    beta = vecs @ cA.solve(moment_r)
    edf = float(np.trace(cA.solve(gram_r)))
    return beta, edf


def reml_criterion(problem: PenalizedProblem, lambdas) -> float:
    """Profiled restricted likelihood via the penalized-regression identities.

    Evaluated in the null-separated basis: the joint null block of S(lambda)
    is exactly ridge·I there, so log|S| contributes n0·log(ridge) from the
    null space plus a clean Cholesky log-determinant of the penalized block.
    Direct assembly instead floods the null eigenvalues with lambda·eps-size
    junk, which fabricates an upward slope of the criterion at large lambda.
    """
    _, null, gram_r, moment_r, pen_r = problem.rotation()
    ridge = problem.s_ridge
    dim = problem.dim
    nn = ~null
    n0 = int(np.count_nonzero(null))
    idx = np.ix_(nn, nn)
    S_nn = ridge * np.eye(dim - n0)
    for lam, Rr in zip(lambdas, pen_r):
        S_nn += lam * Rr[idx]
    logdet_s = n0 * np.log(ridge) + _chol_with_jitter(S_nn).logdet
    A = gram_r + ridge * np.eye(dim)
    A[idx] += S_nn - ridge * np.eye(dim - n0)
    cA = _chol_with_jitter(A)
    beta = cA.solve(moment_r)
    r = max(problem.yty - float(beta @ moment_r), np.finfo(float).tiny)
    m = problem.n_rows
    return -0.5 * (m * np.log(r) + cA.logdet - logdet_s - problem.sum_log_w)


def reml_criterion_vform(problem: PenalizedProblem, lambdas) -> float:
    """Same criterion by forming V = D⁻¹ + W S⁻¹ Wᵀ directly (small m only).

    W S⁻¹ Wᵀ is assembled as GᵀG from a triangular half solve against the
    null-separated S — the same matrix :func:`reml_criterion` uses — so the
    ill-conditioning of S does not leak into V.
    """
    W, y, w = problem.dense_rows()
    m = len(y)
    if m > 2000:
        raise ValidationError("V-form is for small problems")
    vecs, null, _, _, pen_r = problem.rotation()
    S_rot = problem.s_ridge * np.eye(problem.dim)
    for lam, Rr in zip(lambdas, pen_r):
        S_rot += lam * Rr
    G = _chol_with_jitter(S_rot).tri_solve((W @ vecs).T)
    V = np.diag(1.0 / w) + G.T @ G
    cV = cho_factor(V, lower=True)
    quad = float(y @ cho_solve(cV, y))
    logdet_v = 2.0 * float(np.sum(np.log(np.diag(cV[0]))))
    return -0.5 * (m * np.log(quad) + logdet_v)


def solve_fixed_lambda(problem: PenalizedProblem, lambdas) -> FitResult:
    """Penalized weighted least squares at fixed smoothing parameters."""
    lambdas = np.atleast_1d(np.asarray(lambdas, float))
    if len(lambdas) != len(problem.penalties):
        raise ValidationError("one lambda per penalty matrix required")
    if np.any(lambdas < 0) or not np.all(np.isfinite(lambdas)):
        raise ValidationError("lambdas must be finite and >= 0")
    beta, edf = _solve_penalized(problem, lambdas)
    r = max(problem.yty - float(beta @ problem.moment), np.finfo(float).tiny)
    crit = reml_criterion(problem, lambdas)
    return FitResult(beta=beta, lambdas=lambdas, sigma2=r / problem.n_rows,
                     edf=edf, reml=crit)


def _coordinate_profile(problem: PenalizedProblem, lambdas, d: int):
    """Exact criterion along coordinate d, lambda-independent parts prebuilt.

    An earlier revision expanded the line-search criterion through a pair of
    generalized eigendecompositions so each point cost O(dim); with penalty
    spectra spanning ~13 decades the small generalized eigenvalues carry
    absolute errors of order eps times the largest, which fabricated slope at
    the search boundaries.  Two Cholesky factorizations per point evaluate
    the criterion exactly instead, and the line search is still cheap.
    """
    _, null, gram_r, moment_r, pen_r = problem.rotation()
    ridge = problem.s_ridge
    dim = problem.dim
    nn = ~null
    n0 = int(np.count_nonzero(null))
    idx = np.ix_(nn, nn)
    eye_nn = np.eye(dim - n0)

    others_nn = ridge * eye_nn
    for j, (lam, Rr) in enumerate(zip(lambdas, pen_r)):
        if j != d:
            others_nn += lam * Rr[idx]
    R_nn = pen_r[d][idx]
    R_full = pen_r[d]
    C = gram_r + ridge * np.eye(dim)
    C[idx] += others_nn - ridge * eye_nn

    m = problem.n_rows
    yty = problem.yty
    tiny = np.finfo(float).tiny
    logdet_null = n0 * np.log(ridge)

    def crit(lam: float) -> float:
        logdet_s = logdet_null + _chol_with_jitter(others_nn + lam * R_nn).logdet
        cA = _chol_with_jitter(C + lam * R_full)
        beta = cA.solve(moment_r)
        r = max(yty - float(beta @ moment_r), tiny)
        return -0.5 * (m * np.log(r) + cA.logdet - logdet_s - problem.sum_log_w)

    return crit


def _golden_max(f, lo: float, hi: float, iters: int = 45) -> float:
    """Golden-section maximization on [lo, hi]; returns the best abscissa."""
    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
    return x1 if f1 >= f2 else x2


def fit_reml(problem: PenalizedProblem, init_lambdas=None) -> FitResult:
    """Select smoothing parameters by coordinate-wise golden-section REML.

    Cycles through the penalties, line-searching each log10(lambda_d) over
    [-8, 8], until the criterion improves by less than 1e-4 or 20 cycles.
    A candidate is only accepted when it improves the exactly recomputed
    criterion, so the returned value never falls below the starting point.
    """
    n_pen = len(problem.penalties)
    if problem.n_rows < problem.dim + 1:
        raise ValidationError(
            f"REML needs at least dim+1 = {problem.dim + 1} rows, got {problem.n_rows}"
        )
    if init_lambdas is None:
        init_lambdas = np.ones(n_pen)
    lambdas = np.atleast_1d(np.asarray(init_lambdas, float)).copy()
    if len(lambdas) != n_pen or np.any(lambdas <= 0):
        raise ValidationError("init_lambdas must be positive, one per penalty")

    best = reml_criterion(problem, lambdas)
    converged = False
    for _ in range(MAX_CYCLES):
        cycle_start = best
        for d in range(n_pen):
            profile = _coordinate_profile(problem, lambdas, d)
            log_lam = _golden_max(lambda L: profile(10.0 ** L), *LOG_LAMBDA_RANGE)
            candidate = lambdas.copy()
            candidate[d] = 10.0 ** log_lam
            cand_crit = reml_criterion(problem, candidate)
            if cand_crit > best:
                lambdas, best = candidate, cand_crit
        if best - cycle_start < CRITERION_TOL:
            converged = True
            break
    if not converged:
        warnings.warn("REML cycling stopped at the cycle limit; returning best so far")

    beta, edf = _solve_penalized(problem, lambdas)
    r = max(problem.yty - float(beta @ problem.moment), np.finfo(float).tiny)
    return FitResult(beta=beta, lambdas=lambdas, sigma2=r / problem.n_rows,
                     edf=edf, reml=best, converged=converged)


class SmoothedCurve:
    """Evaluator returned by :func:`smoothing_spline_1d`."""

    def __init__(self, evaluate, domain, fallback: bool, fit: FitResult | None):
        self._evaluate = evaluate
        self.domain = domain
        self.fallback = fallback
        self.fit = fit

    def __call__(self, t):
        t = np.clip(np.asarray(t, float), self.domain[0], self.domain[1])
        return self._evaluate(t)


def smoothing_spline_1d(points, basis_dim: int | None = None) -> SmoothedCurve:
    """Penalized cubic-spline smoother for one subject's (t, y) observations.

    With fewer than 4 points there is nothing to smooth; a linear
    interpolant is returned with the ``fallback`` flag set.
    """
    from .splines import BSplineBasis, marginal_gram  # local import avoids a cycle

    pts = sorted((float(t), float(y)) for t, y in points)
    t = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    # average duplicate abscissae so the design and interpolant are well posed
    if len(t) and np.any(np.diff(t) == 0):
        tu = np.unique(t)
        y = np.array([y[t == v].mean() for v in tu])
        t = tu
    n = len(t)
    if n == 0:
        raise ValidationError("no points to smooth")
    if n < 4:
        logger.warning("only %d points; falling back to linear interpolation", n)
        dom = (t[0], t[-1]) if n > 1 else (t[0] - 0.5, t[0] + 0.5)
        return SmoothedCurve(lambda q: np.interp(q, t, y), dom, fallback=True, fit=None)

    dom = (t[0], t[-1])
    dim = basis_dim if basis_dim is not None else min(10, max(4, n - 1))
    if dim < 4:
        raise ValidationError(f"basis_dim must be >= 4, got {dim}")
    basis = BSplineBasis(dim, dom)
    W = basis.design_matrix(t)
    penalty = marginal_gram(basis, deriv=2)
    problem = PenalizedProblem.from_rows(W, y, penalties=[penalty], keep_rows=False)
    if n >= dim + 1:
        fit = fit_reml(problem)
    else:
        # too few rows for REML at this dimension: near-interpolating ridge
        fit = solve_fixed_lambda(problem, [1e-8])
    beta = fit.beta
    return SmoothedCurve(lambda q: basis.design_matrix(q) @ beta, dom,
                         fallback=False, fit=fit)


def denoise_dataset(ds, basis_dim: int | None = None):
    """Smooth every subject's trajectory and re-evaluate at its own times.

    Subjects with fewer than 4 points pass through the linear-interpolation
    fallback of :func:`smoothing_spline_1d`, which leaves their values
    unchanged at observed times.
    """
    from .dataset import IrregularDataset, Subject  # local import avoids a cycle

    subjects = []
    for s in ds.subjects:
        curve = smoothing_spline_1d(zip(s.times, s.values), basis_dim=basis_dim)
        vals = np.asarray(curve(s.times), float)
        subjects.append(Subject(id=s.id, times=s.times.copy(), values=vals,
                                grid_idx=s.grid_idx.copy()))
    return IrregularDataset(subjects=subjects, grid=ds.grid)

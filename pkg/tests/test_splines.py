"""Tests for the B-spline basis, tensor products, and roughness penalties."""

import numpy as np
import pytest

from smoothflow.errors import ValidationError
from smoothflow.splines import (
    BSplineBasis,
    TensorBasis3,
    eval_basis,
    eval_tensor,
    make_bivariate,
    marginal_gram,
    penalty_matrices,
)


def _cox_de_boor_value(knots, k, degree, t):
    """Textbook B-spline recursion with the 0/0 := 0 convention.

    Uses half-open support cells, so it agrees with the library away from
    the right domain endpoint.
    """
    if degree == 0:
        return 1.0 if knots[k] <= t < knots[k + 1] else 0.0
    left = 0.0
    den = knots[k + degree] - knots[k]
    if den > 0:
        left = (t - knots[k]) / den * _cox_de_boor_value(knots, k, degree - 1, t)
    right = 0.0
    den = knots[k + degree + 1] - knots[k + 1]
    if den > 0:
        right = (knots[k + degree + 1] - t) / den * _cox_de_boor_value(
            knots, k + 1, degree - 1, t)
    return left + right


def _greville(basis):
    """Abscissae g_k with sum_k g_k B_k(t) = t for a cubic basis."""
    kn = basis.knots
    return np.array([(kn[k + 1] + kn[k + 2] + kn[k + 3]) / 3.0
                     for k in range(basis.dim)])


def _blossom_square(basis):
    """Coefficients c_k with sum_k c_k B_k(t) = t^2 (polar form at knot triples)."""
    kn = basis.knots
    return np.array([
        (kn[k + 1] * kn[k + 2] + kn[k + 1] * kn[k + 3] + kn[k + 2] * kn[k + 3]) / 3.0
        for k in range(basis.dim)
    ])


def test_matches_recursion_oracle():
    basis = BSplineBasis(8, (-1.0, 2.5))
    rng = np.random.default_rng(7)
    ts = rng.uniform(-1.0, 2.5 - 1e-9, size=200)
    D = basis.design_matrix(ts)
    for i, t in enumerate(ts):
        for k in range(basis.dim):
            ref = _cox_de_boor_value(basis.knots, k, 3, t)
            assert abs(D[i, k] - ref) < 1e-12


def test_partition_of_unity():
    rng = np.random.default_rng(1)
    for dim, (a, b) in [(4, (0.0, 1.0)), (6, (-3.0, 2.0)), (13, (0.5, 0.6))]:
        basis = BSplineBasis(dim, (a, b))
        ts = rng.uniform(a, b, size=500)
        sums = basis.design_matrix(ts).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12
        assert np.all(basis.design_matrix(ts) >= -1e-15)


def test_endpoint_rows_are_unit_vectors():
    basis = BSplineBasis(7, (0.0, 1.0))
    row_a = eval_basis(basis, 0.0)
    row_b = eval_basis(basis, 1.0)
    expect_a = np.zeros(7)
    expect_a[0] = 1.0
    expect_b = np.zeros(7)
    expect_b[-1] = 1.0
    np.testing.assert_allclose(row_a, expect_a, atol=1e-14)
    np.testing.assert_allclose(row_b, expect_b, atol=1e-14)


def test_linear_reproduction_via_greville():
    basis = BSplineBasis(9, (-2.0, 5.0))
    coef = _greville(basis)
    ts = np.linspace(-2.0, 5.0, 117)
    vals = basis.design_matrix(ts) @ coef
    np.testing.assert_allclose(vals, ts, atol=1e-11)


def test_outside_domain_raises():
    basis = BSplineBasis(6, (0.0, 1.0))
    with pytest.raises(ValidationError):
        basis.design_matrix([1.0000001])
    with pytest.raises(ValidationError):
        basis.design_matrix([-0.1, 0.5])


def test_minimum_dimension():
    with pytest.raises(ValidationError):
        BSplineBasis(3, (0.0, 1.0))
    basis = BSplineBasis(4, (0.0, 1.0))
    assert basis.dim == 4


def test_bad_domain_raises():
    with pytest.raises(ValidationError):
        BSplineBasis(6, (1.0, 1.0))
    with pytest.raises(ValidationError):
        BSplineBasis(6, (0.0, np.inf))


def test_second_derivative_matches_finite_differences():
    basis = BSplineBasis(8, (0.0, 2.0))
    rng = np.random.default_rng(3)
    ts = rng.uniform(0.2, 1.8, size=50)
    h = 1e-4
    d2 = basis.design_matrix(ts, deriv=2)
    fd = (basis.design_matrix(ts + h) - 2.0 * basis.design_matrix(ts)
          + basis.design_matrix(ts - h)) / h ** 2
    assert np.max(np.abs(d2 - fd)) < 1e-5 * max(1.0, np.max(np.abs(d2)))


def test_gram_of_constant_equals_domain_length():
    for a, b in [(0.0, 1.0), (-1.5, 3.0)]:
        basis = BSplineBasis(7, (a, b))
        G = marginal_gram(basis)
        ones = np.ones(basis.dim)
        assert abs(ones @ G @ ones - (b - a)) < 1e-12 * max(1.0, b - a)


def test_gram_quad_points_validation():
    basis = BSplineBasis(6, (0.0, 1.0))
    with pytest.raises(ValidationError):
        marginal_gram(basis, quad_points=7)


def test_tensor_row_is_outer_product():
    tb = TensorBasis3(
        BSplineBasis(5, (0.0, 1.0)),
        BSplineBasis(6, (0.0, 2.0)),
        BSplineBasis(7, (-1.0, 1.0)),
    )
    rng = np.random.default_rng(11)
    for _ in range(20):
        u = rng.uniform(0, 1)
        t = rng.uniform(0, 2)
        x = rng.uniform(-1, 1)
        row = eval_tensor(tb, u, t, x)
        bu = eval_basis(tb.bases[0], u)
        bt = eval_basis(tb.bases[1], t)
        bx = eval_basis(tb.bases[2], x)
        ref = np.einsum("a,b,c->abc", bu, bt, bx).ravel()
        np.testing.assert_allclose(row, ref, atol=1e-14)
        assert abs(row.sum() - 1.0) < 1e-12
        assert np.count_nonzero(row) <= 64


def test_tensor_corner_row():
    tb = TensorBasis3(
        BSplineBasis(5, (0.0, 1.0)),
        BSplineBasis(5, (0.0, 1.0)),
        BSplineBasis(5, (0.0, 1.0)),
    )
    row = eval_tensor(tb, 0.0, 0.0, 0.0)
    assert row[0] == pytest.approx(1.0, abs=1e-14)
    assert np.count_nonzero(np.abs(row) > 1e-14) == 1
    row = eval_tensor(tb, 1.0, 1.0, 1.0)
    assert row[-1] == pytest.approx(1.0, abs=1e-14)
    assert np.count_nonzero(np.abs(row) > 1e-14) == 1


def test_penalty_zero_on_linear_field():
    tb = TensorBasis3(
        BSplineBasis(6, (0.0, 1.0)),
        BSplineBasis(6, (0.0, 2.0)),
        BSplineBasis(6, (-1.0, 3.0)),
    )
    pen = penalty_matrices(tb)
    # f(u, t, x) = u: linear in u, constant in t and x.
    beta = np.einsum("a,b,c->abc", _greville(tb.bases[0]),
                     np.ones(6), np.ones(6)).ravel()
    for R in pen.as_list():
        assert abs(beta @ R @ beta) < 1e-9


def test_penalty_quadratic_volume_oracle():
    du, dt, dx = (0.0, 1.0), (0.0, 2.0), (-1.0, 3.0)
    tb = TensorBasis3(BSplineBasis(6, du), BSplineBasis(6, dt), BSplineBasis(6, dx))
    pen = penalty_matrices(tb)
    # f(u, t, x) = u^2: the u-penalty integrates (d2f/du2)^2 = 4 over the box.
    beta = np.einsum("a,b,c->abc", _blossom_square(tb.bases[0]),
                     np.ones(6), np.ones(6)).ravel()
    volume = (du[1] - du[0]) * (dt[1] - dt[0]) * (dx[1] - dx[0])
    assert beta @ pen.r_u @ beta == pytest.approx(4.0 * volume, rel=1e-10)
    assert abs(beta @ pen.r_t @ beta) < 1e-8
    assert abs(beta @ pen.r_x @ beta) < 1e-8


def test_penalties_symmetric_and_psd():
    tb = TensorBasis3(
        BSplineBasis(4, (0.0, 1.0)),
        BSplineBasis(5, (0.0, 1.0)),
        BSplineBasis(4, (0.0, 1.0)),
    )
    for R in penalty_matrices(tb).as_list():
        np.testing.assert_allclose(R, R.T, atol=1e-12)
        eigs = np.linalg.eigvalsh(R)
        assert eigs[0] > -1e-8 * max(1.0, eigs[-1])


def test_bivariate_basis_and_penalties():
    tb, penalties = make_bivariate((0.0, 1.0), (0.0, 1.0), dim_1=6)
    assert tb.dim == 36
    rng = np.random.default_rng(5)
    t = rng.uniform(0, 1, 40)
    s = rng.uniform(0, 1, 40)
    rows = tb.rows(t, s)
    assert np.max(np.abs(rows.sum(axis=1) - 1.0)) < 1e-12
    # f(t, s) = t * s is bilinear, so both curvature penalties vanish.
    g = _greville(tb.bases[0])
    beta = np.outer(g, _greville(tb.bases[1])).ravel()
    for R in penalties:
        assert abs(beta @ R @ beta) < 1e-9
    vals = rows @ beta
    np.testing.assert_allclose(vals, t * s, atol=1e-11)


def test_evaluate_grid_matches_rows():
    tb, _ = make_bivariate((0.0, 1.0), (0.0, 1.0), dim_1=5)
    rng = np.random.default_rng(9)
    coef = rng.standard_normal(tb.dim)
    t = np.linspace(0, 1, 7)
    s = np.linspace(0, 1, 9)
    grid_vals = tb.evaluate_grid(coef, t, s)
    tt, ss = np.meshgrid(t, s, indexing="ij")
    ref = (tb.rows(tt.ravel(), ss.ravel()) @ coef).reshape(7, 9)
    np.testing.assert_allclose(grid_vals, ref, atol=1e-12)


def test_serialization_round_trip():
    basis = BSplineBasis(8, (-0.5, 2.0))
    clone = BSplineBasis.from_dict(basis.to_dict())
    assert clone.dim == basis.dim
    assert clone.domain == basis.domain
    np.testing.assert_array_equal(clone.knots, basis.knots)
    ts = np.linspace(-0.5, 2.0, 33)
    np.testing.assert_array_equal(clone.design_matrix(ts), basis.design_matrix(ts))

    tb = TensorBasis3(basis, BSplineBasis(5, (0.0, 1.0)), BSplineBasis(6, (0.0, 1.0)))
    tb2 = TensorBasis3.from_dict(tb.to_dict())
    assert tb2.dims == tb.dims
    np.testing.assert_array_equal(
        tb2.rows([0.3], [0.4], [0.5]), tb.rows([0.3], [0.4], [0.5]))

"""Tests for flow-matching training assembly, field fitting, and RK4 transport."""

from functools import lru_cache

import numpy as np
import pytest

from smoothflow.dataset import IrregularDataset, RegularGrid, Subject
from smoothflow.errors import NumericalError, ValidationError
from smoothflow.flow import (
    FlowMap,
    FlowTrainingConfig,
    TensorSplineField,
    assemble_training,
    fit_vector_field,
    integrate,
    integrate_curves,
    integrate_points,
    roundtrip_error,
    white_normal_sampler,
)
from smoothflow.splines import BSplineBasis, TensorBasis3


def _tiny_ds():
    grid = RegularGrid(0.0, 1.0, 5)
    s0 = Subject("s0", grid.values[[0, 2]], [0.5, -0.3], [0, 2])
    s1 = Subject("s1", grid.values[[1, 3, 4]], [1.0, 0.2, -0.7], [1, 3, 4])
    return IrregularDataset([s0, s1], grid)


def _field_from_xcoef(xcoef, x_domain=(-4.0, 4.0)):
    """Field constant in (u, t) whose x-profile has the given spline coefficients."""
    xcoef = np.asarray(xcoef, float)
    tensor = TensorBasis3(BSplineBasis(4, (0.0, 1.0)), BSplineBasis(4, (0.0, 1.0)),
                          BSplineBasis(len(xcoef), x_domain))
    beta3 = np.tile(xcoef[None, None, :], (4, 4, 1))
    return TensorSplineField(tensor, beta3.ravel(), x_domain)


def _greville(basis):
    kn = basis.knots
    return np.array([(kn[c + 1] + kn[c + 2] + kn[c + 3]) / 3.0
                     for c in range(basis.dim)])


def _sparse_normal_ds(seed, shift=0.0, n=150, grid_points=15, j_range=(8, 12)):
    rng = np.random.default_rng(seed)
    grid = RegularGrid(0.0, 1.0, grid_points)
    subjects = []
    for i in range(n):
        j = int(rng.integers(j_range[0], j_range[1] + 1))
        idx = np.sort(rng.choice(grid_points, size=j, replace=False))
        subjects.append(Subject(f"s{i}", grid.values[idx],
                                shift + rng.standard_normal(j), idx))
    return IrregularDataset(subjects, grid)


@lru_cache(maxsize=1)
def _white_field():
    ds = _sparse_normal_ds(42, shift=0.0)
    return fit_vector_field(ds, FlowTrainingConfig(H=10, F=12, seed=[9, 1]))


# ---------------------------------------------------------------------------
# training assembly
# ---------------------------------------------------------------------------


def test_assembly_row_count_weights_and_domain():
    ds = _tiny_ds()
    cfg = FlowTrainingConfig(H=2, F=3, L_u=4, L_t=4, L_x=4, seed=123)
    asm = assemble_training(ds, cfg, keep_rows=True)

    # rows: one per (observation, base curve, u-grid value)
    assert asm.n_rows == 2 * 3 * 5
    assert asm.problem.n_rows == 30
    assert asm.tensor.dim == 4 * 4 * 4
    np.testing.assert_array_equal(asm.u_grid, np.linspace(0.0, 1.0, 3))

    W, y, w = asm.problem.dense_rows()
    # subject-balanced weights 1/(n * H * F * J_i), repeated per block
    expected_w = np.tile([1 / 24, 1 / 24, 1 / 36, 1 / 36, 1 / 36], 6)
    np.testing.assert_allclose(w, expected_w, rtol=1e-15)
    # every design row is a product of partitions of unity
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)

    # the value domain is the pooled data/base range widened by 5%
    gi_all = np.array([0, 2, 1, 3, 4])
    x_all = np.array([0.5, -0.3, 1.0, 0.2, -0.7])
    z0_pool = np.random.default_rng(123).standard_normal((2, 5))
    pooled = np.concatenate([x_all, z0_pool[:, gi_all].ravel()])
    margin = 0.05 * (pooled.max() - pooled.min())
    assert asm.x_domain == (pooled.min() - margin, pooled.max() + margin)


def test_assembly_responses_and_row_basis():
    ds = _tiny_ds()
    cfg = FlowTrainingConfig(H=2, F=3, L_u=4, L_t=4, L_x=4, seed=123)
    asm = assemble_training(ds, cfg, keep_rows=True)
    W, y, _ = asm.problem.dense_rows()

    gi_all = np.array([0, 2, 1, 3, 4])
    t_all = ds.grid.values[gi_all]
    x_all = np.array([0.5, -0.3, 1.0, 0.2, -0.7])
    z0_pool = np.random.default_rng(123).standard_normal((2, 5))
    z0_pts = z0_pool[:, gi_all]
    bu, bt, bx = asm.tensor.bases

    for h in range(2):
        for f, u in enumerate(np.linspace(0.0, 1.0, 3)):
            block = slice((h * 3 + f) * 5, (h * 3 + f) * 5 + 5)
            # response is the displacement X - Z0, identical across u
            np.testing.assert_array_equal(y[block], x_all - z0_pts[h])
            # rows are the tensor basis at (u, T_ij, Z_u)
            zu = (1 - u) * z0_pts[h] + u * x_all
            for i in range(5):
                row = np.kron(bu.design_matrix([u])[0],
                              np.kron(bt.design_matrix([t_all[i]])[0],
                                      bx.design_matrix([zu[i]])[0]))
                np.testing.assert_allclose(W[block][i], row, atol=1e-14)


def test_assembly_rejects_bad_sampler():
    def bad_sampler(rng, h, grid):
        return np.zeros((h, grid.n_points - 1))

    with pytest.raises(ValidationError, match="base sampler"):
        assemble_training(_tiny_ds(), FlowTrainingConfig(H=2, F=3),
                          base_sampler=bad_sampler)


def test_config_validation():
    with pytest.raises(ValidationError, match="H must be"):
        FlowTrainingConfig(H=0)
    with pytest.raises(ValidationError, match="F must be"):
        FlowTrainingConfig(F=1)
    with pytest.raises(ValidationError, match="L_x must be"):
        FlowTrainingConfig(L_x=3)


# ---------------------------------------------------------------------------
# exact transport for hand-built fields
# ---------------------------------------------------------------------------


def test_constant_field_transports_exactly():
    field = _field_from_xcoef(np.full(5, 0.7))
    x0 = np.linspace(-1.0, 1.0, 9)
    t = np.full_like(x0, 0.3)
    x1 = integrate_points(FlowMap(field, "forward", 50), t, x0)
    np.testing.assert_allclose(x1, x0 + 0.7, atol=1e-12)
    back = integrate_points(FlowMap(field, "backward", 50), t, x1)
    np.testing.assert_allclose(back, x0, atol=1e-12)
    assert integrate(FlowMap(field, "forward", 50), 0.5, 0.25) == pytest.approx(0.95, abs=1e-12)


def test_linear_field_matches_exponential_growth():
    # coefficients at the Greville abscissae reproduce V(u, t, x) = x exactly,
    # whose flow is x0 * e^u
    basis_x = BSplineBasis(6, (-4.0, 4.0))
    field = _field_from_xcoef(_greville(basis_x))
    probe = np.linspace(-4.0, 4.0, 30)
    np.testing.assert_allclose(
        field.evaluate(np.full(30, 0.37), np.full(30, 0.61), probe), probe, atol=1e-12)

    x0 = np.linspace(-1.0, 1.0, 9)
    t = np.full_like(x0, 0.5)
    x1 = integrate_points(FlowMap(field, "forward", 50), t, x0)
    np.testing.assert_allclose(x1, np.e * x0, rtol=1e-6, atol=1e-8)

    stats = roundtrip_error(field, RegularGrid(0.0, 1.0, 10),
                            np.linspace(-1.0, 1.0, 9), steps=50)
    assert stats["max"] < 1e-6
    assert stats["mean"] <= stats["max"]


def test_zero_field_is_the_identity_map():
    field = _field_from_xcoef(np.zeros(5))
    x0 = np.linspace(-2.0, 2.0, 7)
    x1 = integrate_points(FlowMap(field, "forward", 50), np.full_like(x0, 0.1), x0)
    np.testing.assert_array_equal(x1, x0)


# ---------------------------------------------------------------------------
# fitted fields against the population optimum
# ---------------------------------------------------------------------------


def test_fitted_field_matches_population_formula_white_data():
    # for X and Z0 both iid N(0,1) the population field is
    # (2u - 1) x / (u^2 + (1-u)^2)
    field = _white_field()
    uu, tt, xx = np.meshgrid(np.linspace(0.05, 0.95, 7), np.linspace(0.1, 0.9, 5),
                             np.linspace(-1.2, 1.2, 9), indexing="ij")
    pred = field.evaluate(uu.ravel(), tt.ravel(), xx.ravel())
    truth = ((2 * uu - 1) * xx / (uu ** 2 + (1 - uu) ** 2)).ravel()
    rel = np.linalg.norm(pred - truth) / np.linalg.norm(truth)
    assert rel < 0.45
    assert field.fit_info["converged"]

    # the exact dynamics integrates to the identity map; the fitted one
    # should stay close for central starting points
    x0 = np.linspace(-1.5, 1.5, 13)
    x1 = integrate_points(FlowMap(field, "forward", 50), np.full_like(x0, 0.5), x0)
    assert np.mean(np.abs(x1 - x0)) < 0.3


def test_fitted_field_recovers_mean_shift():
    # X ~ N(2, 1) vs base N(0, 1): population field c + (2u-1)(x - uc)/sigma_u^2,
    # whose flow is the pure shift x0 + c
    c = 2.0
    ds = _sparse_normal_ds(7, shift=c)
    field = fit_vector_field(ds, FlowTrainingConfig(H=10, F=12, seed=[9, 2]))

    uu, tt, xx = np.meshgrid(np.linspace(0.05, 0.95, 7), np.linspace(0.1, 0.9, 5),
                             np.linspace(-1.2, 1.2, 9), indexing="ij")
    xq = xx + c * uu  # probe along the transported bulk
    pred = field.evaluate(uu.ravel(), tt.ravel(), xq.ravel())
    truth = (c + (2 * uu - 1) * (xq - uu * c) / (uu ** 2 + (1 - uu) ** 2)).ravel()
    assert np.linalg.norm(pred - truth) / np.linalg.norm(truth) < 0.25

    x0 = np.linspace(-1.5, 1.5, 13)
    x1 = integrate_points(FlowMap(field, "forward", 50), np.full_like(x0, 0.5), x0)
    shift = x1 - x0
    assert np.mean(np.abs(shift - c)) < 0.6
    assert shift.min() > 1.2 and shift.max() < 2.8


def test_fit_is_deterministic():
    ds = _sparse_normal_ds(3, n=40, grid_points=10, j_range=(4, 7))
    cfg = FlowTrainingConfig(H=4, F=6, seed=[1, 2, 3])
    a = fit_vector_field(ds, cfg)
    b = fit_vector_field(ds, cfg)
    np.testing.assert_array_equal(a.beta, b.beta)
    assert a.x_domain == b.x_domain


# ---------------------------------------------------------------------------
# serialization and failure modes
# ---------------------------------------------------------------------------


def test_field_serialization_roundtrip():
    field = _white_field()
    back = TensorSplineField.from_dict(field.to_dict())
    np.testing.assert_array_equal(back.beta, field.beta)
    assert back.x_domain == field.x_domain
    u = np.array([0.2, 0.8])
    t = np.array([0.4, 0.6])
    x = np.array([-0.5, 1.0])
    np.testing.assert_array_equal(back.evaluate(u, t, x), field.evaluate(u, t, x))
    with pytest.raises(ValidationError, match="unsupported field format"):
        TensorSplineField.from_dict({"format": 99})


def test_field_validation():
    tensor = TensorBasis3(BSplineBasis(4, (0.0, 1.0)), BSplineBasis(4, (0.0, 1.0)),
                          BSplineBasis(4, (-1.0, 1.0)))
    with pytest.raises(ValidationError, match="length"):
        TensorSplineField(tensor, np.zeros(10), (-1.0, 1.0))
    bad = np.zeros(64)
    bad[3] = np.nan
    with pytest.raises(ValidationError, match="non-finite"):
        TensorSplineField(tensor, bad, (-1.0, 1.0))


def test_flow_map_validation():
    field = _field_from_xcoef(np.zeros(5))
    with pytest.raises(ValidationError, match="forward|backward"):
        FlowMap(field, "sideways")
    with pytest.raises(ValidationError, match="steps"):
        FlowMap(field, "forward", steps=5)


def test_diverging_integration_raises_with_step_index():
    boom = _field_from_xcoef(np.full(5, 1e308))
    x0 = np.linspace(-1.0, 1.0, 5)
    with pytest.raises(NumericalError, match="RK4 step"):
        integrate_points(FlowMap(boom, "forward", 50), np.full_like(x0, 0.5), x0)
    with pytest.raises(NumericalError, match="non-finite initial state"):
        integrate_points(FlowMap(boom, "forward", 50), np.array([0.5]), np.array([np.nan]))


def test_integrate_curves_shapes_and_parking():
    grid = RegularGrid(0.0, 1.0, 10)
    field = _field_from_xcoef(np.full(5, 0.25))
    curves = np.zeros((3, 10))
    out = integrate_curves(field, curves, grid)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)
    with pytest.raises(ValidationError, match="does not match the grid"):
        integrate_curves(field, np.zeros((3, 7)), grid)

    boom = _field_from_xcoef(np.full(5, 1e308))
    parked = integrate_curves(boom, curves, grid, strict=False)
    assert np.all(np.isnan(parked))


def test_white_sampler_shape_and_determinism():
    grid = RegularGrid(0.0, 1.0, 12)
    a = white_normal_sampler(np.random.default_rng(5), 4, grid)
    b = white_normal_sampler(np.random.default_rng(5), 4, grid)
    assert a.shape == (4, 12)
    np.testing.assert_array_equal(a, b)

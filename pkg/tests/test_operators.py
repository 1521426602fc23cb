import numpy as np
import pytest

from smc.errors import InvalidThetaError
from smc.grid import Field, build_grid, inner_product, norm_h
from smc.operators import (
    OperatorSpec,
    SpaceMeanOperator,
    apply_a,
    apply_a_star,
    check_garding,
    operator_matrix,
    space_mean,
    space_mean_adjoint,
    space_mean_dual_weight,
)


def overlap_mean(x, theta, x_min=0.0, x_max=1.0):
    """Closed-form window average of the indicator of D for constant 1 data."""
    return (min(x_max, x + theta) - max(x_min, x - theta)) / (2.0 * theta)


# ---------------------------------------------------------------------------
# space mean
# ---------------------------------------------------------------------------


def test_space_mean_constant_interior_window():
    g = build_grid(0.0, 1.0, 199)
    one = Field.from_function(g, lambda x: np.ones_like(x))
    m = space_mean(one, 0.1)
    mid = np.argmin(np.abs(g.nodes - 0.5))
    assert m.values[mid] == pytest.approx(1.0, abs=1e-13)
    inner = (g.nodes > 0.1 + 1e-12) & (g.nodes < 0.9 - 1e-12)
    np.testing.assert_allclose(m.values[inner], 1.0, atol=1e-13)


def test_space_mean_constant_near_boundary_matches_overlap():
    g = build_grid(0.0, 1.0, 199)
    one = Field.from_function(g, lambda x: np.ones_like(x))
    m = space_mean(one, 0.1)
    i = np.argmin(np.abs(g.nodes - 0.05))
    assert m.values[i] == pytest.approx(overlap_mean(g.nodes[i], 0.1), abs=1e-13)
    assert m.values[i] == pytest.approx(0.75, abs=1e-12)


def test_space_mean_linear_function_center_value():
    g = build_grid(0.0, 1.0, 199)
    lin = Field.from_function(g, lambda x: x)
    m = space_mean(lin, 0.1)
    mid = np.argmin(np.abs(g.nodes - 0.5))
    assert m.values[mid] == pytest.approx(0.5, abs=1e-13)


def test_space_mean_rejects_bad_theta():
    g = build_grid(0.0, 1.0, 20)
    f = Field.zeros(g)
    with pytest.raises(InvalidThetaError):
        space_mean(f, 0.0)
    with pytest.raises(InvalidThetaError):
        space_mean(f, -0.3)


def test_space_mean_linearity():
    g = build_grid(0.0, 1.0, 80)
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b = rng.standard_normal(2)
        f = rng.standard_normal(g.n_total)
        p = rng.standard_normal(g.n_total)
        op = SpaceMeanOperator(g, 0.13)
        left = op.apply(a * f + b * p)
        right = a * op.apply(f) + b * op.apply(p)
        np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-14)


def test_space_mean_matrix_matches_apply():
    g = build_grid(0.0, 1.0, 60)
    op = SpaceMeanOperator(g, 0.07)
    rng = np.random.default_rng(5)
    v = rng.standard_normal(g.n_total)
    np.testing.assert_allclose(op.matrix @ v, op.apply(v), rtol=1e-12, atol=1e-15)


def test_space_mean_contraction_random_fields():
    # discrete echo of ||G phi|| <= ||phi|| with quadrature cushion 10 h ||phi||
    rng = np.random.default_rng(2024)
    for n in (50, 100, 200):
        g = build_grid(0.0, 1.0, n)
        theta = 0.1
        for _ in range(350):
            f = Field.from_interior(g, rng.standard_normal(n))
            m = space_mean(f, theta)
            m_interior = Field(g, np.concatenate([[0.0], m.interior, [0.0]]))
            assert norm_h(m_interior) <= norm_h(f) * (1.0 + 10.0 * g.h)


def test_space_mean_adjoint_identity_exact():
    g = build_grid(0.0, 1.0, 120)
    rng = np.random.default_rng(9)
    theta = 0.09
    for _ in range(50):
        f = Field.from_interior(g, rng.standard_normal(120))
        p = Field.from_interior(g, rng.standard_normal(120))
        lhs = inner_product(space_mean(f, theta), p)
        rhs = inner_product(f, space_mean_adjoint(p, theta))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


def test_space_mean_adjoint_of_one_approximates_dual_weight():
    g = build_grid(0.0, 1.0, 200)
    theta = 0.1
    ones = Field.from_function(g, lambda x: np.ones_like(x))
    adj = space_mean_adjoint(ones, theta)
    w = space_mean_dual_weight(g, theta)
    err = np.max(np.abs(adj.interior - w.interior))
    assert err <= 10.0 * g.h


def test_dual_weight_closed_form():
    g = build_grid(0.0, 1.0, 100)
    theta = 0.1
    w = space_mean_dual_weight(g, theta)
    expected = [overlap_mean(x, theta) for x in g.nodes]
    np.testing.assert_allclose(w.values, expected, atol=1e-12)
    i0 = np.argmin(np.abs(g.nodes - 0.0))
    i1 = np.argmin(np.abs(g.nodes - 1.0))
    mid = np.argmin(np.abs(g.nodes - 0.5))
    assert w.values[i0] == pytest.approx(0.5, abs=1e-15)
    assert w.values[i1] == pytest.approx(0.5, abs=1e-15)
    assert w.values[mid] == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------------------
# generator and adjoint
# ---------------------------------------------------------------------------


def test_apply_a_exact_on_quadratic():
    g = build_grid(0.0, 1.0, 40)
    op = OperatorSpec(second_order=0.5, first_order=0.0)
    u = Field.from_function(g, lambda x: x * (1.0 - x))
    out = apply_a(u, op)
    np.testing.assert_allclose(out.interior, -1.0, atol=1e-11)
    assert out.values[0] == 0.0 and out.values[-1] == 0.0


def test_apply_a_annihilates_constants():
    g = build_grid(0.0, 1.0, 25)
    op = OperatorSpec(second_order=0.5, first_order=0.0)
    u = Field.from_function(g, lambda x: 3.7 * np.ones_like(x))
    np.testing.assert_allclose(apply_a(u, op).values, 0.0, atol=1e-11)


def test_apply_a_eigenfunction_accuracy():
    g = build_grid(0.0, 1.0, 200)
    op = OperatorSpec(second_order=0.5, first_order=0.0)
    u = Field.from_function(g, lambda x: np.sin(np.pi * x))
    out = apply_a(u, op)
    expected = -(np.pi**2 / 2.0) * np.sin(np.pi * g.interior)
    assert np.max(np.abs(out.interior - expected)) <= 1e-3


def test_adjoint_equals_direct_for_pure_diffusion():
    g = build_grid(0.0, 1.0, 50)
    op = OperatorSpec(second_order=0.5, first_order=0.0)
    rng = np.random.default_rng(17)
    u = Field.from_function(g, lambda x: np.interp(x, [0, 0.3, 0.8, 1], [0.2, 1.1, -0.4, 0.6]))
    np.testing.assert_allclose(
        apply_a_star(u, op).values, apply_a(u, op).values, rtol=1e-12, atol=1e-12
    )
    u2 = Field(g, rng.standard_normal(g.n_total), "dirichlet-data")
    np.testing.assert_allclose(
        apply_a_star(u2, op).values, apply_a(u2, op).values, rtol=1e-12, atol=1e-10
    )


def test_green_identity_with_drift():
    g = build_grid(0.0, 1.0, 64)
    op = OperatorSpec(second_order=0.5, first_order=1.0)
    rng = np.random.default_rng(23)
    for _ in range(25):
        f = Field.from_interior(g, rng.standard_normal(64))
        p = Field.from_interior(g, rng.standard_normal(64))
        lhs = inner_product(apply_a(f, op), p)
        rhs = inner_product(f, apply_a_star(p, op))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-13)


def test_adjoint_matrix_is_transpose():
    g = build_grid(0.0, 1.0, 30)
    rng = np.random.default_rng(4)
    op = OperatorSpec(second_order=rng.uniform(0.1, 1.0, 30), first_order=rng.standard_normal(30))
    direct = operator_matrix(op, g, adjoint=False)
    adj = operator_matrix(op, g, adjoint=True)
    np.testing.assert_allclose(adj, direct.T, rtol=1e-14, atol=1e-14)


def test_adjoint_pure_drift_on_quadratic():
    g = build_grid(0.0, 1.0, 40)
    op = OperatorSpec(second_order=0.0, first_order=1.0)
    u = Field.from_function(g, lambda x: x * (1.0 - x), boundary_kind="dirichlet-zero")
    out = apply_a_star(u, op)
    expected = -(1.0 - 2.0 * g.interior)
    np.testing.assert_allclose(out.interior, expected, atol=1e-11)


# ---------------------------------------------------------------------------
# coercivity
# ---------------------------------------------------------------------------


def test_garding_pure_diffusion_lambda_zero():
    g = build_grid(0.0, 1.0, 60)
    rep = check_garding(OperatorSpec(second_order=0.5, first_order=0.0), g)
    assert rep.satisfied
    assert rep.alpha > 0.0
    assert rep.lam == 0.0
    # analytic value 1/(1 + C_P) with the discrete Poincare constant
    c_p = g.h**2 / (4.0 * np.sin(np.pi * g.h / 2.0) ** 2)
    assert rep.alpha == pytest.approx(1.0 / (1.0 + c_p), rel=1e-8)


def test_garding_zero_operator_fails():
    g = build_grid(0.0, 1.0, 40)
    rep = check_garding(OperatorSpec(second_order=0.0, first_order=0.0), g)
    assert not rep.satisfied
    assert rep.alpha == 0.0


def test_garding_with_drift_satisfied():
    g = build_grid(0.0, 1.0, 60)
    rep = check_garding(OperatorSpec(second_order=0.5, first_order=1.0), g)
    assert rep.satisfied
    assert rep.alpha > 0.0


def test_garding_certificate_on_random_fields():
    g = build_grid(0.0, 1.0, 45)
    op = OperatorSpec(second_order=0.5, first_order=1.0)
    rep = check_garding(op, g)
    rng = np.random.default_rng(31)
    a_mat = operator_matrix(op, g)
    h = g.h
    lap = 2.0 * np.eye(45) - np.eye(45, k=1) - np.eye(45, k=-1)
    for _ in range(200):
        u = rng.standard_normal(45)
        q = -2.0 * h * u @ a_mat @ u
        norm_sq = h * u @ u
        grad_sq = u @ lap @ u / h
        lhs = q + rep.lam * norm_sq
        rhs = rep.alpha * (norm_sq + grad_sq)
        assert lhs >= rhs - 1e-9 * max(1.0, abs(rhs))

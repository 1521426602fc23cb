"""Spatial operators: second-order generator, its adjoint, and the space mean.

Three operator families live here.

* ``apply_a`` / ``apply_a_star``: the second-order generator
  A u = a(x) u'' + b(x) u' discretized with central differences at interior
  nodes, and its formal adjoint A* u = (a u)'' - (b u)'.  Boundary rows of
  both are zero; Dirichlet data is the time-steppers' business.
* The windowed space mean G u(x) = (1/2theta) * integral of u over
  (x - theta, x + theta), with u extended by zero outside the domain.  The
  window integral is exact for the piecewise-linear interpolant of the nodal
  values (trapezoid rule on whole cells, analytic integration of the
  fractional end cells).
* ``check_garding``: discrete coercivity constants of the assembled
  generator against the Sobolev norm of :func:`smc.grid.norm_w`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from .errors import InvalidThetaError
from .grid import DIRICHLET_DATA, DIRICHLET_ZERO, Field, Grid

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class OperatorSpec:
    """Coefficients of the generator A u = a u'' + b u' plus averaging radius.

    ``second_order`` and ``first_order`` may be scalars or per-interior-node
    arrays.  ``theta`` is the space-mean window radius.
    """

    second_order: ArrayLike = 0.0
    first_order: ArrayLike = 0.0
    theta: float = 0.1

    def __post_init__(self):
        if np.any(np.asarray(self.second_order) < 0.0):
            raise ValueError("second-order coefficient must be nonnegative")
        if not self.theta > 0.0:
            raise InvalidThetaError(f"theta must be positive, got {self.theta}")

    def resolve(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast the coefficients to one value per interior node."""
        if not self.theta < grid.width:
            raise InvalidThetaError(
                f"theta ({self.theta}) must be smaller than the domain width ({grid.width})"
            )
        a = np.broadcast_to(np.asarray(self.second_order, dtype=float), (grid.n_cells,))
        b = np.broadcast_to(np.asarray(self.first_order, dtype=float), (grid.n_cells,))
        return a.copy(), b.copy()


# ---------------------------------------------------------------------------
# Second-order generator and adjoint
# ---------------------------------------------------------------------------


def operator_tridiagonal(
    op: OperatorSpec, grid: Grid, adjoint: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interior tridiagonal bands (lower, diag, upper) of A or A*.

    ``lower[i]`` couples interior node i to node i-1 (lower[0] is unused),
    ``upper[i]`` couples node i to node i+1 (upper[-1] is unused).  For the
    adjoint the bands are the exact transpose of the direct bands, so the
    discrete Green identity holds to rounding for zero-boundary fields.
    """
    a, b = op.resolve(grid)
    h = grid.h
    if not adjoint:
        lower = a / h**2 - b / (2.0 * h)
        diag = -2.0 * a / h**2
        upper = a / h**2 + b / (2.0 * h)
        return lower, diag, upper
    direct_lower, diag, direct_upper = operator_tridiagonal(op, grid, adjoint=False)
    lower = np.empty_like(diag)
    upper = np.empty_like(diag)
    lower[1:] = direct_upper[:-1]
    upper[:-1] = direct_lower[1:]
    lower[0] = direct_upper[0]
    upper[-1] = direct_lower[-1]
    return lower, diag, upper


def operator_matrix(op: OperatorSpec, grid: Grid, adjoint: bool = False) -> np.ndarray:
    """Dense interior matrix of A (or A*)."""
    lower, diag, upper = operator_tridiagonal(op, grid, adjoint)
    n = grid.n_cells
    mat = np.diag(diag)
    mat[np.arange(1, n), np.arange(n - 1)] = lower[1:]
    mat[np.arange(n - 1), np.arange(1, n)] = upper[:-1]
    return mat


def boundary_coupling(op: OperatorSpec, grid: Grid, adjoint: bool = False) -> tuple[float, float]:
    """Stencil weights tying the first/last interior row to the boundary nodes."""
    a, b = op.resolve(grid)
    h = grid.h
    if not adjoint:
        left = a[0] / h**2 - b[0] / (2.0 * h)
        right = a[-1] / h**2 + b[-1] / (2.0 * h)
    else:
        # Adjoint reads (a u) and (b u) at the boundary; coefficients are
        # extended there by edge replication.
        left = a[0] / h**2 + b[0] / (2.0 * h)
        right = a[-1] / h**2 - b[-1] / (2.0 * h)
    return float(left), float(right)


def apply_a_values(values: np.ndarray, op: OperatorSpec, grid: Grid) -> np.ndarray:
    """A applied to nodal values (full vector in, full vector out, zero boundary rows).

    ``values`` may be shape (n_total,) or (n_total, n_paths).
    """
    a, b = op.resolve(grid)
    h = grid.h
    if values.ndim == 2:
        a = a[:, None]
        b = b[:, None]
    out = np.zeros_like(values)
    out[1:-1] = (
        a * (values[2:] - 2.0 * values[1:-1] + values[:-2]) / h**2
        + b * (values[2:] - values[:-2]) / (2.0 * h)
    )
    return out


def apply_a(field: Field, op: OperatorSpec) -> Field:
    """Central-difference discretization of A u = a u'' + b u'."""
    return Field(field.grid, apply_a_values(field.values, op, field.grid), DIRICHLET_ZERO)


def apply_a_star(field: Field, op: OperatorSpec) -> Field:
    """Discrete adjoint A* u = (a u)'' - (b u)'.

    Coefficients are stored per interior node; boundary values are extended
    by edge replication, which only matters for fields with nonzero boundary
    data.  For zero-boundary fields the matrix is exactly the transpose of
    :func:`apply_a`'s matrix.
    """
    grid = field.grid
    a, b = op.resolve(grid)
    h = grid.h
    a_ext = np.concatenate(([a[0]], a, [a[-1]]))
    b_ext = np.concatenate(([b[0]], b, [b[-1]]))
    p = a_ext * field.values
    q = b_ext * field.values
    out = np.zeros_like(field.values)
    out[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / h**2 - (q[2:] - q[:-2]) / (2.0 * h)
    return Field(grid, out, DIRICHLET_ZERO)


# ---------------------------------------------------------------------------
# Space mean
# ---------------------------------------------------------------------------


class SpaceMeanOperator:
    """Windowed average over (x - theta, x + theta) with zero extension.

    The operator integrates the piecewise-linear interpolant of the nodal
    values over the window clipped to the domain and divides by the full
    window volume 2*theta, so partially covered windows are sub-averages.
    Application is vectorized over a trailing path axis.
    """

    def __init__(self, grid: Grid, theta: float):
        if not theta > 0.0:
            raise InvalidThetaError(f"theta must be positive, got {theta}")
        self.grid = grid
        self.theta = float(theta)
        nodes = grid.nodes
        h = grid.h
        lo = np.maximum(nodes - theta, grid.x_min)
        hi = np.minimum(nodes + theta, grid.x_max)
        self._j_lo, self._s_lo = self._locate(lo)
        self._j_hi, self._s_hi = self._locate(hi)
        self._matrix: np.ndarray | None = None
        self._h = h

    def _locate(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.grid.h
        j = np.clip(np.floor((y - self.grid.x_min) / h).astype(int), 0, self.grid.n_total - 2)
        s = np.clip(y - self.grid.nodes[j], 0.0, h)
        return j, s

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Average nodal values; works on (n_total,) or (n_total, n_paths) arrays."""
        h = self._h
        cell = 0.5 * h * (values[:-1] + values[1:])
        cum = np.concatenate(
            [np.zeros((1,) + values.shape[1:]), np.cumsum(cell, axis=0)], axis=0
        )

        def antiderivative(j, s):
            sl = s if values.ndim == 1 else s[:, None]
            return cum[j] + sl * values[j] + sl**2 * (values[j + 1] - values[j]) / (2.0 * h)

        upper = antiderivative(self._j_hi, self._s_hi)
        lower = antiderivative(self._j_lo, self._s_lo)
        return (upper - lower) / (2.0 * self.theta)

    def __call__(self, field: Field) -> Field:
        return Field(self.grid, self.apply(field.values), DIRICHLET_DATA)

    @property
    def matrix(self) -> np.ndarray:
        """Dense matrix over all nodes; column j is the image of the j-th hat value."""
        if self._matrix is None:
            self._matrix = self.apply(np.eye(self.grid.n_total))
            self._matrix.setflags(write=False)
        return self._matrix

    def apply_adjoint(self, values: np.ndarray) -> np.ndarray:
        """Exact adjoint under the interior h-weighted inner product.

        The spacing is uniform, so the adjoint of the interior block is its
        plain transpose; boundary rows of the result are zero.
        """
        interior_block = self.matrix[1:-1, 1:-1]
        out = np.zeros_like(values)
        out[1:-1] = interior_block.T @ values[1:-1]
        return out


def space_mean(field: Field, theta: float) -> Field:
    """Windowed spatial average of ``field`` (zero extension outside D)."""
    return SpaceMeanOperator(field.grid, theta)(field)


def space_mean_adjoint(field: Field, theta: float) -> Field:
    """Adjoint of :func:`space_mean` under the discrete inner product."""
    op = SpaceMeanOperator(field.grid, theta)
    return Field(field.grid, op.apply_adjoint(field.values), DIRICHLET_ZERO)


def space_mean_dual_weight(grid: Grid, theta: float) -> Field:
    """Closed-form weight |(x - theta, x + theta) ∩ D| / (2 theta) at every node."""
    if not theta > 0.0:
        raise InvalidThetaError(f"theta must be positive, got {theta}")
    lo = np.maximum(grid.nodes - theta, grid.x_min)
    hi = np.minimum(grid.nodes + theta, grid.x_max)
    w = np.maximum(hi - lo, 0.0) / (2.0 * theta)
    return Field(grid, w, DIRICHLET_DATA)


# ---------------------------------------------------------------------------
# Coercivity check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoercivityReport:
    """Constants certifying 2<(-A)u, u> + lam * ||u||_H^2 >= alpha * ||u||_W^2.

    ``gamma`` is the domination constant of the dissipation form over the
    pure gradient seminorm; the certificate requires ``gamma > 0``, which is
    the resolution-robust content of the inequality (a zero or sign-indefinite
    form cannot dominate the gradient norm at any resolution).
    """

    alpha: float
    lam: float
    satisfied: bool
    gamma: float


def check_garding(op: OperatorSpec, grid: Grid, tol: float = 1e-10) -> CoercivityReport:
    """Compute discrete coercivity constants of the assembled generator.

    The quadratic form examined is Q(u) = 2 <(-A)u, u>_h over zero-boundary
    interior vectors.  The report carries (alpha, lam) with alpha > 0 when
    the form dominates the discrete Sobolev norm up to a zeroth-order shift.
    """
    n = grid.n_cells
    h = grid.h
    a_mat = operator_matrix(op, grid)
    q = -h * (a_mat + a_mat.T)
    lap = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    grad_gram = lap / h
    m_h = h * np.eye(n)
    m_w = m_h + grad_gram

    gamma = float(scipy.linalg.eigvalsh(q, grad_gram)[0])
    if gamma <= tol:
        return CoercivityReport(alpha=0.0, lam=0.0, satisfied=False, gamma=gamma)

    alpha0 = float(scipy.linalg.eigvalsh(q, m_w)[0])
    if alpha0 > tol:
        return CoercivityReport(alpha=alpha0, lam=0.0, satisfied=True, gamma=gamma)

    mu = float(scipy.linalg.eigvalsh(q, m_h)[0])
    lam = 2.0 * abs(mu)
    alpha = float(scipy.linalg.eigvalsh(q + lam * m_h, m_w)[0])
    return CoercivityReport(alpha=alpha, lam=lam, satisfied=alpha > tol, gamma=gamma)

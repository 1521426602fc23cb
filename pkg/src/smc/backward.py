"""Reflected backward equations solved by penalization.

The target system, stated for the lower reflection side, is

    dY = -A Y dt - F(t, Y, Ybar, Z, Zbar) dt + Z dB - eta(dt, x),
    Y(T) = phi,    Y >= L,    integral of (Y - L) against eta(dt, x) dx = 0,

with eta nonnegative and nondecreasing.  The penalized approximation at
level n replaces the constraint by the drift n (Y - L)^- and is stepped
implicitly in both the generator and the penalty; the nonsmooth negative
part is handled by a semi-smooth active-set fixed point per step.  The
reflection measure is recovered from the top penalization level as the
running time integral of n (Y^n - L)^-.

Two backends:

* deterministic: F, phi, L deterministic, so the solution is deterministic
  and Z is identically zero (the martingale term vanishes);
* regression Monte Carlo: per-path backward induction with conditional
  expectations by ridge-regularized least squares on polynomial features of
  the forward state and its space mean.

Upper-side problems are solved by negation of the data and mapped back, so
the negation duality holds bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from .errors import (
    BasisDegenerateError,
    DegenerateFitError,
    GridMismatchError,
    NoConvergenceError,
    NonCauchyError,
    TerminalConsistencyError,
)
from .forward import SingularControl, map_ordered
from .grid import Field, FieldPath, Grid
from .operators import OperatorSpec, SpaceMeanOperator, operator_tridiagonal

LOWER = "lower"
UPPER = "upper"
BACKWARD_EULER = "backward-euler"
CRANK_NICOLSON = "crank-nicolson"

_INACTIVE = -1e300  # obstacle stand-in when no barrier is given


@dataclass(frozen=True)
class BackwardSpec:
    """Data of one reflected backward problem on the grid.

    ``driver`` has signature F(t, x_int, y, ybar, z, zbar) -> array over
    interior nodes and must be Lipschitz in (y, ybar, z, zbar).  ``obstacle``
    is a callable L(t, nodes) -> values, or None for an unconstrained solve.
    ``singular`` optionally couples a nondecreasing control to the drift:
    the pair (control, coefficient) adds coefficient(t, x_int, y) * dxi_k to
    the backward step.  Homogeneous Dirichlet boundary throughout.
    """

    grid: Grid
    op: OperatorSpec
    horizon: float
    n_steps: int
    terminal: Field
    driver: Callable | None = None
    obstacle: Callable | None = None
    reflection_side: str = LOWER
    singular: tuple[SingularControl, Callable] | None = None
    use_adjoint_operator: bool = False
    allow_terminal_violation: bool = False
    time_scheme: str = BACKWARD_EULER
    max_fixed_point_iters: int = 100
    fixed_point_tol: float = 1e-12

    def __post_init__(self):
        if self.horizon <= 0.0 or self.n_steps < 1:
            raise ValueError("horizon must be positive and n_steps >= 1")
        if self.reflection_side not in (LOWER, UPPER):
            raise ValueError(f"unknown reflection side {self.reflection_side!r}")
        if self.time_scheme not in (BACKWARD_EULER, CRANK_NICOLSON):
            raise ValueError(f"unknown time scheme {self.time_scheme!r}")
        if self.time_scheme == CRANK_NICOLSON and self.obstacle is not None:
            raise ValueError("crank-nicolson stepping supports unconstrained solves only")
        if not self.terminal.grid.same_as(self.grid):
            raise GridMismatchError("terminal field grid differs from problem grid")
        if self.singular is not None:
            control, _ = self.singular
            expected = (self.n_steps + 1, self.grid.n_cells)
            if control.cumulative.shape != expected:
                raise GridMismatchError(
                    f"singular control shape {control.cumulative.shape} != {expected}"
                )
        if self.obstacle is not None and not self.allow_terminal_violation:
            barrier = np.asarray(self.obstacle(self.horizon, self.grid.nodes), dtype=float)[1:-1]
            gap = self.terminal.interior - barrier
            if self.reflection_side == UPPER:
                gap = -gap
            if np.min(gap) < -1e-12:
                raise TerminalConsistencyError(
                    f"terminal data violates the obstacle by {-float(np.min(gap)):.3e} "
                    f"on the {self.reflection_side} side"
                )

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def obstacle_interior(self, t: float) -> np.ndarray:
        if self.obstacle is None:
            return np.full(self.grid.n_cells, _INACTIVE)
        return np.asarray(self.obstacle(t, self.grid.nodes), dtype=float)[1:-1]


@dataclass(frozen=True)
class SolutionDiagnostics:
    skorokhod_residual: float
    skorokhod_scale: float
    min_gap: float
    penalization_level: int
    levels: tuple[int, ...]
    cauchy_gaps: tuple[float, ...]


@dataclass(frozen=True)
class BackwardSolution:
    """Triple (Y, Z, eta) plus diagnostics from the reflected solve."""

    y: FieldPath
    z: FieldPath
    eta: FieldPath
    diagnostics: SolutionDiagnostics


# ---------------------------------------------------------------------------
# Normalization to a lower-side problem
# ---------------------------------------------------------------------------


class _Normalized:
    """Lower-side view of the problem; sign = -1 flips an upper-side input."""

    def __init__(self, spec: BackwardSpec):
        self.spec = spec
        self.sign = 1.0 if spec.reflection_side == LOWER else -1.0

    def terminal_values(self) -> np.ndarray:
        return self.sign * self.spec.terminal.values

    def obstacle_interior(self, t: float) -> np.ndarray:
        if self.spec.obstacle is None:
            return np.full(self.spec.grid.n_cells, _INACTIVE)
        return self.sign * np.asarray(self.spec.obstacle(t, self.spec.grid.nodes), dtype=float)[1:-1]

    def driver(self, t, x, y, ybar, z, zbar):
        if self.spec.driver is None:
            return None
        s = self.sign
        return s * np.asarray(self.spec.driver(t, x, s * y, s * ybar, s * z, s * zbar), dtype=float)

    def singular_term(self, t, x, y, dxi):
        if self.spec.singular is None:
            return None
        _, coefficient = self.spec.singular
        s = self.sign
        return s * np.asarray(coefficient(t, x, s * y), dtype=float) * dxi


# ---------------------------------------------------------------------------
# Deterministic backend
# ---------------------------------------------------------------------------


def solve_penalized(spec: BackwardSpec, n: int) -> tuple[FieldPath, FieldPath]:
    """Solve the level-n penalized backward equation (deterministic backend).

    Each step solves (I - dt A + dt n diag(active)) y = rhs with the active
    set {y < L} iterated until it stabilizes; the driver and the singular
    coefficient are evaluated at the current iterate, the space mean of Y at
    the previous time level (one lag).  Returns (Y^n, Z^n) with Z identically
    zero.
    """
    if n < 1:
        raise ValueError("penalization level must be >= 1")
    norm = _Normalized(spec)
    grid = spec.grid
    dt = spec.dt
    times = spec.times
    x_int = grid.interior
    n_int = grid.n_cells

    crank = spec.time_scheme == CRANK_NICOLSON
    implicit_weight = 0.5 if crank else 1.0
    lo_a, di_a, up_a = operator_tridiagonal(spec.op, grid, adjoint=spec.use_adjoint_operator)
    c = implicit_weight * dt
    ab_base = np.zeros((3, n_int))
    ab_base[0, 1:] = -c * up_a[:-1]
    ab_base[1, :] = 1.0 - c * di_a
    ab_base[2, :-1] = -c * lo_a[1:]

    def explicit_half(y_int: np.ndarray) -> np.ndarray:
        out = di_a * y_int
        out[1:] += lo_a[1:] * y_int[:-1]
        out[:-1] += up_a[:-1] * y_int[1:]
        return 0.5 * dt * out

    use_mean = spec.driver is not None
    mean_op = SpaceMeanOperator(grid, spec.op.theta) if use_mean else None
    xi_inc = spec.singular[0].increments if spec.singular is not None else None
    zeros = np.zeros(n_int)

    values = np.zeros((spec.n_steps + 1, grid.n_total))
    values[-1] = norm.terminal_values()
    y_full = values[-1].copy()
    for k in range(spec.n_steps - 1, -1, -1):
        t = times[k]
        barrier = norm.obstacle_interior(t)
        ybar = mean_op.apply(y_full)[1:-1] if use_mean else None
        y_prev_int = y_full[1:-1]
        y = y_prev_int.copy()
        active = y < barrier
        depends_on_y = spec.driver is not None or spec.singular is not None
        converged = False
        for _ in range(spec.max_fixed_point_iters):
            rhs = y_prev_int.copy()
            if crank:
                rhs += explicit_half(y_prev_int)
            forcing = norm.driver(t, x_int, y, ybar, zeros, zeros)
            if forcing is not None:
                rhs += dt * forcing
            sing = norm.singular_term(t, x_int, y, xi_inc[k]) if xi_inc is not None else None
            if sing is not None:
                rhs += sing
            rhs += dt * n * np.where(active, barrier, 0.0)
            ab = ab_base.copy()
            ab[1, :] += dt * n * active
            y_new = solve_banded((1, 1), ab, rhs)
            active_new = y_new < barrier
            stable = np.array_equal(active_new, active)
            close = np.max(np.abs(y_new - y)) <= spec.fixed_point_tol * max(
                1.0, float(np.max(np.abs(y_new)))
            )
            y = y_new
            active = active_new
            if stable and (close or not depends_on_y):
                converged = True
                break
        if not converged:
            raise NoConvergenceError(
                f"semi-smooth iteration stalled at step {k} (level {n}, "
                f"cap {spec.max_fixed_point_iters})"
            )
        y_full = np.zeros(grid.n_total)
        y_full[1:-1] = y
        values[k] = y_full

    y_path = FieldPath(grid, times, norm.sign * values)
    z_path = FieldPath(grid, times, np.zeros_like(values))
    return y_path, z_path


def _violation(spec: BackwardSpec, y_path: FieldPath) -> np.ndarray:
    """Side-signed constraint violation per (time node, interior node).

    Lower side: (Y - L)^-; upper side: (Y - L)^+.
    """
    if spec.obstacle is None:
        return np.zeros((spec.n_steps + 1, spec.grid.n_cells))
    sign = 1.0 if spec.reflection_side == LOWER else -1.0
    out = np.empty((spec.n_steps + 1, spec.grid.n_cells))
    for k, t in enumerate(spec.times):
        gap = sign * (y_path.values[k, 1:-1] - spec.obstacle_interior(t))
        out[k] = np.maximum(-gap, 0.0)
    return out


def _gap_field(spec: BackwardSpec, y_path: FieldPath, k: int) -> np.ndarray:
    sign = 1.0 if spec.reflection_side == LOWER else -1.0
    if spec.obstacle is None:
        return np.full(spec.grid.n_cells, np.inf)
    barrier = np.asarray(spec.obstacle(spec.times[k], spec.grid.nodes), dtype=float)[1:-1]
    return sign * (y_path.values[k, 1:-1] - barrier)


def solve_reflected(spec: BackwardSpec, levels: list[int]) -> BackwardSolution:
    """Solve penalized problems along ``levels`` and assemble the reflected triple.

    Y and Z come from the largest level; the reflection measure is the running
    time integral of n (Y^n - L)^- at that level.  Raises NonCauchyError when
    the inter-level gaps sup_t ||Y^n - Y^m||_H stop decreasing beyond a small
    floor.
    """
    levels = [int(n) for n in levels]
    if len(levels) < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be a strictly increasing list of integers")

    solutions = map_ordered(lambda n: solve_penalized(spec, n), levels)
    h = spec.grid.h
    scale = max(1.0, float(np.max(np.abs(solutions[-1][0].values))))
    gaps = []
    for (y_a, _), (y_b, _) in zip(solutions, solutions[1:]):
        diff = y_a.values[:, 1:-1] - y_b.values[:, 1:-1]
        gaps.append(float(np.max(np.sqrt(h * np.sum(diff**2, axis=1)))))
    floor = 1e-12 * scale
    for g_prev, g_next in zip(gaps, gaps[1:]):
        if g_next > 1.01 * g_prev + floor:
            raise NonCauchyError(
                f"penalization gaps increased across levels: {gaps} (levels {levels})"
            )

    n_top = levels[-1]
    y_path, z_path = solutions[-1]
    violation = _violation(spec, y_path)
    eta_inc = spec.dt * n_top * violation[:-1]
    eta_values = np.zeros((spec.n_steps + 1, spec.grid.n_total))
    eta_values[1:, 1:-1] = np.cumsum(eta_inc, axis=0)
    eta_path = FieldPath(spec.grid, spec.times, eta_values)

    residual, res_scale = skorokhod_residual(
        y_path, spec.obstacle, eta_path, side=spec.reflection_side, with_scale=True
    )
    min_gap = float(
        np.min([np.min(_gap_field(spec, y_path, k)) for k in range(spec.n_steps)])
    )
    diag = SolutionDiagnostics(
        skorokhod_residual=residual,
        skorokhod_scale=res_scale,
        min_gap=min_gap,
        penalization_level=n_top,
        levels=tuple(levels),
        cauchy_gaps=tuple(gaps),
    )
    return BackwardSolution(y=y_path, z=z_path, eta=eta_path, diagnostics=diag)


def skorokhod_residual(
    y_path: FieldPath,
    obstacle: Callable | None,
    eta_path: FieldPath,
    side: str = LOWER,
    with_scale: bool = False,
):
    """Complementarity pairing sum_k sum_i (Y - L)(t_k, x_i) deta_k(x_i) h.

    Signed so that an exact solution gives 0: the gap is side-signed, and eta
    charges only where the penalized solution violates the constraint, so the
    value is <= 0 and its magnitude is the complementarity defect.  The scale
    sup_t ||Y||_H * ||eta(T)||_H is returned on request for relative checks.
    """
    if y_path.values.shape != eta_path.values.shape:
        raise GridMismatchError("Y and eta paths have different shapes")
    grid = y_path.grid
    sign = 1.0 if side == LOWER else -1.0
    total = 0.0
    for k in range(y_path.n_times - 1):
        if obstacle is None:
            gap = np.zeros(grid.n_cells)
        else:
            barrier = np.asarray(obstacle(y_path.times[k], grid.nodes), dtype=float)[1:-1]
            gap = sign * (y_path.values[k, 1:-1] - barrier)
        deta = eta_path.values[k + 1, 1:-1] - eta_path.values[k, 1:-1]
        total += float(np.dot(gap, deta)) * grid.h
    if not with_scale:
        return total
    h = grid.h
    y_norm = float(np.max(np.sqrt(h * np.sum(y_path.values[:, 1:-1] ** 2, axis=1))))
    eta_norm = float(np.sqrt(h * np.sum(eta_path.values[-1, 1:-1] ** 2)))
    return total, y_norm * eta_norm


@dataclass(frozen=True)
class RateStudy:
    levels: tuple[int, ...]
    energies: tuple[float, ...]
    slope: float


def penalization_rate(spec: BackwardSpec, levels: list[int]) -> RateStudy:
    """Squared-violation energies E_n per level and their log-log slope.

    E_n = sum_k sum_i dt h ((Y^n - L)^-)^2 over time steps (left rule) and
    interior nodes.  Needs at least 4 levels spanning two octaves.  Raises
    DegenerateFitError when every energy sits below the 1e-24 floor.
    """
    levels = [int(n) for n in levels]
    if len(levels) < 4 or max(levels) < 4 * min(levels):
        raise ValueError("rate study needs >= 4 levels spanning at least two octaves")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    energies = []
    for n in levels:
        y_path, _ = solve_penalized(spec, n)
        violation = _violation(spec, y_path)
        energies.append(float(spec.dt * spec.grid.h * np.sum(violation[:-1] ** 2)))
    if max(energies) < 1e-24:
        raise DegenerateFitError("all penalization energies below floor (obstacle inactive)")
    slope = float(np.polyfit(np.log(np.asarray(levels, float)), np.log(energies), 1)[0])
    return RateStudy(tuple(levels), tuple(energies), slope)


# ---------------------------------------------------------------------------
# Regression Monte Carlo backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionSolution:
    """Path-averaged backward solution from the least-squares backend."""

    y_mean: FieldPath
    z_mean: FieldPath
    y0: np.ndarray  # (n_paths, n_total) solution at t = 0 per path
    energy: float  # path-averaged squared-violation energy


def solve_penalized_regression(
    spec: BackwardSpec,
    n: int,
    forward_values: np.ndarray,
    noise_increments: np.ndarray,
    terminal_values: np.ndarray,
    basis_degree: int = 3,
    ridge: float = 1e-8,
) -> RegressionSolution:
    """Per-path backward induction with regression conditional expectations.

    ``forward_values`` has shape (n_paths, n_times, n_total) and supplies the
    regression features: powers of the state at the node up to
    ``basis_degree`` plus its space mean.  ``noise_increments`` has shape
    (n_paths, n_steps) and drives Z_k = E[Y_{k+1} dB_k | basis] / dt.
    ``terminal_values`` has shape (n_paths, n_total).  Upper-side problems
    are solved by negation.
    """
    norm = _Normalized(spec)
    grid = spec.grid
    dt = spec.dt
    n_paths, n_times, n_total = forward_values.shape
    if n_times != spec.n_steps + 1 or n_total != grid.n_total:
        raise GridMismatchError("forward path array does not match the space-time grid")
    if noise_increments.shape != (n_paths, spec.n_steps):
        raise GridMismatchError("noise increment array does not match the paths")
    if terminal_values.shape != (n_paths, n_total):
        raise GridMismatchError("terminal value array does not match the paths")
    n_features = basis_degree + 2
    if n_paths <= n_features:
        raise BasisDegenerateError(
            f"{n_paths} paths cannot identify {n_features} regression coefficients"
        )

    lo_a, di_a, up_a = operator_tridiagonal(spec.op, grid, adjoint=spec.use_adjoint_operator)
    ab_base = np.zeros((3, grid.n_cells))
    ab_base[0, 1:] = -dt * up_a[:-1]
    ab_base[1, :] = 1.0 - dt * di_a
    ab_base[2, :-1] = -dt * lo_a[1:]

    mean_op = SpaceMeanOperator(grid, spec.op.theta)
    x_int = grid.interior
    zeros = np.zeros(grid.n_cells)

    def regress(features: np.ndarray, target: np.ndarray) -> np.ndarray:
        gram = features.T @ features + ridge * np.eye(features.shape[1])
        moment = features.T @ target
        try:
            coef = np.linalg.solve(gram, moment)
        except np.linalg.LinAlgError as exc:
            raise BasisDegenerateError("regression normal equations singular") from exc
        if not np.all(np.isfinite(coef)):
            raise BasisDegenerateError("regression produced non-finite coefficients")
        return features @ coef

    y = norm.sign * terminal_values.T.copy()  # (n_total, n_paths)
    y_sum = np.zeros((n_times, n_total))
    z_sum = np.zeros((n_times, n_total))
    y_sum[-1] = y.sum(axis=1)
    energy = 0.0
    for k in range(spec.n_steps - 1, -1, -1):
        t = spec.times[k]
        barrier = norm.obstacle_interior(t)
        state = forward_values[:, k, :].T  # (n_total, n_paths)
        state_mean = mean_op.apply(state)
        db = noise_increments[:, k]

        ce = np.zeros_like(y)
        z = np.zeros_like(y)
        for i in range(1, n_total - 1):
            s = state[i]
            feats = np.column_stack(
                [s**d for d in range(basis_degree + 1)] + [state_mean[i]]
            )
            ce[i] = regress(feats, y[i])
            z[i] = regress(feats, y[i] * db / dt)
        ce_bar = mean_op.apply(ce)
        z_bar = mean_op.apply(z)

        y_new = np.zeros_like(y)
        for p in range(n_paths):
            rhs = ce[1:-1, p].copy()
            if spec.driver is not None:
                rhs += dt * norm.driver(
                    t, x_int, ce[1:-1, p], ce_bar[1:-1, p], z[1:-1, p], z_bar[1:-1, p]
                )
            col = rhs
            active = np.zeros(grid.n_cells, dtype=bool)
            for _ in range(spec.max_fixed_point_iters):
                ab = ab_base.copy()
                ab[1, :] += dt * n * active
                sol = solve_banded((1, 1), ab, col + dt * n * np.where(active, barrier, 0.0))
                active_new = sol < barrier
                if np.array_equal(active_new, active):
                    break
                active = active_new
            else:
                raise NoConvergenceError(f"active-set iteration stalled at step {k}, path {p}")
            y_new[1:-1, p] = sol
        y = y_new
        energy += dt * grid.h * float(
            np.mean(np.sum(np.maximum(barrier[:, None] - y[1:-1], 0.0) ** 2, axis=0))
        )
        y_sum[k] = y.sum(axis=1)
        z_sum[k] = (norm.sign * z).sum(axis=1)

    y_mean = FieldPath(grid, spec.times, norm.sign * y_sum / n_paths)
    z_mean = FieldPath(grid, spec.times, z_sum / n_paths)
    return RegressionSolution(
        y_mean=y_mean, z_mean=z_mean, y0=(norm.sign * y).T.copy(), energy=energy
    )

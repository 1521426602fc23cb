"""Euler-Maruyama simulation of the controlled forward dynamics.

The state obeys, node by node,

    du = [A u + drift(u, ubar)] dt + vol(u, ubar) dB + gain(u) * dxi

with ``ubar`` the windowed space mean, a single Brownian driver shared by
all nodes, and ``xi`` a nondecreasing cumulative harvest measure whose
increment over step k is applied at the end of the step (the recorded state
u(t_k) is always the pre-jump value).  Boundary nodes are pinned to the
prescribed Dirichlet data at every step.

Simulation is deterministic given (spec, control, seed): path p of an
ensemble uses the Gaussian increments of ``NoisePath.generate(seed + p)``,
and the vectorized ensemble kernel reproduces single-path runs bit for bit.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import (
    CflWarning,
    GridMismatchError,
    InadmissiblePerturbationError,
    NanDetectedError,
)
from .grid import DIRICHLET_DATA, Field, FieldPath, Grid
from .operators import OperatorSpec, SpaceMeanOperator, boundary_coupling, operator_tridiagonal

MEAN_DRIFT = "mean-drift"
POINTWISE_DRIFT = "pointwise-drift"
MEAN_NOISE = "mean-noise"
POINTWISE_NOISE = "pointwise-noise"
MULTIPLICATIVE_GAIN = "multiplicative"
CONSTANT_GAIN = "constant"
PROPORTIONAL_REVENUE = "proportional"
FLAT_REVENUE = "flat"
EXPLICIT = "explicit"
IMPLICIT = "implicit"
CRANK_NICOLSON = "crank-nicolson"

ENV_WORKERS = "SMC_WORKERS"
_DEFAULT_CHUNK = 4096


def worker_count() -> int:
    """Worker cap from the SMC_WORKERS environment variable (default 1)."""
    raw = os.environ.get(ENV_WORKERS, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn: Callable, items: Sequence, max_workers: int | None = None) -> list:
    """Apply ``fn`` to items on a small thread pool, collecting in input order."""
    workers = max_workers if max_workers is not None else worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------


def _as_tx_function(value) -> Callable[[float, np.ndarray], np.ndarray]:
    if callable(value):
        return lambda t, x: np.broadcast_to(np.asarray(value(t, x), dtype=float), x.shape).copy()
    const = float(value)
    return lambda t, x: np.full(x.shape, const)


def _as_x_function(value) -> Callable[[np.ndarray], np.ndarray]:
    if callable(value):
        return lambda x: np.broadcast_to(np.asarray(value(x), dtype=float), x.shape).copy()
    const = float(value)
    return lambda x: np.full(x.shape, const)


@dataclass(frozen=True)
class ProblemSpec:
    """Full description of one harvesting control problem.

    ``h10`` is the unit harvest price (function of (t, x) or constant),
    ``cost`` the unit harvesting cost, ``g0`` the terminal unit price and
    ``h0`` an optional running reward density of (t, x, u, ubar).  The
    singular reward density is h1 = h10*u - cost when ``revenue_mode`` is
    proportional and h10 - cost when flat.
    """

    grid: Grid
    op: OperatorSpec
    horizon: float
    n_steps: int
    alpha: float = 0.0
    beta: float = 0.0
    lambda0: float = 1.0
    drift_mode: str = MEAN_DRIFT
    noise_mode: str = POINTWISE_NOISE
    control_gain_mode: str = MULTIPLICATIVE_GAIN
    revenue_mode: str | None = None
    stepping: str = EXPLICIT
    initial: Field | None = None
    boundary: object = None
    h10: object = 1.0
    g0: object = 1.0
    cost: object = 0.0
    h0: Callable | None = None

    def __post_init__(self):
        if self.horizon <= 0.0 or self.n_steps < 1:
            raise ValueError("horizon must be positive and n_steps >= 1")
        if self.lambda0 <= 0.0:
            raise ValueError("lambda0 must be positive")
        if self.drift_mode not in (MEAN_DRIFT, POINTWISE_DRIFT):
            raise ValueError(f"unknown drift mode {self.drift_mode!r}")
        if self.noise_mode not in (MEAN_NOISE, POINTWISE_NOISE):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        if self.control_gain_mode not in (MULTIPLICATIVE_GAIN, CONSTANT_GAIN):
            raise ValueError(f"unknown control gain mode {self.control_gain_mode!r}")
        if self.stepping not in (EXPLICIT, IMPLICIT, CRANK_NICOLSON):
            raise ValueError(f"unknown stepping mode {self.stepping!r}")
        if self.revenue_mode is None:
            mode = (
                PROPORTIONAL_REVENUE
                if self.control_gain_mode == MULTIPLICATIVE_GAIN
                else FLAT_REVENUE
            )
            object.__setattr__(self, "revenue_mode", mode)
        if self.revenue_mode not in (PROPORTIONAL_REVENUE, FLAT_REVENUE):
            raise ValueError(f"unknown revenue mode {self.revenue_mode!r}")
        initial = self.initial
        if initial is None:
            initial = Field(self.grid, np.ones(self.grid.n_total), DIRICHLET_DATA)
            object.__setattr__(self, "initial", initial)
        if not initial.grid.same_as(self.grid):
            raise GridMismatchError("initial field grid differs from problem grid")
        if np.any(initial.interior <= 0.0):
            raise ValueError("initial state must be positive at interior nodes")
        if np.any(self._h10_values(0.0) <= 0.0) or np.any(self._h10_values(self.horizon) <= 0.0):
            raise ValueError("harvest price h10 must be positive")
        if np.any(self._g0_values() <= 0.0):
            raise ValueError("terminal price g0 must be positive")
        left, right = self.boundary_at(0.0)
        if left < 0.0 or right < 0.0:
            raise ValueError("boundary data must be nonnegative")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def boundary_at(self, t: float) -> tuple[float, float]:
        if self.boundary is None:
            return float(self.initial.values[0]), float(self.initial.values[-1])
        if callable(self.boundary):
            left, right = self.boundary(t)
            return float(left), float(right)
        left, right = self.boundary
        return float(left), float(right)

    def _h10_values(self, t: float) -> np.ndarray:
        return _as_tx_function(self.h10)(t, self.grid.nodes)

    def _g0_values(self) -> np.ndarray:
        return _as_x_function(self.g0)(self.grid.nodes)

    def _cost_values(self, t: float) -> np.ndarray:
        return _as_tx_function(self.cost)(t, self.grid.nodes)

    def h1_values(self, t: float, u_interior: np.ndarray) -> np.ndarray:
        """Singular reward density h1 at interior nodes, broadcast over paths."""
        price = self._h10_values(t)[1:-1]
        cost = self._cost_values(t)[1:-1]
        if u_interior.ndim == 2:
            price = price[:, None]
            cost = cost[:, None]
        if self.revenue_mode == PROPORTIONAL_REVENUE:
            return price * u_interior - cost
        return price - cost + 0.0 * u_interior

    def gain_values(self, u_interior: np.ndarray) -> np.ndarray:
        """Control gain f at interior nodes (state jump per unit of control)."""
        if self.control_gain_mode == MULTIPLICATIVE_GAIN:
            return -self.lambda0 * u_interior
        return -self.lambda0 + 0.0 * u_interior

    def uses_space_mean(self) -> bool:
        return (self.alpha != 0.0 and self.drift_mode == MEAN_DRIFT) or (
            self.beta != 0.0 and self.noise_mode == MEAN_NOISE
        )

    def cfl_number(self) -> float:
        a, _ = self.op.resolve(self.grid)
        return float(self.dt * np.max(np.abs(a)) / self.grid.h**2)


# ---------------------------------------------------------------------------
# Controls and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingularControl:
    """Cumulative harvest measure xi(t_k, x_i) at interior nodes.

    Nondecreasing in k at every node, with xi(t_0, .) = 0.  Increments over
    step k are xi(t_{k+1}) - xi(t_k).
    """

    cumulative: np.ndarray

    def __post_init__(self):
        cum = np.asarray(self.cumulative, dtype=float)
        if cum.ndim != 2:
            raise ValueError("cumulative control must be 2D (time nodes x interior nodes)")
        if not np.all(np.isfinite(cum)):
            raise ValueError("control must be finite")
        if np.any(cum[0] != 0.0):
            raise ValueError("control must start at zero")
        if np.any(np.diff(cum, axis=0) < 0.0):
            raise ValueError("control must be nondecreasing in time")
        object.__setattr__(self, "cumulative", cum)

    @property
    def n_times(self) -> int:
        return self.cumulative.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumulative, axis=0)

    @classmethod
    def zeros(cls, n_times: int, n_interior: int) -> "SingularControl":
        return cls(np.zeros((n_times, n_interior)))

    @classmethod
    def from_increments(cls, increments: np.ndarray) -> "SingularControl":
        increments = np.asarray(increments, dtype=float)
        cum = np.vstack([np.zeros((1, increments.shape[1])), np.cumsum(increments, axis=0)])
        return cls(cum)

    @classmethod
    def constant_rate(cls, rate: float, times: np.ndarray, n_interior: int) -> "SingularControl":
        times = np.asarray(times, dtype=float)
        return cls(rate * np.tile(times[:, None], (1, n_interior)))

    def scaled(self, factor: float) -> "SingularControl":
        if factor < 0.0:
            raise ValueError("scale factor must be nonnegative")
        return SingularControl(factor * self.cumulative)

    def time_shifted(self, shift_steps: int) -> "SingularControl":
        """Move all increments ``shift_steps`` steps later; mass shifted past T is dropped."""
        inc = self.increments
        out = np.zeros_like(inc)
        if shift_steps < inc.shape[0]:
            out[shift_steps:] = inc[: inc.shape[0] - shift_steps]
        return SingularControl.from_increments(out)

    def masked(self, mask: np.ndarray) -> "SingularControl":
        return SingularControl(self.cumulative * np.asarray(mask, dtype=float)[None, :])

    def total_mass(self) -> float:
        return float(np.sum(self.cumulative[-1]))


@dataclass(frozen=True)
class ControlPerturbation:
    """Signed finite-variation direction for control derivatives."""

    cumulative: np.ndarray

    def __post_init__(self):
        cum = np.asarray(self.cumulative, dtype=float)
        if cum.ndim != 2 or np.any(cum[0] != 0.0) or not np.all(np.isfinite(cum)):
            raise ValueError("perturbation must be finite, 2D, and start at zero")
        object.__setattr__(self, "cumulative", cum)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumulative, axis=0)

    @classmethod
    def from_control(cls, control: SingularControl) -> "ControlPerturbation":
        return cls(control.cumulative.copy())

    @classmethod
    def from_increments(cls, increments: np.ndarray) -> "ControlPerturbation":
        increments = np.asarray(increments, dtype=float)
        cum = np.vstack([np.zeros((1, increments.shape[1])), np.cumsum(increments, axis=0)])
        return cls(cum)


def check_admissible_direction(base: SingularControl, zeta: ControlPerturbation) -> None:
    """Require base + eps*zeta to stay a valid control for machine-small eps."""
    if base.cumulative.shape != zeta.cumulative.shape:
        raise GridMismatchError("perturbation shape differs from base control")
    eps = 2.0**-45
    if np.any(base.increments + eps * zeta.increments < 0.0):
        raise InadmissiblePerturbationError(
            "perturbation decreases the control where the base has no mass"
        )


def perturbed_control(
    base: SingularControl, zeta: ControlPerturbation, eps: float
) -> SingularControl:
    return SingularControl(base.cumulative + eps * zeta.cumulative)


@dataclass(frozen=True)
class NoisePath:
    """Gaussian increments of one Brownian path, reproducible from the seed."""

    increments: np.ndarray
    seed: int
    dt: float

    @classmethod
    def generate(cls, seed: int, n_steps: int, dt: float) -> "NoisePath":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal(n_steps) * np.sqrt(dt), int(seed), float(dt))


def _ensemble_increments(seed: int, n_paths: int, n_steps: int, dt: float) -> np.ndarray:
    """Stack per-path increments, path p in column p, seeds seed + p."""
    out = np.empty((n_steps, n_paths))
    root = np.sqrt(dt)
    for p in range(n_paths):
        out[:, p] = np.random.default_rng(seed + p).standard_normal(n_steps) * root
    return out


# ---------------------------------------------------------------------------
# Stepping kernel
# ---------------------------------------------------------------------------


class _Kernel:
    """Precomputed stencils for one problem; operates on (n_total, ...) arrays."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        grid = spec.grid
        self.h = grid.h
        self.dt = spec.dt
        a, b = spec.op.resolve(grid)
        self.a = a
        self.b = b
        self.mean_op = SpaceMeanOperator(grid, spec.op.theta) if spec.uses_space_mean() else None
        if spec.stepping in (IMPLICIT, CRANK_NICOLSON):
            implicit_weight = 1.0 if spec.stepping == IMPLICIT else 0.5
            self.implicit_weight = implicit_weight
            lower, diag, upper = operator_tridiagonal(spec.op, grid)
            n = grid.n_cells
            ab = np.zeros((3, n))
            c = implicit_weight * self.dt
            ab[0, 1:] = -c * upper[:-1]
            ab[1, :] = 1.0 - c * diag
            ab[2, :-1] = -c * lower[1:]
            self.ab = ab
            self.w_left, self.w_right = boundary_coupling(spec.op, grid)
        elif spec.cfl_number() > 0.5:
            warnings.warn(
                f"explicit step ratio dt*max|a|/h^2 = {spec.cfl_number():.4f} exceeds 0.5; "
                "expect instability (use implicit stepping)",
                CflWarning,
                stacklevel=3,
            )

    def _col(self, arr: np.ndarray, like: np.ndarray) -> np.ndarray:
        return arr[:, None] if like.ndim == 2 else arr

    def apply_generator(self, u: np.ndarray) -> np.ndarray:
        a = self._col(self.a, u)
        b = self._col(self.b, u)
        return (
            a * (u[2:] - 2.0 * u[1:-1] + u[:-2]) / self.h**2
            + b * (u[2:] - u[:-2]) / (2.0 * self.h)
        )

    def drift(self, u: np.ndarray, ubar: np.ndarray | None) -> np.ndarray:
        spec = self.spec
        if spec.alpha == 0.0:
            return np.zeros_like(u[1:-1])
        src = ubar if spec.drift_mode == MEAN_DRIFT else u
        return spec.alpha * src[1:-1]

    def vol(self, u: np.ndarray, ubar: np.ndarray | None) -> np.ndarray:
        spec = self.spec
        if spec.beta == 0.0:
            return np.zeros_like(u[1:-1])
        src = u if spec.noise_mode == POINTWISE_NOISE else ubar
        return spec.beta * src[1:-1]

    def mean(self, u: np.ndarray) -> np.ndarray | None:
        return self.mean_op.apply(u) if self.mean_op is not None else None

    def step(self, k: int, u: np.ndarray, db, dxi: np.ndarray) -> np.ndarray:
        """One Euler-Maruyama step from t_k; ``db`` is scalar or (n_paths,)."""
        spec = self.spec
        ubar = self.mean(u)
        gain = spec.gain_values(u[1:-1])
        forcing = self.dt * self.drift(u, ubar) + self.vol(u, ubar) * db + gain * dxi
        out = np.empty_like(u)
        left, right = spec.boundary_at(spec.times[k + 1])
        if spec.stepping == EXPLICIT:
            out[1:-1] = u[1:-1] + self.dt * self.apply_generator(u) + forcing
        else:
            rhs = u[1:-1] + forcing
            if spec.stepping == CRANK_NICOLSON:
                rhs = rhs + 0.5 * self.dt * self.apply_generator(u)
            c = self.implicit_weight * self.dt
            rhs[0] = rhs[0] + c * self.w_left * left
            rhs[-1] = rhs[-1] + c * self.w_right * right
            out[1:-1] = solve_banded((1, 1), self.ab, rhs)
        out[0] = left
        out[-1] = right
        return out

    def tangent_step(
        self,
        k: int,
        u: np.ndarray,
        z: np.ndarray,
        db,
        dxi: np.ndarray,
        dzeta: np.ndarray,
    ) -> np.ndarray:
        """Exact linearization of :meth:`step` in the direction (z, dzeta)."""
        spec = self.spec
        zbar = self.mean(z)
        gain = spec.gain_values(u[1:-1])
        dgain = -spec.lambda0 if spec.control_gain_mode == MULTIPLICATIVE_GAIN else 0.0
        forcing = (
            self.dt * self.drift(z, zbar)
            + self.vol(z, zbar) * db
            + gain * dzeta
            + dgain * z[1:-1] * dxi
        )
        out = np.empty_like(z)
        if spec.stepping == EXPLICIT:
            out[1:-1] = z[1:-1] + self.dt * self.apply_generator(z) + forcing
        else:
            rhs = z[1:-1] + forcing
            if spec.stepping == CRANK_NICOLSON:
                rhs = rhs + 0.5 * self.dt * self.apply_generator(z)
            out[1:-1] = solve_banded((1, 1), self.ab, rhs)
        out[0] = 0.0
        out[-1] = 0.0
        return out


def _initial_state(spec: ProblemSpec, n_paths: int | None) -> np.ndarray:
    u0 = spec.initial.values
    if n_paths is None:
        return u0.copy()
    return np.tile(u0[:, None], (1, n_paths))


def _check_control(spec: ProblemSpec, control: SingularControl) -> None:
    expected = (spec.n_steps + 1, spec.grid.n_cells)
    if control.cumulative.shape != expected:
        raise GridMismatchError(
            f"control shape {control.cumulative.shape} does not match {expected}"
        )


def _check_finite(u: np.ndarray, k: int, seed: int | None) -> None:
    if np.all(np.isfinite(u)):
        return
    if u.ndim == 2 and seed is not None:
        bad = int(np.argwhere(~np.isfinite(u))[0][1])
        raise NanDetectedError(
            f"non-finite state at step {k} (path seed {seed + bad})", step=k, seed=seed + bad
        )
    raise NanDetectedError(f"non-finite state at step {k}", step=k)


def iterate_states(
    spec: ProblemSpec, control: SingularControl, dw: np.ndarray, seed: int | None = None
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (k, state) at every time node, k = 0 .. n_steps.

    ``dw`` has shape (n_steps,) for one path or (n_steps, n_paths) for a
    vectorized bundle; each yielded state is a fresh array.
    """
    _check_control(spec, control)
    kernel = _Kernel(spec)
    n_paths = dw.shape[1] if dw.ndim == 2 else None
    u = _initial_state(spec, n_paths)
    increments = control.increments
    yield 0, u
    for k in range(spec.n_steps):
        dxi = increments[k][:, None] if u.ndim == 2 else increments[k]
        u = kernel.step(k, u, dw[k], dxi)
        _check_finite(u, k + 1, seed)
        yield k + 1, u


def simulate_path(spec: ProblemSpec, control: SingularControl, noise: NoisePath) -> FieldPath:
    """Simulate one path driven by the given noise increments."""
    if noise.increments.shape != (spec.n_steps,):
        raise GridMismatchError("noise path length does not match the time grid")
    if not np.isclose(noise.dt, spec.dt, rtol=1e-12, atol=0.0):
        raise GridMismatchError("noise path dt does not match the time grid")
    values = np.empty((spec.n_steps + 1, spec.grid.n_total))
    for k, u in iterate_states(spec, control, noise.increments, seed=None):
        values[k] = u
    return FieldPath(spec.grid, spec.times, values)


@dataclass(frozen=True)
class EnsembleSummary:
    """Monte Carlo summary of a forward ensemble."""

    mean_path: FieldPath
    terminal_values: np.ndarray
    positivity: bool
    min_value: float
    min_location: tuple[int, int, int]  # (path seed, time index, node index)
    n_paths: int
    seed: int

    def terminal_field(self, path_index: int) -> Field:
        return Field(self.mean_path.grid, self.terminal_values[path_index], DIRICHLET_DATA)


@dataclass
class _ChunkResult:
    state_sum: np.ndarray
    terminal: np.ndarray
    min_value: float
    min_location: tuple[int, int, int]


def _run_chunk(spec: ProblemSpec, control: SingularControl, seed: int, count: int) -> _ChunkResult:
    dw = _ensemble_increments(seed, count, spec.n_steps, spec.dt)
    state_sum = np.zeros((spec.n_steps + 1, spec.grid.n_total))
    min_value = np.inf
    min_location = (seed, 0, 1)
    terminal = None
    for k, u in iterate_states(spec, control, dw, seed=seed):
        state_sum[k] = u.sum(axis=1)
        interior = u[1:-1]
        m = float(interior.min())
        if m < min_value:
            node, path = np.unravel_index(int(np.argmin(interior)), interior.shape)
            min_value = m
            min_location = (seed + int(path), k, int(node) + 1)
        if k == spec.n_steps:
            terminal = u.T.copy()
    return _ChunkResult(state_sum, terminal, min_value, min_location)


def simulate_ensemble(
    spec: ProblemSpec,
    control: SingularControl,
    n_paths: int,
    seed: int,
    chunk_size: int = _DEFAULT_CHUNK,
) -> EnsembleSummary:
    """Simulate paths with seeds seed, seed+1, ... and summarize them.

    The positivity flag records whether the state stayed strictly positive at
    every interior node of every path at every time; the minimum and its
    (seed, time, node) location are reported either way.  Chunks of paths may
    run on parallel workers; reduction happens in seed order, so results are
    deterministic for a fixed chunk size.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _check_control(spec, control)
    starts = [(seed + off, min(chunk_size, n_paths - off)) for off in range(0, n_paths, chunk_size)]
    chunks = map_ordered(lambda sc: _run_chunk(spec, control, sc[0], sc[1]), starts)

    state_sum = chunks[0].state_sum.copy()
    for chunk in chunks[1:]:
        state_sum += chunk.state_sum
    terminal = np.vstack([chunk.terminal for chunk in chunks])
    best = min(range(len(chunks)), key=lambda i: chunks[i].min_value)
    min_value = chunks[best].min_value
    min_location = chunks[best].min_location
    mean_path = FieldPath(spec.grid, spec.times, state_sum / n_paths)
    return EnsembleSummary(
        mean_path=mean_path,
        terminal_values=terminal,
        positivity=bool(min_value > 0.0),
        min_value=min_value,
        min_location=min_location,
        n_paths=n_paths,
        seed=seed,
    )


def derivative_process(
    spec: ProblemSpec,
    base_control: SingularControl,
    perturbation: ControlPerturbation,
    noise: NoisePath,
) -> FieldPath:
    """Pathwise derivative of the state with respect to the control direction.

    Solves the exact linearization of the simulation scheme along the base
    path driven by the same noise: zero initial data, zero boundary, sources
    gain(u) * dzeta plus, for the multiplicative gain, the linearized jump
    term dgain * z * dxi.
    """
    _check_control(spec, base_control)
    check_admissible_direction(base_control, perturbation)
    kernel = _Kernel(spec)
    u = _initial_state(spec, None)
    z = np.zeros_like(u)
    values = np.empty((spec.n_steps + 1, spec.grid.n_total))
    values[0] = z
    xi_inc = base_control.increments
    zeta_inc = perturbation.increments
    dw = noise.increments
    for k in range(spec.n_steps):
        z = kernel.tangent_step(k, u, z, dw[k], xi_inc[k], zeta_inc[k])
        u = kernel.step(k, u, dw[k], xi_inc[k])
        _check_finite(u, k + 1, None)
        values[k + 1] = z
    return FieldPath(spec.grid, spec.times, values)

"""Strict, versioned JSON run configuration.

Unknown keys are rejected with their dotted path; derived quantities (grid
spacing, time step) are computed at load time.  The explicit stepping mode
is refused outright when the diffusion stability bound is violated; implicit
and crank-nicolson runs record a warning instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .control import PRICE_CAP, PRICE_FLOOR, Tolerances
from .errors import ParseError, ValidationError
from .forward import ProblemSpec
from .grid import DIRICHLET_DATA, DIRICHLET_ZERO, Field, build_grid
from .operators import OperatorSpec

SCHEMA_VERSION = 1

DETERMINISTIC_BACKEND = "deterministic"
REGRESSION_BACKEND = "regression"


@dataclass(frozen=True)
class BackwardConfig:
    levels: tuple[int, ...]
    backend: str
    tolerances: Tolerances


@dataclass(frozen=True)
class ControlConfig:
    convention: str
    max_rate: float | None
    coefficient_floor: float


@dataclass(frozen=True)
class MonteCarloConfig:
    n_paths: int
    seed: int


@dataclass(frozen=True)
class OutputConfig:
    directory: str
    formats: tuple[str, ...]


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    backward: BackwardConfig
    control: ControlConfig
    mc: MonteCarloConfig
    outputs: OutputConfig
    suite: str | None
    raw: dict
    config_hash: str
    warnings: tuple[str, ...] = field(default=())


def canonical_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class _Checker:
    """Tracks the field path while walking the raw dictionary."""

    def __init__(self, data: dict, path: str = ""):
        if not isinstance(data, dict):
            raise ValidationError("expected an object", path or "<root>")
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=None, require=False):
        self.seen.add(key)
        if key not in self.data:
            if require:
                raise ValidationError("missing required field", self._at(key))
            return default
        value = self.data[key]
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is not None and not isinstance(value, kind):
            raise ValidationError(
                f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}",
                self._at(key),
            )
        return value

    def sub(self, key: str, require=False) -> "_Checker | None":
        self.seen.add(key)
        if key not in self.data:
            if require:
                raise ValidationError("missing required section", self._at(key))
            return None
        return _Checker(self.data[key], self._at(key))

    def reject_unknown(self):
        unknown = set(self.data) - self.seen
        if unknown:
            key = sorted(unknown)[0]
            raise ValidationError("unknown key", self._at(key))


def _positive(value: float, path: str) -> float:
    if not value > 0:
        raise ValidationError(f"must be positive, got {value}", path)
    return value


def _build_shape(node: _Checker | None, grid, path: str):
    """Initial-condition factory: constant, sine, bump, or literal values."""
    if node is None:
        return Field(grid, np.ones(grid.n_total), DIRICHLET_DATA)
    kind = node.get("kind", str, default="constant")
    width = grid.width
    xn = (grid.nodes - grid.x_min) / width
    if kind == "constant":
        value = _positive(node.get("value", float, default=1.0), f"{path}.value")
        node.reject_unknown()
        return Field(grid, np.full(grid.n_total, value), DIRICHLET_DATA)
    if kind == "sine":
        amp = _positive(node.get("amplitude", float, default=1.0), f"{path}.amplitude")
        node.reject_unknown()
        values = amp * np.sin(np.pi * xn)
        values[0] = 0.0
        values[-1] = 0.0
        return Field(grid, values, DIRICHLET_ZERO)
    if kind == "bump":
        floor = node.get("floor", float, default=0.0)
        amp = _positive(node.get("amplitude", float, default=1.0), f"{path}.amplitude")
        node.reject_unknown()
        values = floor + 4.0 * amp * xn * (1.0 - xn)
        values[0] = floor
        values[-1] = floor
        bk = DIRICHLET_ZERO if floor == 0.0 else DIRICHLET_DATA
        return Field(grid, values, bk)
    if kind == "values":
        values = node.get("values", list, require=True)
        node.reject_unknown()
        arr = np.asarray(values, dtype=float)
        if arr.shape != (grid.n_total,):
            raise ValidationError(
                f"need {grid.n_total} nodal values, got {arr.size}", f"{path}.values"
            )
        return Field(grid, arr, DIRICHLET_DATA)
    raise ValidationError(f"unknown shape kind {kind!r}", f"{path}.kind")


def _build_price(node, path: str):
    """Price factory: a number, a constant block, or an interior pocket."""
    if node is None:
        return 1.0
    if isinstance(node, (int, float)) and not isinstance(node, bool):
        return _positive(float(node), path)
    checker = _Checker(node, path)
    kind = checker.get("kind", str, require=True)
    if kind == "constant":
        value = _positive(checker.get("value", float, require=True), f"{path}.value")
        checker.reject_unknown()
        return value
    if kind == "pocket":
        base = _positive(checker.get("base", float, require=True), f"{path}.base")
        amp = checker.get("amplitude", float, require=True)
        center = checker.get("center", float, require=True)
        width = _positive(checker.get("width", float, require=True), f"{path}.width")
        checker.reject_unknown()

        def price(t, x):
            return base + amp * np.exp(-(((x - center) / width) ** 2))

        return price
    raise ValidationError(f"unknown price kind {kind!r}", f"{path}.kind")


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw configuration dictionary into a RunConfig."""
    root = _Checker(raw)
    version = root.get("schema_version", int, default=SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {version}", "schema_version")
    warnings: list[str] = []

    problem = root.sub("problem", require=True)
    grid_node = problem.sub("grid", require=True)
    x_min = grid_node.get("x_min", float, default=0.0)
    x_max = grid_node.get("x_max", float, default=1.0)
    n_cells = grid_node.get("n_cells", int, require=True)
    grid_node.reject_unknown()
    if x_max <= x_min:
        raise ValidationError("x_max must exceed x_min", "problem.grid.x_max")
    if n_cells < 2:
        raise ValidationError("n_cells must be >= 2", "problem.grid.n_cells")
    grid = build_grid(x_min, x_max, n_cells)

    op_node = problem.sub("operator", require=True)
    second = op_node.get("second_order", float, default=0.5)
    first = op_node.get("first_order", float, default=0.0)
    theta = op_node.get("theta", float, default=0.1)
    op_node.reject_unknown()
    if second < 0:
        raise ValidationError("second_order must be nonnegative", "problem.operator.second_order")
    if not 0 < theta < grid.width:
        raise ValidationError(
            f"theta must lie in (0, {grid.width}), got {theta}", "problem.operator.theta"
        )
    op = OperatorSpec(second, first, theta)

    time_node = problem.sub("time", require=True)
    horizon = _positive(time_node.get("horizon", float, require=True), "problem.time.horizon")
    n_steps = time_node.get("n_steps", int, require=True)
    time_node.reject_unknown()
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1", "problem.time.n_steps")

    model_node = problem.sub("model", require=True)
    alpha = model_node.get("alpha", float, default=0.0)
    beta = model_node.get("beta", float, default=0.0)
    lambda0 = _positive(model_node.get("lambda0", float, default=1.0), "problem.model.lambda0")
    model_node.reject_unknown()

    modes = problem.sub("modes")
    drift_mode = "mean-drift"
    noise_mode = "pointwise-noise"
    gain_mode = "multiplicative"
    stepping = "implicit"
    revenue = None
    if modes is not None:
        drift_mode = modes.get("drift", str, default=drift_mode)
        noise_mode = modes.get("noise", str, default=noise_mode)
        gain_mode = modes.get("control_gain", str, default=gain_mode)
        stepping = modes.get("stepping", str, default=stepping)
        revenue = modes.get("revenue", str, default=None)
        modes.reject_unknown()

    initial = _build_shape(problem.sub("initial"), grid, "problem.initial")

    boundary_node = problem.sub("boundary")
    boundary = None
    if boundary_node is not None:
        left = boundary_node.get("left", float, default=0.0)
        right = boundary_node.get("right", float, default=0.0)
        boundary_node.reject_unknown()
        if left < 0 or right < 0:
            raise ValidationError("boundary data must be nonnegative", "problem.boundary")
        boundary = (left, right)

    prices = problem.sub("prices")
    h10: Any = 1.0
    g0: Any = 1.0
    cost: Any = 0.0
    if prices is not None:
        h10 = _build_price(prices.get("h10", None, default=None), "problem.prices.h10")
        g0 = _build_price(prices.get("g0", None, default=None), "problem.prices.g0")
        cost = prices.get("cost", float, default=0.0)
        prices.reject_unknown()
    problem.reject_unknown()

    dt = horizon / n_steps
    cfl = dt * abs(second) / grid.h**2
    if cfl > 0.5:
        if stepping == "explicit":
            raise ValidationError(
                f"explicit stepping unstable: dt*max|a|/h^2 = {cfl:.4f} > 0.5 "
                "(switch modes.stepping to implicit or crank-nicolson)",
                "problem.time.n_steps",
            )
        warnings.append(
            f"explicit stepping would violate the stability bound (ratio {cfl:.4f}); "
            f"run proceeds with {stepping} stepping"
        )

    try:
        spec = ProblemSpec(
            grid=grid,
            op=op,
            horizon=horizon,
            n_steps=n_steps,
            alpha=alpha,
            beta=beta,
            lambda0=lambda0,
            drift_mode=drift_mode,
            noise_mode=noise_mode,
            control_gain_mode=gain_mode,
            revenue_mode=revenue,
            stepping=stepping,
            initial=initial,
            boundary=boundary,
            h10=h10,
            g0=g0,
            cost=cost,
        )
    except ValidationError:
        raise
    except Exception as exc:
        raise ValidationError(str(exc), "problem") from exc

    backward_node = root.sub("backward")
    levels = (4, 16, 64, 256)
    backend = DETERMINISTIC_BACKEND
    tolerances = Tolerances()
    if backward_node is not None:
        raw_levels = backward_node.get("levels", list, default=list(levels))
        if not raw_levels or any(
            not isinstance(n, int) or isinstance(n, bool) or n < 1 for n in raw_levels
        ):
            raise ValidationError("levels must be positive integers", "backward.levels")
        if any(b <= a for a, b in zip(raw_levels, raw_levels[1:])):
            raise ValidationError("levels must be strictly increasing", "backward.levels")
        levels = tuple(raw_levels)
        backend = backward_node.get("backend", str, default=backend)
        if backend not in (DETERMINISTIC_BACKEND, REGRESSION_BACKEND):
            raise ValidationError(f"unknown backend {backend!r}", "backward.backend")
        tol_node = backward_node.sub("tolerances")
        if tol_node is not None:
            thr = _positive(
                tol_node.get("threshold", float, default=1e-6), "backward.tolerances.threshold"
            )
            comp = _positive(
                tol_node.get("complementarity", float, default=1e-6),
                "backward.tolerances.complementarity",
            )
            vi = _positive(tol_node.get("vi", float, default=1e-6), "backward.tolerances.vi")
            tolerances = Tolerances(threshold=thr, complementarity=comp, vi=vi)
        backward_node.reject_unknown()

    control_node = root.sub("control")
    convention = PRICE_FLOOR
    max_rate = 0.9
    coefficient_floor = 1e-10
    if control_node is not None:
        convention = control_node.get("convention", str, default=convention)
        if convention not in (PRICE_FLOOR, PRICE_CAP):
            raise ValidationError(f"unknown convention {convention!r}", "control.convention")
        max_rate = control_node.get("max_rate", float, default=max_rate)
        if max_rate is not None and not 0 < max_rate < 1:
            raise ValidationError("max_rate must lie in (0, 1)", "control.max_rate")
        coefficient_floor = _positive(
            control_node.get("coefficient_floor", float, default=coefficient_floor),
            "control.coefficient_floor",
        )
        control_node.reject_unknown()

    mc_node = root.sub("mc")
    n_paths, seed = 1000, 12345
    if mc_node is not None:
        n_paths = mc_node.get("n_paths", int, default=n_paths)
        seed = mc_node.get("seed", int, require=True)
        mc_node.reject_unknown()
        if n_paths < 1:
            raise ValidationError("n_paths must be >= 1", "mc.n_paths")

    out_node = root.sub("outputs")
    directory, formats = "out", ("csv", "json")
    if out_node is not None:
        directory = out_node.get("directory", str, default=directory)
        fmts = out_node.get("formats", list, default=list(formats))
        for fmt in fmts:
            if fmt not in ("csv", "json"):
                raise ValidationError(f"unknown format {fmt!r}", "outputs.formats")
        formats = tuple(fmts)
        out_node.reject_unknown()

    suite = root.get("suite", str, default=None)
    root.reject_unknown()

    return RunConfig(
        problem=spec,
        backward=BackwardConfig(levels=levels, backend=backend, tolerances=tolerances),
        control=ControlConfig(
            convention=convention, max_rate=max_rate, coefficient_floor=coefficient_floor
        ),
        mc=MonteCarloConfig(n_paths=n_paths, seed=seed),
        outputs=OutputConfig(directory=directory, formats=formats),
        suite=suite,
        raw=raw,
        config_hash=canonical_hash(raw),
        warnings=tuple(warnings),
    )


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON run configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"configuration file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc}")
    return parse_config(raw)

"""Command-line entry point.

Subcommands:

* ``simulate``  forward Monte Carlo ensemble
* ``adjoint``   assemble and solve the reflected adjoint equation
* ``policy``    extract the threshold harvest policy and check optimality
* ``rate``      penalization-rate study
* ``derivcheck`` derivative-process and directional-derivative consistency
* ``verify``    run a named verification suite

Exit codes: 0 success, 1 failed checks, 2 configuration errors.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .backward import penalization_rate, solve_penalized
from .config import RunConfig, load_config
from .control import assemble_adjoint, directional_derivative_J, extract_policy
from .errors import ConfigError, ToolkitError
from .forward import (
    ControlPerturbation,
    NoisePath,
    SingularControl,
    derivative_process,
    simulate_ensemble,
    simulate_path,
)
from .grid import FieldPath
from .report import CheckResult, PhaseTimer, RunReport, describe_version, persist
from .suites import SUITES

_MAX_PER_PATH_CSV = 20


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smc",
        description="Singular-control toolkit for space-mean reaction-diffusion dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--paths", type=int, default=None, help="override the path count")
        p.add_argument(
            "--levels",
            default=None,
            help="override penalization levels (comma-separated integers)",
        )

    add_common(sub.add_parser("simulate", help="run a forward ensemble"))
    add_common(sub.add_parser("adjoint", help="solve the reflected adjoint"))
    add_common(sub.add_parser("policy", help="extract and check the harvest policy"))
    add_common(sub.add_parser("rate", help="penalization-rate study"))
    add_common(sub.add_parser("derivcheck", help="derivative consistency checks"))
    verify = sub.add_parser("verify", help="run a named verification suite")
    add_common(verify, config_required=False)
    verify.add_argument(
        "suite",
        nargs="?",
        default=None,
        help=f"suite name ({', '.join(sorted(SUITES))})",
    )
    verify.add_argument("--suite", dest="suite_flag", default=None, help=argparse.SUPPRESS)
    return parser


def _parse_levels(raw: str) -> list[int]:
    try:
        levels = [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError("levels must be comma-separated integers", "--levels")
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError("levels must be strictly increasing", "--levels")
    return levels


def _apply_overrides(config: RunConfig, args) -> tuple[RunConfig, list[int], int, int, str]:
    levels = list(config.backward.levels)
    if args.levels:
        levels = _parse_levels(args.levels)
    seed = args.seed if args.seed is not None else config.mc.seed
    n_paths = args.paths if args.paths is not None else config.mc.n_paths
    out_dir = args.out if args.out is not None else config.outputs.directory
    return config, levels, seed, n_paths, out_dir


def _new_report(config: RunConfig, seed: int) -> RunReport:
    return RunReport(
        config_echo=config.raw,
        config_hash=config.config_hash,
        version=describe_version(),
        seeds={"root": seed},
    )


def _control_path(spec, control: SingularControl) -> FieldPath:
    values = np.zeros((spec.n_steps + 1, spec.grid.n_total))
    values[:, 1:-1] = control.cumulative
    return FieldPath(spec.grid, spec.times, values)


def _cmd_simulate(config: RunConfig, args) -> int:
    _, _, seed, n_paths, out_dir = _apply_overrides(config, args)
    spec = config.problem
    control = SingularControl.zeros(spec.n_steps + 1, spec.grid.n_cells)
    timer = PhaseTimer()
    with timer.time("simulate"):
        summary = simulate_ensemble(spec, control, n_paths, seed)
    report = _new_report(config, seed)
    report.timings = timer.phases
    report.add(
        CheckResult(
            name="positivity",
            value=summary.min_value,
            tolerance=0.0,
            passed=summary.positivity,
            detail=f"min at (seed, t index, node) = {summary.min_location}",
        )
    )
    paths = {"mean_path": summary.mean_path}
    for p in range(min(n_paths, _MAX_PER_PATH_CSV)):
        terminal = FieldPath(
            spec.grid,
            np.asarray([spec.horizon]),
            summary.terminal_values[p][None, :],
        )
        paths[f"terminal_seed{seed + p}"] = terminal
    persist(report, paths, out_dir)
    print(f"simulated {n_paths} paths; positivity={summary.positivity}; outputs in {out_dir}")
    return 0 if report.all_passed else 1


def _cmd_adjoint(config: RunConfig, args) -> int:
    _, levels, seed, _, out_dir = _apply_overrides(config, args)
    spec = config.problem
    policy = extract_policy(
        spec,
        levels,
        convention=config.control.convention,
        tolerances=config.backward.tolerances,
        coefficient_floor=config.control.coefficient_floor,
        max_rate=config.control.max_rate,
    )
    diag = policy.solution.diagnostics
    report = _new_report(config, seed)
    report.add(
        CheckResult(
            name="skorokhod-residual",
            value=abs(diag.skorokhod_residual),
            tolerance=1e-4 * max(diag.skorokhod_scale, 1e-30),
            passed=abs(diag.skorokhod_residual) <= 1e-4 * max(diag.skorokhod_scale, 1e-30),
            detail=f"levels {diag.levels}, gaps {['%.2e' % g for g in diag.cauchy_gaps]}",
        )
    )
    persist(report, {"adjoint_p": policy.p, "reflection_eta": policy.eta}, out_dir)
    print(f"adjoint solved at levels {levels}; outputs in {out_dir}")
    return 0 if report.all_passed else 1


def _cmd_policy(config: RunConfig, args) -> int:
    _, levels, seed, _, out_dir = _apply_overrides(config, args)
    spec = config.problem
    policy = extract_policy(
        spec,
        levels,
        convention=config.control.convention,
        tolerances=config.backward.tolerances,
        coefficient_floor=config.control.coefficient_floor,
        max_rate=config.control.max_rate,
    )
    rep = policy.report
    report = _new_report(config, seed)
    report.add(
        CheckResult(
            "threshold-slack", rep.threshold_violation_max, rep.threshold_tolerance,
            rep.threshold_pass, f"convention {rep.convention}",
        )
    )
    report.add(
        CheckResult(
            "complementarity", rep.complementarity_residual, rep.complementarity_tolerance,
            rep.complementarity_pass,
        )
    )
    report.add(
        CheckResult(
            "variational-inequality", rep.vi_residual, rep.vi_tolerance, rep.vi_pass,
            f"degenerate coefficient fallback: {policy.degenerate_coefficient}",
        )
    )
    persist(
        report,
        {
            "policy_xi": _control_path(spec, policy.xi_hat),
            "adjoint_p": policy.p,
            "reflection_eta": policy.eta,
        },
        out_dir,
    )
    for check in report.checks:
        print(check.line())
    return 0 if report.all_passed else 1


def _cmd_rate(config: RunConfig, args) -> int:
    _, levels, seed, _, out_dir = _apply_overrides(config, args)
    spec = config.problem

    def obstacle(t, nodes):
        return np.asarray(spec._h10_values(t), dtype=float) / spec.lambda0

    adjoint = assemble_adjoint(
        spec,
        obstacle=obstacle,
        reflection_side="lower" if config.control.convention == "price-floor" else "upper",
        allow_terminal_violation=True,
    )
    study = penalization_rate(adjoint.backward, levels)
    report = _new_report(config, seed)
    report.add(
        CheckResult(
            name="penalization-rate-slope",
            value=study.slope,
            tolerance=-1.7,
            passed=bool(-2.3 <= study.slope <= -1.7),
            detail="; ".join(f"E_{n}={e:.3e}" for n, e in zip(study.levels, study.energies)),
        )
    )
    persist(report, {}, out_dir)
    print(f"levels {list(study.levels)}")
    print(f"energies {[f'{e:.4e}' for e in study.energies]}")
    print(f"log-log slope {study.slope:.4f}")
    return 0 if report.all_passed else 1


def _cmd_derivcheck(config: RunConfig, args) -> int:
    _, _, seed, n_paths, out_dir = _apply_overrides(config, args)
    spec = config.problem
    rng = np.random.default_rng(seed)
    base = SingularControl.constant_rate(0.05, spec.times, spec.grid.n_cells)
    zeta = ControlPerturbation.from_increments(
        rng.uniform(0.0, 1.0, (spec.n_steps, spec.grid.n_cells)) * spec.dt
    )
    noise = NoisePath.generate(seed, spec.n_steps, spec.dt)
    base_path = simulate_path(spec, base, noise)
    tangent = derivative_process(spec, base, zeta, noise)
    errors = {}
    for eps in (1e-2, 1e-3):
        bumped = simulate_path(spec, SingularControl(base.cumulative + eps * zeta.cumulative), noise)
        diff = (bumped.values - base_path.values) / eps - tangent.values
        errors[eps] = float(np.max(np.sqrt(spec.grid.h * np.sum(diff[:, 1:-1] ** 2, axis=1))))
    ratio = errors[1e-2] / max(errors[1e-3], 1e-300)

    adjoint = assemble_adjoint(spec, xi=base)
    p_path, _ = solve_penalized(adjoint.backward, 1)
    cmp = directional_derivative_J(spec, base, zeta, p_path, n_paths=n_paths, seed=seed)
    est, err = cmp.finite_difference[1e-3]
    comb = float(np.sqrt(cmp.adjoint_stderr**2 + err**2))

    report = _new_report(config, seed)
    report.add(
        CheckResult(
            "derivative-process-ratio", ratio, 20.0, bool(5.0 <= ratio <= 20.0),
            f"errors {errors[1e-2]:.3e} / {errors[1e-3]:.3e}",
        )
    )
    report.add(
        CheckResult(
            "directional-derivative-gap",
            abs(cmp.adjoint_formula - est),
            3.0 * comb,
            abs(cmp.adjoint_formula - est) <= 3.0 * comb,
            f"adjoint {cmp.adjoint_formula:.6f}, finite difference {est:.6f}",
        )
    )
    persist(report, {}, out_dir)
    for check in report.checks:
        print(check.line())
    return 0 if report.all_passed else 1


def _cmd_verify(config: RunConfig | None, args) -> int:
    name = args.suite_flag or args.suite or (config.suite if config else None) or "all"
    if name not in SUITES:
        print(f"unknown suite {name!r}; choose from {sorted(SUITES)}", file=sys.stderr)
        return 2
    timer = PhaseTimer()
    results = []
    for fn in SUITES[name]:
        with timer.time(fn.__name__):
            result = fn()
        results.append(result)
        print(result.line())
    if config is not None:
        report = RunReport(
            config_echo=config.raw,
            config_hash=config.config_hash,
            version=describe_version(),
            checks=results,
            seeds={"root": config.mc.seed},
        )
        out_dir = args.out if args.out is not None else config.outputs.directory
    else:
        report = RunReport(
            config_echo={"suite": name},
            config_hash="builtin",
            version=describe_version(),
            checks=results,
            seeds={"builtin-benchmarks": "fixed in smc.suites"},
        )
        out_dir = args.out or "out"
    report.timings = timer.phases
    persist(report, {}, out_dir)
    failed = [c.name for c in results if not c.passed]
    if failed:
        print(f"FAILED checks: {', '.join(failed)}")
        return 1
    print(f"suite {name!r}: all {len(results)} checks passed")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = None
        if args.config is not None:
            config = load_config(args.config)
        if args.command == "verify":
            return _cmd_verify(config, args)
        if config is None:
            print("this subcommand requires --config", file=sys.stderr)
            return 2
        handler = {
            "simulate": _cmd_simulate,
            "adjoint": _cmd_adjoint,
            "policy": _cmd_policy,
            "rate": _cmd_rate,
            "derivcheck": _cmd_derivcheck,
        }[args.command]
        for warning in config.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        return handler(config, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

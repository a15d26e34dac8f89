"""Command-line front end: ``dsehs {solve,check,simulate,sweep}``.

Exit codes: 0 success, 1 usage or parse error, 2 value iteration did not
converge, 3 a structural property check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim, solver, structure
from .config import ConfigError, load_config
from .model import ModelError

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3
DEFAULT_GRID = "0.1:0.022:0.6"

log = logging.getLogger("dsehs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_grid(text: str) -> list:
    """``START:STEP:END`` -> rates ``START + k*STEP`` up to END, with END appended if the steps miss it."""
    try:
        start, step, end = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--p-grid must be START:STEP:END, got {text!r}") from None
    if step <= 0 or end < start:
        raise UsageError(f"--p-grid {text!r}: need STEP > 0 and END >= START")
    grid = []
    k = 0
    while start + k * step <= end + 1e-9:
        grid.append(round(start + k * step, 10))
        k += 1
    if end - grid[-1] > 1e-9:
        grid.append(round(end, 10))
    for p in grid:
        if not 0.0 < p < 1.0:
            raise UsageError(f"arrival rate {p} outside (0, 1)")
    return grid


@dataclass
class ExperimentSpec:
    config: Path
    command: str
    out: Path
    theta: float = solver.DEFAULT_THETA
    tau_max: int = solver.DEFAULT_TAU_MAX
    horizon: int = 50_000
    seeds: list = field(default_factory=lambda: [0])
    p_grid: list = field(default_factory=lambda: parse_grid(DEFAULT_GRID))
    policy: str = "optimal"
    common_random: bool = True
    jobs: int = 1
    trace: bool = False

    def __post_init__(self):
        if self.theta <= 0:
            raise UsageError("--theta must be positive")
        if self.tau_max < 1:
            raise UsageError("--tau-max must be at least 1")
        if self.horizon < 1:
            raise UsageError("--horizon must be at least 1")
        if not self.seeds:
            raise UsageError("need at least one --seed")
        if self.policy not in ("optimal", "greedy") and not self.policy.startswith("load:"):
            raise UsageError(f"--policy must be optimal, greedy or load:PATH, got {self.policy!r}")

    @property
    def load_path(self) -> Path | None:
        return Path(self.policy[5:]) if self.policy.startswith("load:") else None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="model config file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--theta", type=float, default=solver.DEFAULT_THETA)
    common.add_argument("--tau-max", type=int, default=solver.DEFAULT_TAU_MAX)
    common.add_argument("--policy", default="optimal", help="optimal | greedy | load:PATH")
    common.add_argument("-v", "--verbose", action="store_true")

    simflags = argparse.ArgumentParser(add_help=False)
    simflags.add_argument("--horizon", type=int, default=50_000)
    simflags.add_argument("--seed", type=int, action="append", dest="seeds",
                          help="repeatable; default 0")
    simflags.add_argument("--common-random", choices=("on", "off"), default="on")
    simflags.add_argument("--jobs", type=int, default=1)

    parser = _Parser(prog="dsehs", description="Energy-harvesting transmission scheduling MDP toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("solve", parents=[common], help="post-decision-state value iteration")
    sub.add_parser("check", parents=[common], help="structural property report")
    p = sub.add_parser("simulate", parents=[common, simflags], help="simulate one policy")
    p.add_argument("--trace", action="store_true", help="also write per-slot traces")
    p = sub.add_parser("sweep", parents=[common, simflags], help="optimal vs greedy over arrival rates")
    p.add_argument("--p-grid", default=DEFAULT_GRID, help="START:STEP:END")
    return parser


def spec_from_args(args) -> ExperimentSpec:
    kw = dict(config=args.config, command=args.command, out=args.out, theta=args.theta,
              tau_max=args.tau_max, policy=args.policy)
    if args.command in ("simulate", "sweep"):
        kw.update(horizon=args.horizon, seeds=args.seeds or [0],
                  common_random=args.common_random == "on", jobs=args.jobs)
    if args.command == "simulate":
        kw["trace"] = args.trace
    if args.command == "sweep":
        kw["p_grid"] = parse_grid(args.p_grid)
    return ExperimentSpec(**kw)


def _load_solution(path, config):
    value, pds, policy = solver.load_solution(path)
    if value.shape != config.shape:
        raise UsageError(f"{path}: solution grid {value.shape} does not match config grid {config.shape}")
    report = solver.SolveReport(iterations=0, residual=float("nan"), residuals=[], converged=True)
    return solver.Solution(pds, value, policy, report)


def _solve(spec, config):
    sol = solver.pds_value_iteration(config, spec.theta, spec.tau_max)
    if not sol.report.converged:
        raise solver.NotConverged(sol.report)
    return sol


def cmd_solve(spec: ExperimentSpec, config) -> int:
    sol = solver.pds_value_iteration(config, spec.theta, spec.tau_max)
    spec.out.mkdir(parents=True, exist_ok=True)
    solver.save_solution(spec.out / "solution.csv", sol.value, sol.pds, sol.policy)
    r = sol.report
    summary = [
        f"config: {spec.config}",
        f"states: {config.n_states} grid {config.shape}",
        f"converged: {'yes' if r.converged else 'no'}",
        f"iterations: {r.iterations}",
        f"final residual: {r.residual:.6e}",
        f"theta: {spec.theta:g}",
        f"transmit states: {int(sol.policy.actions.sum())} of {int(solver.transmit_feasible(config).sum())} feasible",
    ]
    (spec.out / "solve_summary.txt").write_text("\n".join(summary) + "\n")
    with open(spec.out / "residuals.csv", "w") as fh:
        fh.write("iteration,residual\n")
        for i, d in enumerate(r.residuals, start=1):
            fh.write(f"{i},{d!r}\n")
    print("\n".join(summary))
    return EXIT_OK if r.converged else EXIT_NOT_CONVERGED


def cmd_check(spec: ExperimentSpec, config) -> int:
    if spec.load_path is not None:
        sol = _load_solution(spec.load_path, config)
    else:
        sol = _solve(spec, config)
    reports = structure.run_full_suite(config, spec.theta, spec.tau_max, solution=sol)
    spec.out.mkdir(parents=True, exist_ok=True)
    structure.write_report(spec.out / "properties.csv", reports)
    with open(spec.out / "transmit_thresholds.csv", "w") as fh:
        fh.write("b,h,min_e_transmit\n")
        for b, h, e in structure.transmit_thresholds(sol.policy, config):
            fh.write(f"{b},{h},{'' if e is None else e}\n")
    failed = False
    for r in reports:
        status = "PASS" if r.passed else ("WARN" if r.caveat else "FAIL")
        note = f" [{r.caveat}]" if r.caveat else ""
        print(f"{status} {r.name}: worst violation {r.worst_violation:.3e} at (b,e,h)={r.witness} "
              f"tol {r.tolerance:g}{note}")
        failed |= r.hard_failure
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _policy_for(spec, config):
    if spec.policy == "greedy":
        return "greedy", "greedy"
    if spec.load_path is not None:
        return "loaded", _load_solution(spec.load_path, config).policy
    return "optimal", _solve(spec, config).policy


def cmd_simulate(spec: ExperimentSpec, config) -> int:
    name, policy = _policy_for(spec, config)
    spec.out.mkdir(parents=True, exist_ok=True)
    p = float(config.arrival_pmf @ np.arange(config.arrival_pmf.size))
    rows = []
    for seed in spec.seeds:
        trace = sim.simulate(policy, config, spec.horizon, seed)
        sim.validate_trace(trace, config)
        if spec.trace:
            trace.write_csv(spec.out / f"trace_{name}_seed{seed}.csv")
        rows.append(sim.ComparisonRow(p, name, seed, sim.compute_metrics(trace)))
    rows.sort(key=lambda r: (r.p, r.policy, r.seed))
    sim.write_metrics(spec.out / "metrics.csv", rows)
    for r in rows:
        m = r.metrics
        print(f"{r.policy} seed {r.seed}: backlog {m.avg_backlog:.4f} battery {m.avg_battery:.4f} "
              f"overflow {m.overflow_prob:.4f} outage {m.outage_prob:.4f}")
    return EXIT_OK


def cmd_sweep(spec: ExperimentSpec, config) -> int:
    loaded = None
    if spec.load_path is not None:
        loaded = _load_solution(spec.load_path, config).policy
    elif spec.policy == "greedy":
        raise UsageError("sweep compares against greedy already; use --policy optimal or load:PATH")
    spec.out.mkdir(parents=True, exist_ok=True)

    def flush(rows):
        sim.write_metrics(spec.out / "fig4a.csv", rows, ("p", "policy", "seed", "avg_backlog", "avg_battery"))
        sim.write_metrics(spec.out / "fig4b.csv", rows, ("p", "policy", "seed", "overflow_prob", "outage_prob"))
        sim.write_metrics(spec.out / "metrics.csv", rows)
        log.info("flushed %d rows", len(rows))

    rows = sim.compare_policies(config, spec.p_grid, spec.horizon, spec.seeds, spec.common_random,
                                spec.theta, spec.tau_max, loaded, spec.jobs, on_point=flush)
    print(f"{len(spec.p_grid)} arrival rates x {len(spec.seeds)} seeds -> {len(rows)} rows in {spec.out}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "check": cmd_check, "simulate": cmd_simulate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = spec_from_args(args)
        config = load_config(spec.config)
        return COMMANDS[spec.command](spec, config)
    except (UsageError, ConfigError, ModelError, ValueError) as exc:
        print(f"dsehs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except solver.NotConverged as exc:
        print(f"dsehs: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())

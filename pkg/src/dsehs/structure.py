"""Exhaustive numerical checks of the structural properties of the solution.

Every check scans the whole grid and reports the worst signed violation
(positive means the property is broken by that much) together with the grid
coordinate where it occurs. A check passes when the worst violation is at
most its tolerance, so a pass certifies the property on that finite
instance up to floating-point tolerance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model, solver
from .model import ModelConfig
from .solver import Policy, ValueTable

DEFAULT_TOL = 1e-9
DECOMPOSITION_TOL = 1e-8
KERNEL_TOL = 1e-12
FINITE_BUFFER_CAVEAT = "finite-buffer-empirical"

AXES = {"buffer": 0, "battery": 1}
REPORT_COLUMNS = ("property", "pass", "worst_violation", "witness_b", "witness_e",
                  "witness_h", "tolerance", "caveat")


@dataclass(frozen=True)
class PropertyReport:
    name: str
    passed: bool
    worst_violation: float
    witness: tuple
    tolerance: float
    caveat: str = ""

    @property
    def hard_failure(self) -> bool:
        """A failure that is not covered by a caveat."""
        return not self.passed and not self.caveat

    def row(self) -> list:
        b, e, h = self.witness
        return [self.name, int(self.passed), repr(float(self.worst_violation)), b, e, h,
                repr(float(self.tolerance)), self.caveat]


def _report(name, violation, index_of, tol, caveat=""):
    """Build a report from an array of signed violations.

    ``index_of`` maps the argmax position in ``violation`` to a (b, e, h)
    grid coordinate.
    """
    if violation.size == 0:
        return PropertyReport(name, True, 0.0, (0, 0, 0), tol, caveat)
    pos = np.unravel_index(int(np.argmax(violation)), violation.shape)
    worst = float(violation[pos])
    witness = tuple(int(x) for x in index_of(pos))
    return PropertyReport(name, worst <= tol, worst, witness, tol, caveat)


def _values(table):
    return table.values if isinstance(table, ValueTable) else np.asarray(table, dtype=float)


def _axis(axis):
    try:
        return AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}") from None


def check_monotone(table, axis: str, direction: str, tol: float = DEFAULT_TOL,
                   name: str | None = None) -> PropertyReport:
    """Monotonicity along one axis; the witness is the lower point of the worst pair."""
    v = _values(table)
    ax = _axis(axis)
    step = np.diff(v, axis=ax)
    if direction == "non-decreasing":
        violation = -step
    elif direction == "non-increasing":
        violation = step
    else:
        raise ValueError(f"direction must be 'non-decreasing' or 'non-increasing', got {direction!r}")
    return _report(name or f"{direction}_{axis}", violation, lambda p: p, tol)


def check_increasing_differences(table, axis: str, tol: float = DEFAULT_TOL,
                                 name: str | None = None, caveat: str = "") -> PropertyReport:
    """Discrete convexity along one axis: f(n+1) - f(n) >= f(n) - f(n-1) - tol.

    Unit steps suffice on an integer grid. The witness is the interior point n.
    """
    v = _values(table)
    ax = _axis(axis)
    if v.shape[ax] < 3:
        raise ValueError(f"{axis} axis has length {v.shape[ax]}; need at least 3")
    violation = -np.diff(v, n=2, axis=ax)

    def index_of(p):
        p = list(p)
        p[ax] += 1
        return p

    return _report(name or f"increasing_differences_{axis}", violation, index_of, tol, caveat)


def check_submodular(table, tol: float = DEFAULT_TOL, name: str | None = None) -> PropertyReport:
    """f(b+1, e+1) - f(b, e+1) <= f(b+1, e) - f(b, e) + tol on every unit square, every h."""
    v = _values(table)
    if v.shape[0] < 2 or v.shape[1] < 2:
        raise ValueError("submodularity needs at least a 2x2 buffer/battery grid")
    cross = v[1:, 1:] - v[:-1, 1:] - v[1:, :-1] + v[:-1, :-1]
    return _report(name or "submodular", cross, lambda p: p, tol)


def _tails(pmf: model.Pmf, n: int) -> np.ndarray:
    # tails[x] = P(X >= x) for x = 0..n-1
    return np.cumsum(pmf.dense(n)[::-1])[::-1]


def check_stochastic_dominance(config: ModelConfig, axis: str, tol: float = KERNEL_TOL,
                               name: str | None = None) -> PropertyReport:
    """Next-state tails grow with the current level: P(x' >= t | x+1) >= P(x' >= t | x).

    Checked for 0 <= x < capacity, every threshold, every action feasible at
    both levels and (for the buffer) every channel state. Battery witnesses
    are reported as (0, e, 0).
    """
    ax = _axis(axis)
    worst, witness = -np.inf, (0, 0, 0)
    if ax == 1:
        n = config.battery_capacity + 1
        for a in (0, 1):
            for e in range(a * config.tx_energy, n - 1):
                gap = _tails(model.battery_kernel(config, e, a), n) - _tails(model.battery_kernel(config, e + 1, a), n)
                if gap.max() > worst:
                    worst, witness = float(gap.max()), (0, e, 0)
    else:
        n = config.buffer_capacity + 1
        for h in range(config.n_channels):
            for a in (0, 1):
                for b in range(a, n - 1):
                    gap = _tails(model.buffer_kernel(config, b, h, a), n) - _tails(model.buffer_kernel(config, b + 1, h, a), n)
                    if gap.max() > worst:
                        worst, witness = float(gap.max()), (b, 0, h)
    if worst == -np.inf:
        worst = 0.0
    label = name or f"{axis}_kernel_stochastic_dominance"
    return PropertyReport(label, worst <= tol, worst, witness, tol)


def check_value_decomposition(value, pds, policy: Policy, config: ModelConfig,
                              tol: float = DECOMPOSITION_TOL,
                              name: str = "value_decomposition") -> PropertyReport:
    """V(b,e,h) = b + (1-a)W(b,e,h) + a q(h) W(b,e-eTX,h) + a (1-q(h)) W(b-1,e-eTX,h), a = pi(b,e,h)."""
    V, W = _values(value), _values(pds)
    act = policy.actions.astype(bool)
    if act.any() and np.any(act & ~solver.transmit_feasible(config)):
        raise model.ContractError("policy transmits at an infeasible state")
    b = np.arange(V.shape[0], dtype=float)[:, None, None]
    rhs = b + W
    etx = config.tx_energy
    q = config.plr[None, None, :]
    tx = np.full(W.shape, np.nan)
    if etx < W.shape[1]:
        spent = W[:, :W.shape[1] - etx, :]
        tx[1:, etx:, :] = b[1:] + q * spent[1:] + (1.0 - q) * spent[:-1]
    rhs = np.where(act, tx, rhs)
    return _report(name, np.abs(V - rhs), lambda p: p, tol)


def auxiliary_cost_table(config: ModelConfig) -> np.ndarray:
    """Auxiliary cost on the grid, shape ``config.shape + (2,)``."""
    out = np.zeros(config.shape + (2,))
    for b, e, h in config.states():
        for a in (0, 1):
            out[b, e, h, a] = model.auxiliary_cost(config, b, e, h, a)
    return out


def check_cost_monotonicity(config: ModelConfig, tol: float = KERNEL_TOL,
                            name: str = "auxiliary_cost_monotone") -> PropertyReport:
    """Auxiliary cost is non-decreasing in b and non-increasing in e, for both actions."""
    d = auxiliary_cost_table(config)
    in_b = -np.diff(d, axis=0)
    in_e = np.diff(d, axis=1)
    rb = _report(name, in_b, lambda p: p[:3], tol)
    re = _report(name, in_e, lambda p: p[:3], tol)
    return rb if rb.worst_violation >= re.worst_violation else re


def transmit_thresholds(policy: Policy, config: ModelConfig) -> list:
    """Lowest battery level at which the policy transmits, per (b, h); None if never.

    Descriptive only: no threshold structure is claimed for the policy.
    """
    rows = []
    A = policy.actions
    for h in range(A.shape[2]):
        for b in range(1, A.shape[0]):
            on = np.flatnonzero(A[b, :, h])
            rows.append((b, h, int(on[0]) if on.size else None))
    return rows


# -- orchestration -----------------------------------------------------------

def _pass(name, ok, violation=0.0, witness=(0, 0, 0), tol=0.0, caveat=""):
    return PropertyReport(name, bool(ok), float(violation), tuple(int(x) for x in witness), tol, caveat)


def _grid_distance(name, a, b, tol):
    return _report(name, np.abs(np.asarray(a) - np.asarray(b)), lambda p: p, tol)


def solver_checks(config: ModelConfig, sol: solver.Solution, theta: float,
                  tol: float = DEFAULT_TOL, system: solver.MarkovSystem | None = None,
                  brute_force_cap: int = 2 ** 12) -> list:
    """Solver invariants: fixed point, contraction, feasibility and oracle agreement."""
    gamma = config.discount
    system = system or solver.MarkovSystem.build(config)
    reports = []

    V1, _ = solver.value_from_pds(sol.pds, config)
    W1 = solver.pds_from_value(V1, config)
    fp = np.maximum(np.abs(W1.values - sol.pds.values), np.abs(V1.values - sol.value.values))
    reports.append(_report("fixed_point_consistency", fp, lambda p: p, theta))

    # a loaded solution has no residual history
    r = sol.report.residuals
    if len(r) >= 3:
        slack = np.array([r[i + 1] - gamma * r[i] - 1e-12 for i in range(1, len(r) - 1)])
        i = int(np.argmax(slack))
        reports.append(_pass("residual_contraction", slack[i] <= 0, slack[i], (i + 2, 0, 0), 0.0))
    if r:
        reports.append(_pass("converged", sol.report.converged, sol.report.residual,
                             (sol.report.iterations, 0, 0), theta))

    bad = sol.policy.infeasible_states(config)
    reports.append(_pass("policy_feasible", bad.size == 0, len(bad), bad[0] if bad.size else (0, 0, 0)))

    V_greedy = solver.exact_policy_evaluation(solver.greedy_table(config), config, system)
    reports.append(_report("optimal_dominates_greedy", sol.value.values - V_greedy.values,
                           lambda p: p, tol + 10 * theta / (1 - gamma)))

    V_conv, _, _ = solver.conventional_value_iteration(config, theta * (1 - gamma), system=system)
    reports.append(_grid_distance("conventional_agreement", V_conv.values, sol.value.values,
                                  10 * theta / (1 - gamma)))

    V_pi = solver.exact_policy_evaluation(sol.policy, config, system)
    reports.append(_grid_distance("policy_evaluation_agreement", V_pi.values, sol.value.values,
                                  10 * theta / (1 - gamma)))

    k = int(system.feasible.sum())
    if 2 ** k <= brute_force_cap:
        V_bf, _ = solver.brute_force_optimal(config, brute_force_cap, system)
        reports.append(_grid_distance("brute_force_agreement", V_bf.values, sol.value.values,
                                      10 * theta / (1 - gamma)))
    return reports


def structural_checks(config: ModelConfig, value, pds, policy: Policy,
                      tol: float = DEFAULT_TOL) -> list:
    """Checks on the model primitives and on a (value, pds, policy) triple."""
    return [
        check_cost_monotonicity(config),
        check_stochastic_dominance(config, "battery"),
        check_stochastic_dominance(config, "buffer"),
        check_monotone(value, "buffer", "non-decreasing", tol, "value_nondecreasing_buffer"),
        check_monotone(value, "battery", "non-increasing", tol, "value_nonincreasing_battery"),
        check_increasing_differences(pds, "buffer", tol, "pds_increasing_differences_buffer",
                                     caveat=FINITE_BUFFER_CAVEAT),
        check_increasing_differences(pds, "battery", tol, "pds_increasing_differences_battery"),
        check_submodular(pds, tol, "pds_submodular"),
        check_increasing_differences(value, "buffer", tol, "value_increasing_differences_buffer",
                                     caveat=FINITE_BUFFER_CAVEAT),
        check_increasing_differences(value, "battery", tol, "value_increasing_differences_battery"),
        check_submodular(value, tol, "value_submodular"),
        check_value_decomposition(value, pds, policy, config, max(DECOMPOSITION_TOL, tol)),
    ]


def run_full_suite(config: ModelConfig, theta: float = solver.DEFAULT_THETA,
                   tau_max: int = solver.DEFAULT_TAU_MAX, tol: float = DEFAULT_TOL,
                   solution: solver.Solution | None = None,
                   brute_force_cap: int = 2 ** 12) -> list:
    """Solve (unless ``solution`` is given) and run every check.

    A supplied solution may carry an empty residual history, in which case
    the contraction check is skipped. Raises ``solver.NotConverged`` when a
    fresh solve hits ``tau_max``.
    """
    if solution is None:
        solution = solver.pds_value_iteration(config, theta, tau_max)
        if not solution.report.converged:
            raise solver.NotConverged(solution.report)
    if solution.value.shape != config.shape:
        raise ValueError(f"solution grid {solution.value.shape} does not match config grid {config.shape}")
    system = solver.MarkovSystem.build(config)
    reports = structural_checks(config, solution.value, solution.pds, solution.policy, tol)
    reports += solver_checks(config, solution, theta, tol, system, brute_force_cap)
    return reports


def write_report(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_report(path) -> list:
    with open(path, newline="") as fh:
        return [PropertyReport(r["property"], r["pass"] == "1", float(r["worst_violation"]),
                               (int(r["witness_b"]), int(r["witness_e"]), int(r["witness_h"])),
                               float(r["tolerance"]), r["caveat"])
                for r in csv.DictReader(fh)]

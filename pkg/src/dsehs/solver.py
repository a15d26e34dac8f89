"""Value functions, policies and the solvers that produce them.

Three independent routes to the optimal value function are provided:

* ``pds_value_iteration`` alternates the post-decision-state updates on
  dense arrays (the primary solver);
* ``conventional_value_iteration`` iterates the ordinary Bellman operator
  over sparse transition matrices assembled from ``model.joint_kernel``;
* ``brute_force_optimal`` evaluates every deterministic policy exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .model import ModelConfig

DEFAULT_THETA = 1e-6
DEFAULT_TAU_MAX = 100_000
# a = 1 must beat a = 0 by more than this to be chosen
TIE_TOL = 1e-12

VALUE = "value"
PDS = "pds"


@dataclass(eq=False)
class ValueTable:
    """Real-valued table over the state grid.

    ``kind`` is ``"value"`` for a conventional value function and ``"pds"``
    for a post-decision-state value function.
    """

    values: np.ndarray
    kind: str = VALUE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"value table must be 3-dimensional, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value table has non-finite entries")
        if self.kind not in (VALUE, PDS):
            raise ValueError(f"unknown table kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, s):
        return float(self.values[tuple(s)])

    def sup_distance(self, other: "ValueTable") -> float:
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return float(np.abs(self.values - other.values).max())


@dataclass(eq=False)
class Policy:
    """Deterministic action table over the state grid."""

    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions).astype(np.int8)
        if self.actions.ndim != 3 or not np.isin(self.actions, (0, 1)).all():
            raise ValueError("policy must be a 3-d table of 0/1 actions")

    @property
    def shape(self):
        return self.actions.shape

    @property
    def flat(self) -> np.ndarray:
        return self.actions.reshape(-1)

    def __call__(self, s) -> int:
        return int(self.actions[tuple(s)])

    def infeasible_states(self, config: ModelConfig) -> np.ndarray:
        """Coordinates (rows of b, e, h) where the policy transmits illegally."""
        return np.argwhere((self.actions == 1) & ~transmit_feasible(config))

    def check_feasible(self, config: ModelConfig):
        if self.shape != config.shape:
            raise ValueError(f"policy shape {self.shape} does not match grid {config.shape}")
        bad = self.infeasible_states(config)
        if bad.size:
            raise model.ContractError(f"policy transmits at infeasible state {tuple(int(x) for x in bad[0])}")


@dataclass
class SolveReport:
    iterations: int
    residual: float
    residuals: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = True
    theta: float = DEFAULT_THETA


class NotConverged(RuntimeError):
    def __init__(self, report: "SolveReport"):
        super().__init__(f"value iteration stopped after {report.iterations} iterations "
                         f"with residual {report.residual:.3g}")
        self.report = report

    def __reduce__(self):
        return type(self), (self.report,)


class Solution(NamedTuple):
    pds: ValueTable
    value: ValueTable
    policy: Policy
    report: SolveReport


def transmit_feasible(config: ModelConfig) -> np.ndarray:
    """Boolean grid: True where both actions are allowed."""
    b = np.arange(config.buffer_capacity + 1)[:, None, None]
    e = np.arange(config.battery_capacity + 1)[None, :, None]
    return np.broadcast_to((b > 0) & (e >= config.tx_energy), config.shape).copy()


def greedy_table(config: ModelConfig) -> Policy:
    """Transmit whenever allowed."""
    return Policy(transmit_feasible(config))


# -- post-decision-state route ---------------------------------------------

def _expect_clipped_shift(arr, pmf, axis):
    # out[x] = sum_k pmf[k] * arr[min(x + k, n - 1)] along axis
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for k, pk in enumerate(pmf):
        if pk == 0.0:
            continue
        idx = np.minimum(np.arange(n) + k, n - 1)
        out += pk * np.take(arr, idx, axis=axis)
    return out


def overflow_term(config: ModelConfig) -> np.ndarray:
    """Expected overflow penalty for each post-decision buffer level."""
    bt = np.arange(config.buffer_capacity + 1)
    over = np.zeros(bt.size)
    for l, pl in enumerate(config.arrival_pmf):
        over += pl * np.maximum(bt + l - config.buffer_capacity, 0)
    return config.overflow_penalty * over


def _action_values(pds_values, config):
    W = pds_values
    b = np.arange(config.buffer_capacity + 1, dtype=float)[:, None, None]
    q_idle = b + W
    q_tx = np.full(W.shape, np.inf)
    etx = config.tx_energy
    q = config.plr[None, None, :]
    if etx < W.shape[1]:
        spent = W[:, :W.shape[1] - etx, :]  # spent[:, e - etx] = W[:, e - etx]
        q_tx[1:, etx:, :] = b[1:] + q * spent[1:] + (1.0 - q) * spent[:-1]
    return q_idle, q_tx


def value_from_pds(pds: ValueTable, config: ModelConfig) -> tuple[ValueTable, Policy]:
    """Minimize over actions the holding cost plus expected post-decision value."""
    q_idle, q_tx = _action_values(pds.values, config)
    act = q_tx < q_idle - TIE_TOL
    return ValueTable(np.where(act, q_tx, q_idle), VALUE), Policy(act)


def pds_from_value(value: ValueTable, config: ModelConfig) -> ValueTable:
    """Expected overflow penalty plus discounted value after arrivals, harvest and fading."""
    W = value.values @ config.channel_kernel.T
    W = _expect_clipped_shift(W, config.harvest_pmf, axis=1)
    W = _expect_clipped_shift(W, config.arrival_pmf, axis=0)
    return ValueTable(overflow_term(config)[:, None, None] + config.discount * W, PDS)


def pds_value_iteration(config: ModelConfig, theta: float = DEFAULT_THETA,
                        tau_max: int = DEFAULT_TAU_MAX) -> Solution:
    """Post-decision-state value iteration from an all-zero table.

    Each sweep computes the value function from the current post-decision
    table and then the next post-decision table from that value function;
    the residual is the sup-norm change of the post-decision table. The
    returned value function and policy are re-derived from the final
    post-decision table. If ``tau_max`` sweeps pass without the residual
    dropping below ``theta`` the report is marked ``converged=False``.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    start = time.perf_counter()
    pds = ValueTable(np.zeros(config.shape), PDS)
    residuals = []
    converged = False
    for _ in range(tau_max):
        value, _ = value_from_pds(pds, config)
        nxt = pds_from_value(value, config)
        delta = nxt.sup_distance(pds)
        residuals.append(delta)
        pds = nxt
        if delta < theta:
            converged = True
            break
    value, policy = value_from_pds(pds, config)
    report = SolveReport(
        iterations=len(residuals),
        residual=residuals[-1] if residuals else float("nan"),
        residuals=residuals,
        wall_time=time.perf_counter() - start,
        converged=converged,
        theta=theta,
    )
    return Solution(pds, value, policy, report)


# -- conventional route ----------------------------------------------------

@dataclass(eq=False)
class MarkovSystem:
    """Sparse transition matrices and cost vectors for both actions.

    Rows of the transmit matrix at states where transmitting is infeasible
    are left empty and their cost is ``inf``.
    """

    idle: sp.csr_matrix
    transmit: sp.csr_matrix
    cost_idle: np.ndarray
    cost_transmit: np.ndarray
    feasible: np.ndarray

    @classmethod
    def build(cls, config: ModelConfig) -> "MarkovSystem":
        n = config.n_states
        feasible = transmit_feasible(config).reshape(-1)
        rows = {0: ([], [], []), 1: ([], [], [])}
        costs = {0: np.zeros(n), 1: np.full(n, np.inf)}
        cost_cache = {}
        for i, s in enumerate(config.states()):
            for a in (0, 1):
                if a == 1 and not feasible[i]:
                    continue
                key = (s.b, s.h, a)
                if key not in cost_cache:
                    cost_cache[key] = model.buffer_cost(config, s.b, s.h, a)
                costs[a][i] = cost_cache[key]
                r, c, v = rows[a]
                for s2, p in model.joint_kernel(config, s, a).items():
                    r.append(i)
                    c.append(config.flat_index(s2))
                    v.append(p)
        mats = {a: sp.csr_matrix((rows[a][2], (rows[a][0], rows[a][1])), shape=(n, n))
                for a in (0, 1)}
        return cls(mats[0], mats[1], costs[0], costs[1], feasible)

    def policy_system(self, policy: Policy):
        """Transition matrix and cost vector of a fixed policy."""
        act = policy.flat.astype(bool)
        if np.any(act & ~self.feasible):
            raise model.ContractError("policy transmits at an infeasible state")
        D = sp.diags(act.astype(float))
        P = (sp.identity(act.size) - D) @ self.idle + D @ self.transmit
        c = np.where(act, self.cost_transmit, self.cost_idle)
        return P.tocsr(), c

    def greedy_step(self, V: np.ndarray, gamma: float):
        q_idle = self.cost_idle + gamma * (self.idle @ V)
        q_tx = np.where(self.feasible, self.cost_transmit + gamma * (self.transmit @ V), np.inf)
        act = q_tx < q_idle - TIE_TOL
        return np.where(act, q_tx, q_idle), act


def conventional_value_iteration(config: ModelConfig, theta: float = DEFAULT_THETA,
                                 tau_max: int = DEFAULT_TAU_MAX,
                                 system: MarkovSystem | None = None) -> tuple[ValueTable, Policy, SolveReport]:
    """Plain Bellman iteration on the joint transition matrices, from V = 0."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    start = time.perf_counter()
    system = system or MarkovSystem.build(config)
    V = np.zeros(config.n_states)
    residuals = []
    converged = False
    for _ in range(tau_max):
        nxt, _ = system.greedy_step(V, config.discount)
        delta = float(np.abs(nxt - V).max())
        residuals.append(delta)
        V = nxt
        if delta < theta:
            converged = True
            break
    _, act = system.greedy_step(V, config.discount)
    report = SolveReport(len(residuals), residuals[-1], residuals,
                         time.perf_counter() - start, converged, theta)
    return (ValueTable(V.reshape(config.shape), VALUE),
            Policy(act.reshape(config.shape)), report)


def exact_policy_evaluation(policy: Policy, config: ModelConfig,
                            system: MarkovSystem | None = None) -> ValueTable:
    """Discounted cost of following ``policy`` forever, by a direct sparse solve."""
    assert config.discount < 1.0, "policy evaluation needs discount < 1"
    policy.check_feasible(config)
    system = system or MarkovSystem.build(config)
    P, c = system.policy_system(policy)
    A = (sp.identity(config.n_states, format="csc") - config.discount * P).tocsc()
    V = spla.spsolve(A, c)
    return ValueTable(np.asarray(V).reshape(config.shape), VALUE)


def brute_force_optimal(config: ModelConfig, max_policies: int = 2 ** 20,
                        system: MarkovSystem | None = None) -> tuple[ValueTable, Policy]:
    """Evaluate every deterministic feasible policy and keep the best.

    Only states where transmitting is allowed contribute a binary choice, so
    there are ``2 ** k`` policies for ``k`` such states. Raises
    ``ValueError`` when that exceeds ``max_policies``.
    """
    system = system or MarkovSystem.build(config)
    choice = np.flatnonzero(system.feasible)
    k = choice.size
    if 2 ** k > max_policies:
        raise ValueError(f"{k} two-action states give 2**{k} policies, "
                         f"above the cap of {max_policies}")
    n = config.n_states
    gamma = config.discount
    P0 = system.idle.toarray()
    P1 = system.transmit.toarray()
    c0, c1 = system.cost_idle, np.where(system.feasible, system.cost_transmit, 0.0)
    eye = np.eye(n)
    best_v = np.full(n, np.inf)
    best_total = np.inf
    best_act = np.zeros(n, dtype=bool)
    for mask in range(2 ** k):
        act = np.zeros(n, dtype=bool)
        bits = (mask >> np.arange(k)) & 1
        act[choice] = bits.astype(bool)
        P = np.where(act[:, None], P1, P0)
        c = np.where(act, c1, c0)
        v = np.linalg.solve(eye - gamma * P, c)
        best_v = np.minimum(best_v, v)
        total = v.sum()
        if total < best_total - TIE_TOL * n:
            best_total, best_act = total, act
    return ValueTable(best_v.reshape(config.shape), VALUE), Policy(best_act.reshape(config.shape))


# -- persistence -------------------------------------------------------------

SOLUTION_COLUMNS = ("index", "b", "e", "h", "V", "V_pds", "policy")


def save_solution(path, value: ValueTable, pds: ValueTable, policy: Policy):
    """Write one CSV row per state; floats use ``repr`` so they round-trip exactly."""
    if not (value.shape == pds.shape == policy.shape):
        raise ValueError("value, pds and policy tables must share a shape")
    shape = value.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLUTION_COLUMNS)
        for i, (v, vp, a) in enumerate(zip(value.flat, pds.flat, policy.flat)):
            b, e, h = np.unravel_index(i, shape)
            w.writerow([i, b, e, h, repr(float(v)), repr(float(vp)), int(a)])


def load_solution(path) -> tuple[ValueTable, ValueTable, Policy]:
    """Inverse of ``save_solution``; the grid shape is inferred from the coordinates."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SOLUTION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = [(int(r["b"]), int(r["e"]), int(r["h"]), float(r["V"]), float(r["V_pds"]), int(r["policy"]))
                for r in reader]
    if not rows:
        raise ValueError(f"{path}: no rows")
    shape = tuple(max(r[i] for r in rows) + 1 for i in range(3))
    if len(rows) != int(np.prod(shape)):
        raise ValueError(f"{path}: {len(rows)} rows do not cover a {shape} grid")
    V, W, A = np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int8)
    for b, e, h, v, vp, a in rows:
        V[b, e, h], W[b, e, h], A[b, e, h] = v, vp, a
    return ValueTable(V, VALUE), ValueTable(W, PDS), Policy(A)

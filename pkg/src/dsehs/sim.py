"""Seeded Monte-Carlo simulation of scheduling policies.

Randomness comes from four independent substreams of one
``numpy.random.SeedSequence``: channel fading, packet arrivals, energy
harvest and transmission loss. The first three never depend on the actions
taken, and the loss stream holds one uniform per slot that is consulted only
when the policy transmits. Two policies simulated with the same seed thus
see identical channel, arrival and harvest paths (common random numbers).

A slot is a battery-outage slot when packets are waiting but the battery
holds less than one transmission's worth of energy.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import solver
from .model import ModelConfig, StateIndex
from .solver import Policy

TRACE_COLUMNS = ("n", "b", "e", "h", "a", "f", "l", "eH", "dropped")
METRIC_FIELDS = ("avg_backlog", "avg_battery", "overflow_prob", "overflow_per_slot",
                 "outage_prob", "delay", "throughput")
# stream_key offset used for the second policy when streams are not shared
INDEPENDENT_KEY = 1


class SimulationError(RuntimeError):
    pass


def greedy_policy(s, config: ModelConfig) -> int:
    """Transmit whenever packets are waiting and the battery can pay for it."""
    b, e, _ = s
    return int(b > 0 and e >= config.tx_energy)


@dataclass(eq=False)
class SimTrace:
    """Per-slot record; ``b[n], e[n], h[n]`` is the state at the start of slot ``n``."""

    seed: int
    b: np.ndarray
    e: np.ndarray
    h: np.ndarray
    a: np.ndarray
    f: np.ndarray
    l: np.ndarray
    e_h: np.ndarray
    dropped: np.ndarray
    final_state: StateIndex
    tx_energy: int

    @property
    def horizon(self) -> int:
        return int(self.b.size)

    def rows(self):
        for n in range(self.horizon):
            yield (n, int(self.b[n]), int(self.e[n]), int(self.h[n]), int(self.a[n]), int(self.f[n]),
                   int(self.l[n]), int(self.e_h[n]), int(self.dropped[n]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            w.writerows(self.rows())


@dataclass(frozen=True)
class Metrics:
    avg_backlog: float
    avg_battery: float
    overflow_prob: float
    overflow_per_slot: float
    outage_prob: float
    delay: float
    throughput: float

    def as_dict(self) -> dict:
        return asdict(self)


def _streams(seed, stream_key):
    ss = np.random.SeedSequence(seed, spawn_key=(stream_key,))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _inverse_cdf(u, pmf):
    cdf = np.cumsum(pmf)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(pmf) - 1)


def _resolve(policy, config):
    if policy is None or policy == "greedy":
        return solver.greedy_table(config).actions
    if isinstance(policy, Policy):
        if policy.shape != config.shape:
            raise SimulationError(f"policy grid {policy.shape} does not match config grid {config.shape}")
        return policy.actions
    if callable(policy):
        return np.array([policy(s) for s in config.states()], dtype=np.int8).reshape(config.shape)
    raise TypeError(f"cannot simulate policy of type {type(policy).__name__}")


def simulate(policy, config: ModelConfig, horizon: int, seed: int, initial=None,
             stream_key: int = 0) -> SimTrace:
    """Run ``policy`` for ``horizon`` slots.

    ``policy`` is a :class:`Policy`, a callable ``state -> action``, or
    ``"greedy"``. The default initial state is an empty buffer, full battery
    and a channel state drawn from the stationary channel law. Raises
    :class:`SimulationError` if the policy transmits where it may not.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    act = _resolve(policy, config)
    rng_h, rng_l, rng_e, rng_f = _streams(seed, stream_key)

    P = config.channel_kernel
    if initial is None:
        h0 = int(_inverse_cdf(rng_h.random(), config.stationary_channel()))
        b0, e0 = 0, config.battery_capacity
    else:
        b0, e0, h0 = config.check_state(initial)
    u_h = rng_h.random(horizon)
    cdf_h = np.cumsum(P, axis=1)
    h = np.empty(horizon + 1, dtype=np.int64)
    h[0] = h0
    n_h = config.n_channels
    for n in range(horizon):
        h[n + 1] = min(int(np.searchsorted(cdf_h[h[n]], u_h[n], side="right")), n_h - 1)

    l = _inverse_cdf(rng_l.random(horizon), config.arrival_pmf)
    e_h = _inverse_cdf(rng_e.random(horizon), config.harvest_pmf)
    u_loss = rng_f.random(horizon)
    success = (u_loss < 1.0 - config.plr[h[:horizon]]).tolist()

    nb, ne, etx = config.buffer_capacity, config.battery_capacity, config.tx_energy
    act_l = act.tolist()
    hl, ll, el = h.tolist(), l.tolist(), e_h.tolist()
    B, E, A, F, D = ([0] * horizon for _ in range(5))
    b, e = b0, e0
    for n in range(horizon):
        hn = hl[n]
        a = act_l[b][e][hn]
        if a and (b == 0 or e < etx):
            raise SimulationError(f"policy transmits at infeasible state {(b, e, hn)} in slot {n}")
        f = 1 if a and success[n] else 0
        raw = b - f + ll[n]
        B[n], E[n], A[n], F[n] = b, e, a, f
        D[n] = raw - nb if raw > nb else 0
        b = min(raw, nb)
        e = min(e - a * etx + el[n], ne)

    as_arr = lambda x: np.asarray(x, dtype=np.int64)
    return SimTrace(seed, as_arr(B), as_arr(E), h[:horizon].copy(), as_arr(A), as_arr(F),
                    l.astype(np.int64), e_h.astype(np.int64), as_arr(D),
                    StateIndex(b, e, int(h[horizon])), etx)


def validate_trace(trace: SimTrace, config: ModelConfig):
    """Replay the buffer and battery recursions; raise on the first mismatch."""
    nb, ne, etx = config.buffer_capacity, config.battery_capacity, config.tx_energy
    b_next = np.append(trace.b[1:], trace.final_state.b)
    e_next = np.append(trace.e[1:], trace.final_state.e)
    checks = {
        "action feasibility": (trace.a == 0) | ((trace.b > 0) & (trace.e >= etx)),
        "goodput bound": trace.f <= trace.a,
        "buffer recursion": b_next == np.minimum(trace.b - trace.f + trace.l, nb),
        "battery recursion": e_next == np.minimum(trace.e - trace.a * etx + trace.e_h, ne),
        "drop count": trace.dropped == np.maximum(trace.b - trace.f + trace.l - nb, 0),
        "state bounds": (trace.b >= 0) & (trace.b <= nb) & (trace.e >= 0) & (trace.e <= ne)
                        & (trace.h >= 0) & (trace.h < config.n_channels),
    }
    for what, ok in checks.items():
        if not ok.all():
            n = int(np.argmin(ok))
            raise SimulationError(f"{what} violated at slot {n}")
    return True


def compute_metrics(trace: SimTrace) -> Metrics:
    if trace.horizon == 0:
        raise ValueError("empty trace")
    H = trace.horizon
    backlog = float(trace.b.mean())
    arrived = int(trace.l.sum())
    dropped = int(trace.dropped.sum())
    outage = (trace.b > 0) & (trace.e < trace.tx_energy)
    throughput = float(trace.f.sum()) / H
    if throughput > 0:
        delay = backlog / throughput
    else:
        delay = 0.0 if backlog == 0 else math.inf
    return Metrics(
        avg_backlog=backlog,
        avg_battery=float(trace.e.mean()),
        overflow_prob=dropped / arrived if arrived else 0.0,
        overflow_per_slot=dropped / H,
        outage_prob=float(outage.mean()),
        delay=delay,
        throughput=throughput,
    )


def stationary_law(policy: Policy, config: ModelConfig, tol: float = 1e-13,
                   max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary distribution on the grid of the chain driven by ``policy``.

    Power iteration on the exact transition matrix; independent of the
    simulator's random streams.
    """
    system = solver.MarkovSystem.build(config)
    P, _ = system.policy_system(policy)
    PT = P.T.tocsr()
    x = np.full(config.n_states, 1.0 / config.n_states)
    for _ in range(max_iter):
        nxt = 0.5 * (x + PT @ x)
        if np.abs(nxt - x).max() < tol:
            return (nxt / nxt.sum()).reshape(config.shape)
        x = nxt
    raise RuntimeError("stationary power iteration did not converge")


# -- policy comparison -------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    p: float
    policy: str
    seed: int
    metrics: Metrics

    def record(self) -> dict:
        return {"p": self.p, "policy": self.policy, "seed": self.seed, **self.metrics.as_dict()}


def paired_run(config: ModelConfig, policies: dict, horizon: int, seed: int,
               common_random: bool = True, p: float | None = None) -> list:
    """Simulate several policies on one seed.

    With ``common_random`` every policy reuses the same random streams;
    otherwise the i-th policy gets its own ``stream_key``. Every trace is
    replay-validated before its metrics are taken.
    """
    p = float(config.arrival_pmf @ np.arange(config.arrival_pmf.size)) if p is None else p
    rows = []
    for i, (name, pol) in enumerate(policies.items()):
        key = 0 if common_random else i * INDEPENDENT_KEY
        trace = simulate(pol, config, horizon, seed, stream_key=key)
        validate_trace(trace, config)
        rows.append(ComparisonRow(p, name, seed, compute_metrics(trace)))
    return rows


def _sweep_point(args):
    config, p, horizon, seeds, common_random, theta, tau_max, loaded = args
    cfg = config.with_arrival_rate(p)
    if loaded is None:
        sol = solver.pds_value_iteration(cfg, theta, tau_max)
        if not sol.report.converged:
            raise solver.NotConverged(sol.report)
        policies = {"optimal": sol.policy, "greedy": "greedy"}
    else:
        policies = {"loaded": loaded, "greedy": "greedy"}
    rows = []
    for seed in seeds:
        rows += paired_run(cfg, policies, horizon, seed, common_random, p)
    return rows


def compare_policies(config: ModelConfig, p_grid, horizon: int = 50_000, seeds=(0,),
                     common_random: bool = True, theta: float = solver.DEFAULT_THETA,
                     tau_max: int = solver.DEFAULT_TAU_MAX, policy: Policy | None = None,
                     jobs: int = 1, on_point=None) -> list:
    """Optimal versus greedy across Bernoulli arrival rates.

    The optimal policy is re-solved for every rate unless a fixed ``policy``
    is supplied, in which case it is labelled ``"loaded"`` and no solve
    happens. ``on_point(rows_so_far)`` is called after each rate finishes.
    Rows come back sorted by (p, policy, seed) whatever ``jobs`` is.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    tasks = [(config, float(p), horizon, seeds, common_random, theta, tau_max, policy)
             for p in p_grid]
    rows = []

    def done(part):
        rows.extend(part)
        rows.sort(key=lambda r: (r.p, r.policy, r.seed))
        if on_point is not None:
            on_point(list(rows))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_sweep_point, tasks):
                done(part)
    else:
        for t in tasks:
            done(_sweep_point(t))
    return rows


def write_metrics(path, rows, columns=None):
    columns = columns or ("p", "policy", "seed") + METRIC_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            rec = r.record()
            w.writerow([_fmt(rec[c]) for c in columns])


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


__all__ = [
    "ComparisonRow", "Metrics", "SimTrace", "SimulationError", "compare_policies",
    "compute_metrics", "greedy_policy", "paired_run", "simulate", "stationary_law",
    "validate_trace", "write_metrics",
]

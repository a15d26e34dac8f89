"""System model for delay-sensitive energy-harvesting scheduling.

A state is a triple ``(b, e, h)``: packets backlogged in the buffer, energy
packets in the battery, and the index of the current channel state. All
tables in this package are numpy arrays of shape ``config.shape`` =
``(N_b + 1, N_e + 1, N_h)`` and flatten in C order, so the flat index of
``(b, e, h)`` is ``(b * (N_e + 1) + e) * N_h + h``.

Kernels are built by exhaustive enumeration of the arrival, harvest and
goodput supports; nothing here samples.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

PMF_TOL = 1e-12
DEFAULT_MAX_SUPPORT = 8


class ModelError(ValueError):
    """Invalid model parameterization."""


class BoundsError(IndexError):
    """A state coordinate lies outside the grid."""


class ContractError(ValueError):
    """An operation was called with an infeasible action or goodput."""


class StateIndex(NamedTuple):
    b: int
    e: int
    h: int


@dataclass(frozen=True, eq=False)
class Pmf:
    """Probability mass function on the consecutive integers ``offset, offset+1, ...``."""

    offset: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ModelError("pmf must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ModelError(f"pmf has negative or non-finite entries: {p.tolist()}")
        if abs(p.sum() - 1.0) > PMF_TOL:
            raise ModelError(f"pmf sums to {p.sum():.15g}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.probs.size)

    def __getitem__(self, x: int) -> float:
        i = x - self.offset
        if 0 <= i < self.probs.size:
            return float(self.probs[i])
        return 0.0

    def mean(self) -> float:
        return float(self.support @ self.probs)

    def tail(self, threshold: int) -> float:
        """P(X >= threshold)."""
        i = max(threshold - self.offset, 0)
        return float(self.probs[i:].sum())

    def dense(self, n: int) -> np.ndarray:
        """Probabilities laid out over ``0..n-1``; support must fit."""
        out = np.zeros(n)
        if self.offset < 0 or self.offset + self.probs.size > n:
            raise BoundsError(f"support [{self.offset}, {self.offset + self.probs.size}) exceeds 0..{n - 1}")
        out[self.offset:self.offset + self.probs.size] = self.probs
        return out

    def __repr__(self):
        return f"Pmf(offset={self.offset}, probs={self.probs.tolist()})"


def _pmf_from_mass(mass: dict) -> Pmf:
    lo, hi = min(mass), max(mass)
    probs = np.zeros(hi - lo + 1)
    for x, p in mass.items():
        probs[x - lo] += p
    return Pmf(lo, probs)


def bernoulli(p: float) -> np.ndarray:
    """Pmf vector over {0, 1}."""
    if not 0.0 <= p <= 1.0:
        raise ModelError(f"Bernoulli parameter {p} outside [0, 1]")
    return np.array([1.0 - p, p])


def birth_death_kernel(n: int) -> np.ndarray:
    """Lazy birth-death chain on ``n`` states.

    Interior states step up or down with probability 1/4 each; the two end
    states step inward with probability 1/2. The stationary law is
    proportional to (1, 2, ..., 2, 1).
    """
    if n < 1:
        raise ModelError("need at least one channel state")
    if n == 1:
        return np.ones((1, 1))
    P = np.zeros((n, n))
    for i in range(n):
        if i == 0:
            P[0, 0], P[0, 1] = 0.5, 0.5
        elif i == n - 1:
            P[i, i], P[i, i - 1] = 0.5, 0.5
        else:
            P[i, i - 1], P[i, i], P[i, i + 1] = 0.25, 0.5, 0.25
    return P


def stationary_distribution(P: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix by power iteration."""
    P = np.asarray(P, dtype=float)
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        # averaging with the identity removes periodicity without moving the fixed point
        nxt = 0.5 * (pi + pi @ P)
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def _as_prob_vector(name, values, max_support):
    p = np.array(values, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ModelError(f"{name} must be a non-empty vector")
    if p.size - 1 > max_support:
        raise ModelError(f"{name} support 0..{p.size - 1} exceeds the cap {max_support}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ModelError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > PMF_TOL:
        raise ModelError(f"{name} sums to {p.sum():.15g}, not 1")
    p.setflags(write=False)
    return p


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Full parameterization of the scheduling MDP.

    ``arrival_pmf[l]`` and ``harvest_pmf[k]`` are probabilities of ``l`` data
    packets and ``k`` energy packets arriving in one slot. ``plr[h]`` is the
    packet loss rate in channel state ``h`` and must decrease with ``h``
    (strictly, unless ``allow_nonstrict_plr``).
    """

    buffer_capacity: int
    battery_capacity: int
    plr: Sequence[float]
    channel_kernel: np.ndarray
    arrival_pmf: Sequence[float]
    harvest_pmf: Sequence[float]
    tx_energy: int = 1
    overflow_penalty: float = 50.0
    discount: float = 0.98
    channel_labels: tuple | None = None
    allow_nonstrict_plr: bool = False
    max_support: int = DEFAULT_MAX_SUPPORT

    def __post_init__(self):
        def put(name, value):
            object.__setattr__(self, name, value)

        for name in ("buffer_capacity", "battery_capacity", "tx_energy", "max_support"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ModelError(f"{name} must be an integer, got {v!r}")
            put(name, int(v))
        if self.buffer_capacity < 0 or self.battery_capacity < 0:
            raise ModelError("buffer and battery capacities must be non-negative")
        if self.tx_energy < 1:
            raise ModelError("tx_energy must be a positive integer")
        if self.tx_energy > self.battery_capacity:
            warnings.warn(
                f"tx_energy={self.tx_energy} exceeds battery_capacity={self.battery_capacity}; "
                "transmission is never feasible", stacklevel=3)

        q = np.array(self.plr, dtype=float)
        if q.ndim != 1 or q.size == 0:
            raise ModelError("plr must list one loss rate per channel state")
        if np.any((q < 0) | (q > 1)):
            raise ModelError(f"plr entries must lie in [0, 1]: {q.tolist()}")
        steps = np.diff(q)
        if self.allow_nonstrict_plr:
            if np.any(steps > 0):
                raise ModelError("plr must be non-increasing in the channel index")
        elif np.any(steps >= 0):
            raise ModelError("plr must be strictly decreasing in the channel index")
        q.setflags(write=False)
        put("plr", q)

        P = np.array(self.channel_kernel, dtype=float)
        if P.shape != (q.size, q.size):
            raise ModelError(f"channel_kernel must be {q.size}x{q.size}, got shape {P.shape}")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ModelError("channel_kernel has negative or non-finite entries")
        bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > PMF_TOL)
        if bad.size:
            raise ModelError(f"channel_kernel row {bad[0]} sums to {P[bad[0]].sum():.15g}, not 1")
        P.setflags(write=False)
        put("channel_kernel", P)

        put("arrival_pmf", _as_prob_vector("arrival_pmf", self.arrival_pmf, self.max_support))
        put("harvest_pmf", _as_prob_vector("harvest_pmf", self.harvest_pmf, self.max_support))

        if self.overflow_penalty < 0:
            raise ModelError("overflow_penalty must be non-negative")
        if not 0.0 <= self.discount < 1.0:
            raise ModelError(f"discount must lie in [0, 1), got {self.discount}")
        put("overflow_penalty", float(self.overflow_penalty))
        put("discount", float(self.discount))
        if self.channel_labels is not None:
            labels = tuple(str(x) for x in self.channel_labels)
            if len(labels) != q.size:
                raise ModelError("need one channel label per channel state")
            put("channel_labels", labels)

    @property
    def n_channels(self) -> int:
        return self.plr.size

    @property
    def shape(self) -> tuple:
        return (self.buffer_capacity + 1, self.battery_capacity + 1, self.n_channels)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    @property
    def max_arrivals(self) -> int:
        return self.arrival_pmf.size - 1

    @property
    def max_harvest(self) -> int:
        return self.harvest_pmf.size - 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_arrival_rate(self, p: float) -> "ModelConfig":
        """Same model with Bernoulli(p) packet arrivals."""
        return self.replace(arrival_pmf=bernoulli(p))

    def check_state(self, s) -> StateIndex:
        b, e, h = (int(x) for x in s)
        if not (0 <= b <= self.buffer_capacity and 0 <= e <= self.battery_capacity
                and 0 <= h < self.n_channels):
            raise BoundsError(f"state {(b, e, h)} outside grid {self.shape}")
        return StateIndex(b, e, h)

    def flat_index(self, s) -> int:
        s = self.check_state(s)
        return int(np.ravel_multi_index(s, self.shape))

    def state_at(self, index: int) -> StateIndex:
        if not 0 <= index < self.n_states:
            raise BoundsError(f"flat index {index} outside [0, {self.n_states})")
        return StateIndex(*(int(x) for x in np.unravel_index(index, self.shape)))

    def states(self):
        """All states in flat-index order."""
        for i in range(self.n_states):
            yield self.state_at(i)

    def stationary_channel(self) -> np.ndarray:
        return stationary_distribution(self.channel_kernel)


def table1_config(arrival_rate: float = 0.4, **overrides) -> ModelConfig:
    """The evaluation setting: 26x26 buffer/battery grid, 8 channel states."""
    params = dict(
        buffer_capacity=25,
        battery_capacity=25,
        plr=[0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1],
        channel_kernel=birth_death_kernel(8),
        arrival_pmf=bernoulli(arrival_rate),
        harvest_pmf=bernoulli(0.7),
        tx_energy=1,
        overflow_penalty=50.0,
        discount=0.98,
        channel_labels=tuple(str(i) for i in range(1, 9)),
    )
    params.update(overrides)
    return ModelConfig(**params)


def tiny_config(**overrides) -> ModelConfig:
    """3x3x2 instance small enough for exhaustive policy enumeration."""
    params = dict(
        buffer_capacity=2,
        battery_capacity=2,
        plr=[0.8, 0.3],
        channel_kernel=birth_death_kernel(2),
        arrival_pmf=bernoulli(0.4),
        harvest_pmf=bernoulli(0.7),
        tx_energy=1,
        overflow_penalty=50.0,
        discount=0.9,
    )
    params.update(overrides)
    return ModelConfig(**params)


# -- actions and one-step dynamics -------------------------------------------

def feasible_actions(config: ModelConfig, b: int, e: int) -> frozenset:
    config.check_state((b, e, 0))
    if b > 0 and e >= config.tx_energy:
        return frozenset({0, 1})
    return frozenset({0})


def _check_action(config, b, e, a):
    if a not in (0, 1):
        raise ContractError(f"action must be 0 or 1, got {a!r}")
    if a == 1 and b == 0:
        raise ContractError("cannot transmit from an empty buffer")
    if e is not None and a * config.tx_energy > e:
        raise ContractError(f"transmission needs {config.tx_energy} energy packets, battery holds {e}")


def goodput_pmf(config: ModelConfig, a: int, h: int) -> Pmf:
    """Distribution of the number of packets delivered, over {0, 1}."""
    config.check_state((0, 0, h))
    if a not in (0, 1):
        raise ContractError(f"action must be 0 or 1, got {a!r}")
    if a == 0:
        return Pmf(0, [1.0, 0.0])
    q = float(config.plr[h])
    return Pmf(0, [q, 1.0 - q])


def buffer_cost(config: ModelConfig, b: int, h: int, a: int) -> float:
    """Holding cost ``b`` plus expected overflow penalty for the slot."""
    config.check_state((b, 0, h))
    _check_action(config, b, None, a)
    gp = goodput_pmf(config, a, h)
    nb = config.buffer_capacity
    overflow = 0.0
    for f in (0, 1):
        if gp[f] == 0.0:
            continue
        for l, pl in enumerate(config.arrival_pmf):
            overflow += gp[f] * pl * max(b - f + l - nb, 0)
    return b + config.overflow_penalty * overflow


def auxiliary_cost(config: ModelConfig, b: int, e: int, h: int, a: int) -> float:
    """Cost of ``a`` when feasible at ``(b, e)``; otherwise the idle cost."""
    if a not in (0, 1):
        raise ContractError(f"action must be 0 or 1, got {a!r}")
    if 1 in feasible_actions(config, b, e):
        return buffer_cost(config, b, h, a)
    return buffer_cost(config, b, h, 0)


def battery_kernel(config: ModelConfig, e: int, a: int) -> Pmf:
    config.check_state((0, e, 0))
    if a not in (0, 1):
        raise ContractError(f"action must be 0 or 1, got {a!r}")
    if a * config.tx_energy > e:
        raise ContractError(f"transmission needs {config.tx_energy} energy packets, battery holds {e}")
    mass = {}
    base = e - a * config.tx_energy
    for k, pk in enumerate(config.harvest_pmf):
        if pk == 0.0:
            continue
        nxt = min(base + k, config.battery_capacity)
        mass[nxt] = mass.get(nxt, 0.0) + pk
    return _pmf_from_mass(mass)


def buffer_kernel(config: ModelConfig, b: int, h: int, a: int) -> Pmf:
    config.check_state((b, 0, h))
    _check_action(config, b, None, a)
    gp = goodput_pmf(config, a, h)
    mass = {}
    for f in (0, 1):
        if gp[f] == 0.0:
            continue
        for l, pl in enumerate(config.arrival_pmf):
            if pl == 0.0:
                continue
            nxt = min(b - f + l, config.buffer_capacity)
            mass[nxt] = mass.get(nxt, 0.0) + gp[f] * pl
    return _pmf_from_mass(mass)


def joint_kernel(config: ModelConfig, s, a: int) -> dict:
    """Sparse next-state law: ``{StateIndex: probability}`` with zero entries dropped."""
    b, e, h = config.check_state(s)
    _check_action(config, b, e, a)
    pb = buffer_kernel(config, b, h, a)
    pe = battery_kernel(config, e, a)
    ph = config.channel_kernel[h]
    out = {}
    for b2, wb in zip(pb.support, pb.probs):
        if wb == 0.0:
            continue
        for e2, we in zip(pe.support, pe.probs):
            if we == 0.0:
                continue
            for h2 in np.flatnonzero(ph):
                out[StateIndex(int(b2), int(e2), int(h2))] = wb * we * ph[h2]
    return out


def post_decision(config: ModelConfig, s, a: int, f: int) -> StateIndex:
    """State after the transmission outcome and energy spend, before arrivals."""
    b, e, h = config.check_state(s)
    _check_action(config, b, e, a)
    if f not in (0, 1) or f > a:
        raise ContractError(f"goodput f={f!r} impossible under action a={a}")
    return StateIndex(b - f, e - a * config.tx_energy, h)

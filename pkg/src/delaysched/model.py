"""Domain types: channel model, problem configuration and policies.

Queue-length convention used throughout the package: a slot starts with the
queue length ``l`` carried over from the previous slot; the Bernoulli arrival
lands first, giving the *post-arrival* length ``q~ = l + b``; the transmit
decision then looks at ``(q~, s)`` where ``s`` is the channel of the current
slot. Policies are indexed by the post-arrival length.

Buffer overflow (an arrival while ``l == K``) has two closures:

``"transmit"``
    The arriving packet is sent immediately at the current channel's power
    (the post-arrival length ``K + 1`` always transmits). No packet is ever
    lost. This is the closure under which the occupancy-measure LP is exact,
    and it is the default for optimisation.
``"discard"``
    The arriving packet is dropped, ``l[n] = max(min(l[n-1] + b, K) - a, 0)``.
    This is the physical slotted model used by the simulator.

Both closures agree for every policy that keeps the queue below ``K``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    InvalidInput,
    NonPositivePower,
    NonStochasticRow,
    NotErgodic,
    PowersNotDecreasing,
)
from .markov import is_ergodic, stationary_distribution

OVERFLOW_MODES = ("transmit", "discard")

__all__ = [
    "OVERFLOW_MODES",
    "ChannelModel",
    "EvalResult",
    "JointDistribution",
    "PolicyTable",
    "ProblemConfig",
    "ThresholdPolicy",
    "effective_thresholds",
    "policy_to_thresholds",
    "threshold_to_policy",
    "validate_channel_model",
]


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChannelModel:
    """S-state Markov channel with per-state transmission powers.

    Build instances through :func:`validate_channel_model`; the constructor
    only copies and freezes the arrays.
    """

    transition: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "powers", _frozen(self.powers))

    @property
    def n_states(self) -> int:
        return self.powers.shape[0]

    @property
    def stationary(self) -> np.ndarray:
        rho = getattr(self, "_rho", None)
        if rho is None:
            rho = _frozen(stationary_distribution(self.transition))
            object.__setattr__(self, "_rho", rho)
        return rho

    def to_dict(self) -> dict:
        return {"transition": self.transition.tolist(), "powers": self.powers.tolist()}


def validate_channel_model(transition, powers) -> ChannelModel:
    """Check every structural invariant and return a :class:`ChannelModel`.

    Raises
    ------
    InvalidInput
        Shape mismatch.
    NonStochasticRow
        An entry outside ``[0, 1]`` or a row not summing to 1 within 1e-12.
    NotErgodic
        Positive-entry digraph not strongly connected or periodic.
    NonPositivePower, PowersNotDecreasing
        Powers must be positive and strictly decreasing in the state index.
    """
    P = np.asarray(transition, dtype=float)
    X = np.asarray(powers, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
        raise InvalidInput(f"transition matrix must be square and non-empty, got shape {P.shape}")
    if X.shape != (P.shape[0],):
        raise InvalidInput(f"expected {P.shape[0]} powers, got shape {X.shape}")
    if not np.all(np.isfinite(P)) or np.any(P < 0) or np.any(P > 1):
        raise NonStochasticRow("transition entries must lie in [0, 1]")
    bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > 1e-12)
    if bad.size:
        raise NonStochasticRow(f"row {int(bad[0])} sums to {P[bad[0]].sum()!r}")
    if not is_ergodic(P):
        raise NotErgodic("channel chain must be irreducible and aperiodic")
    if not np.all(np.isfinite(X)) or np.any(X <= 0):
        raise NonPositivePower("powers must be positive")
    if np.any(np.diff(X) >= 0):
        raise PowersNotDecreasing("powers must strictly decrease with the state index")
    return ChannelModel(P, X)


@dataclass(frozen=True)
class ProblemConfig:
    """Arrival rate, buffer, power budget and solver tolerances."""

    arrival_rate: float
    buffer_size: int
    power_budget: float
    discount: float = 0.999
    vi_tolerance: float = 1e-9
    bisection_tolerance: float = 1e-8
    lp_tolerance: float = 1e-9
    overflow: str = "transmit"
    max_sweeps: int = 10**6

    def __post_init__(self):
        if not 0.0 < self.arrival_rate < 1.0:
            raise InvalidInput("arrival_rate must lie strictly inside (0, 1)")
        if int(self.buffer_size) != self.buffer_size or self.buffer_size < 1:
            raise InvalidInput("buffer_size must be an integer >= 1")
        object.__setattr__(self, "buffer_size", int(self.buffer_size))
        if not self.power_budget > 0:
            raise InvalidInput("power_budget must be positive")
        if not 0.0 < self.discount < 1.0:
            raise InvalidInput("discount must lie strictly inside (0, 1)")
        for name in ("vi_tolerance", "bisection_tolerance", "lp_tolerance"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if self.overflow not in OVERFLOW_MODES:
            raise InvalidInput(f"overflow must be one of {OVERFLOW_MODES}")
        if self.max_sweeps < 1:
            raise InvalidInput("max_sweeps must be positive")

    def replace(self, **changes) -> "ProblemConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Randomised stationary policy.

    ``transmit_prob[q~, s]`` is the probability of sending a packet when the
    post-arrival queue length is ``q~`` (0..K) and the channel is ``s``.
    Under the ``"transmit"`` overflow closure the implicit row ``K + 1`` is 1.
    """

    transmit_prob: np.ndarray

    def __post_init__(self):
        f = np.array(self.transmit_prob, dtype=float)
        if f.ndim != 2 or f.shape[0] < 2:
            raise InvalidInput("transmit_prob must be a (K+1) x S matrix with K >= 1")
        if np.any(f < 0) or np.any(f > 1) or not np.all(np.isfinite(f)):
            raise InvalidInput("transmit probabilities must lie in [0, 1]")
        if np.any(f[0] != 0):
            raise InvalidInput("cannot transmit from an empty queue (row 0 must be 0)")
        object.__setattr__(self, "transmit_prob", _frozen(f))

    @property
    def buffer_size(self) -> int:
        return self.transmit_prob.shape[0] - 1

    @property
    def n_states(self) -> int:
        return self.transmit_prob.shape[1]

    def is_deterministic(self, tol: float = 0.0) -> bool:
        f = self.transmit_prob
        return bool(np.all((f <= tol) | (f >= 1 - tol)))


@dataclass(frozen=True, eq=False)
class ThresholdPolicy:
    """Per-state thresholds ``L_s`` in ``1..K+1``; ``K + 1`` means never transmit voluntarily."""

    thresholds: tuple
    buffer_size: int

    def __post_init__(self):
        L = tuple(int(x) for x in self.thresholds)
        if not L:
            raise InvalidInput("need at least one threshold")
        for x in L:
            if not 1 <= x <= self.buffer_size + 1:
                raise InvalidInput(f"threshold {x} outside 1..{self.buffer_size + 1}")
        object.__setattr__(self, "thresholds", L)

    def __eq__(self, other):
        if not isinstance(other, ThresholdPolicy):
            return NotImplemented
        return self.thresholds == other.thresholds and self.buffer_size == other.buffer_size

    def __hash__(self):
        return hash((self.thresholds, self.buffer_size))

    def __repr__(self):
        return f"ThresholdPolicy({list(self.thresholds)}, K={self.buffer_size})"


def threshold_to_policy(t: ThresholdPolicy, K: int | None = None) -> PolicyTable:
    """Expand thresholds into the 0/1 table ``f[q~, s] = [q~ >= L_s]``."""
    K = t.buffer_size if K is None else K
    if K != t.buffer_size:
        t = ThresholdPolicy(t.thresholds, K)
    q = np.arange(K + 1)[:, None]
    f = (q >= np.asarray(t.thresholds)[None, :]).astype(float)
    f[0] = 0.0
    return PolicyTable(f)


def policy_to_thresholds(policy: PolicyTable) -> ThresholdPolicy:
    """Inverse of :func:`threshold_to_policy`.

    Raises :class:`InvalidInput` unless every column is a nondecreasing
    0/1 step function.
    """
    f = policy.transmit_prob
    K = policy.buffer_size
    if not policy.is_deterministic():
        raise InvalidInput("policy is randomised")
    L = []
    for col in f.T:
        ones = np.flatnonzero(col == 1)
        first = int(ones[0]) if ones.size else K + 1
        if np.any(col[first:] != 1):
            raise InvalidInput("column is not a step function")
        L.append(first)
    return ThresholdPolicy(L, K)


def effective_thresholds(policy: PolicyTable, tol: float = 1e-9) -> tuple:
    """Smallest ``q~`` per state with transmit probability above ``tol``."""
    K = policy.buffer_size
    out = []
    for col in policy.transmit_prob.T:
        pos = np.flatnonzero(col > tol)
        out.append(int(pos[0]) if pos.size else K + 1)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Stationary ``mu[q, s]`` over (queue carried into a slot, channel of that slot)."""

    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu))

    @property
    def queue_marginal(self) -> np.ndarray:
        return self.mu.sum(axis=1)

    @property
    def channel_marginal(self) -> np.ndarray:
        return self.mu.sum(axis=0)


@dataclass(frozen=True)
class EvalResult:
    """Long-run averages: queue length (packets), per-packet delay (slots), power (energy/slot)."""

    avg_queue: float
    avg_delay: float
    avg_power: float
    throughput: float = field(default=float("nan"))

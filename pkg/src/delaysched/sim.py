"""Seeded slot-level simulation of the queue over the Markov channel.

Random numbers come from numpy's ``PCG64`` bit generator (PCG XSL RR 128/64)
seeded with the user's 64-bit seed. Draw order is part of the contract so
that runs are portable:

1. one uniform picks the initial channel from the stationary distribution;
2. slots are processed in chunks of ``CHUNK`` slots; for each chunk the
   generator yields, in this order, the arrival uniforms, the channel
   transition uniforms and the decision uniforms (one per slot each).

A slot runs: arrival ``b = [u_arr < theta]``; post-arrival length
``q~ = l + b`` (capped at ``K`` with a discard under ``"discard"``); decision
``a`` from the rule; departure of the head-of-line packet; channel move for
the next slot. Per-packet delay is departure slot minus arrival slot, so a
packet sent in its arrival slot has delay 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .evaluate import MixedPolicy
from .exceptions import InvalidInput
from .model import OVERFLOW_MODES, ChannelModel, PolicyTable, ThresholdPolicy, threshold_to_policy

__all__ = ["GreedyRule", "PolicyRule", "SimResult", "greedy_decision_rule", "simulate"]

CHUNK = 1 << 18
BATCHES = 100
CREDIT_SLACK = 1e-12


@dataclass(frozen=True)
class SimResult:
    """Outcome of one run. ``se_*`` are batch-means standard errors (NaN if unavailable)."""

    slots: int
    avg_queue: float
    avg_delay: float
    avg_power: float
    delivered: int
    discarded: int
    seed: int
    arrivals: int
    final_queue: int
    se_queue: float
    se_power: float
    se_delay: float

    @property
    def throughput(self) -> float:
        return self.delivered / self.slots


class PolicyRule:
    """Stationary randomised rule: transmit iff ``u < f[q~, s]``."""

    def __init__(self, policy):
        if isinstance(policy, ThresholdPolicy):
            policy = threshold_to_policy(policy)
        elif isinstance(policy, MixedPolicy):
            policy = policy.table()
        if not isinstance(policy, PolicyTable):
            raise InvalidInput("PolicyRule needs a PolicyTable, ThresholdPolicy or MixedPolicy")
        self.table = policy

    def reset(self):
        pass

    def __call__(self, q, s, u):
        f = self.table.transmit_prob
        if q >= f.shape[0]:
            return 1
        return 1 if u < f[q, s] else 0


class GreedyRule:
    """Token bucket: ``eps`` credit per slot capped at ``max X``; send when the credit covers ``X_s``."""

    def __init__(self, powers, eps: float):
        if not eps > 0:
            raise InvalidInput("power budget must be positive")
        self.powers = np.asarray(powers, dtype=float)
        self.eps = float(eps)
        self.cap = float(self.powers.max())
        self.credit = 0.0

    def reset(self):
        self.credit = 0.0

    def __call__(self, q, s, u):
        self.credit = min(self.credit + self.eps, self.cap)
        x = self.powers[s]
        if q >= 1 and self.credit >= x - CREDIT_SLACK:
            self.credit -= x
            return 1
        return 0

    def forced(self, s):
        # overflow send under the "transmit" closure; the bucket may go negative
        self.credit = min(self.credit + self.eps, self.cap) - self.powers[s]


def greedy_decision_rule(model: ChannelModel, eps: float) -> GreedyRule:
    return GreedyRule(model.powers, eps)


def _as_rule(decide):
    if isinstance(decide, (PolicyTable, ThresholdPolicy, MixedPolicy)):
        return PolicyRule(decide)
    if isinstance(decide, (PolicyRule, GreedyRule)) or callable(decide):
        return decide
    raise InvalidInput("decision rule must be a policy or a callable (q, s, u) -> 0/1")


# state vector layout shared by both engines
_L, _S, _HEAD, _CREDIT = 0, 1, 2, 3


def _python_chunk(rule, n0, u_arr, u_ch, u_dec, theta, K, transmit_mode, X, cumP,
                  state, fifo, acc, bq, be, bd, bc, n_total, n_batches):
    l, s, head, _ = state
    l, s, head = int(l), int(s), int(head)
    cap = fifo.shape[0]
    S = X.shape[0]
    for i in range(u_arr.shape[0]):
        n = n0 + i
        b = n * n_batches // n_total
        q = l
        if u_arr[i] < theta:
            acc[0] += 1
            if l < K or transmit_mode:
                fifo[(head + l) % cap] = n
                q = l + 1
            else:
                acc[1] += 1
        if q > K:
            a = 1
            forced = getattr(rule, "forced", None)
            if forced is not None:
                forced(s)
        else:
            a = 1 if rule(q, s, u_dec[i]) and q >= 1 else 0
        if a:
            d = n - fifo[head]
            head = (head + 1) % cap
            q -= 1
            acc[2] += 1
            acc[3] += d
            acc[4] += X[s]
            be[b] += X[s]
            bd[b] += d
            bc[b] += 1
        l = q
        acc[5] += l
        bq[b] += l
        nxt = 0
        while nxt < S - 1 and u_ch[i] >= cumP[s, nxt]:
            nxt += 1
        s = nxt
    state[_L], state[_S], state[_HEAD] = l, s, head


@numba.njit(cache=True)
def _fast_chunk(kind, f, eps, n0, u_arr, u_ch, u_dec, theta, K, transmit_mode, X, cumP,
                state, fifo, acc, bq, be, bd, bc, n_total, n_batches):
    l = int(state[0])
    s = int(state[1])
    head = int(state[2])
    credit = state[3]
    cap = fifo.shape[0]
    S = X.shape[0]
    xmax = X.max()
    for i in range(u_arr.shape[0]):
        n = n0 + i
        b = n * n_batches // n_total
        q = l
        if u_arr[i] < theta:
            acc[0] += 1
            if l < K or transmit_mode:
                fifo[(head + l) % cap] = n
                q = l + 1
            else:
                acc[1] += 1
        a = 0
        if q > K:
            a = 1
            if kind == 1:
                credit = min(credit + eps, xmax)
                credit -= X[s]
        elif kind == 0:
            if q >= 1 and u_dec[i] < f[q, s]:
                a = 1
        else:
            credit = min(credit + eps, xmax)
            if q >= 1 and credit >= X[s] - 1e-12:
                credit -= X[s]
                a = 1
        if a == 1:
            d = n - fifo[head]
            head = (head + 1) % cap
            q -= 1
            acc[2] += 1
            acc[3] += d
            acc[4] += X[s]
            be[b] += X[s]
            bd[b] += d
            bc[b] += 1
        l = q
        acc[5] += l
        bq[b] += l
        nxt = 0
        while nxt < S - 1 and u_ch[i] >= cumP[s, nxt]:
            nxt += 1
        s = nxt
    state[0] = l
    state[1] = s
    state[2] = head
    state[3] = credit


def _batch_se(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(values.size))


def simulate(
    model: ChannelModel,
    decide,
    theta: float,
    K: int,
    n_slots: int,
    seed: int,
    overflow: str = "discard",
    engine: str = "auto",
    batches: int = BATCHES,
) -> SimResult:
    """Run ``n_slots`` slots from an empty queue.

    ``decide`` is a :class:`PolicyTable`, :class:`ThresholdPolicy`,
    :class:`MixedPolicy`, :class:`GreedyRule` or any callable
    ``(q_tilde, s, u) -> 0/1`` where ``u`` is the slot's decision uniform.
    Objects with a ``reset()`` method are reset before the run.

    ``engine="auto"`` uses the compiled loop for policy tables and the
    greedy rule and the interpreted loop otherwise; ``"python"`` forces the
    interpreted loop, which yields bit-identical results.

    ``avg_delay`` is NaN when no packet was delivered.
    """
    n_slots = int(n_slots)
    if n_slots < 1:
        raise InvalidInput("need at least one slot")
    if not 0.0 < theta < 1.0:
        raise InvalidInput("arrival rate must lie strictly inside (0, 1)")
    if overflow not in OVERFLOW_MODES:
        raise InvalidInput(f"overflow must be one of {OVERFLOW_MODES}")
    if engine not in ("auto", "python"):
        raise InvalidInput("engine must be 'auto' or 'python'")
    rule = _as_rule(decide)
    if hasattr(rule, "reset"):
        rule.reset()
    if isinstance(rule, PolicyRule):
        f = rule.table.transmit_prob
        if f.shape != (K + 1, model.n_states):
            raise InvalidInput(f"policy shape {f.shape} does not match K={K}, S={model.n_states}")

    X = np.ascontiguousarray(model.powers, dtype=float)
    cumP = np.cumsum(model.transition, axis=1)
    transmit_mode = overflow == "transmit"
    seed = int(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    s0 = int(np.searchsorted(np.cumsum(model.stationary), rng.random(), side="right"))
    s0 = min(s0, model.n_states - 1)

    nb = max(1, min(int(batches), n_slots))
    state = np.array([0.0, s0, 0.0, 0.0])
    fifo = np.zeros(K + 2, dtype=np.int64)
    acc = np.zeros(6)  # arrivals, discards, delivered, delay sum, energy, queue sum
    bq, be, bd, bc = (np.zeros(nb) for _ in range(4))

    fast = engine == "auto" and isinstance(rule, (PolicyRule, GreedyRule))
    if fast:
        kind = 0 if isinstance(rule, PolicyRule) else 1
        f = np.ascontiguousarray(rule.table.transmit_prob) if kind == 0 else np.zeros((1, 1))
        eps = rule.eps if kind == 1 else 0.0
    for n0 in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - n0)
        u_arr = rng.random(m)
        u_ch = rng.random(m)
        u_dec = rng.random(m)
        if fast:
            _fast_chunk(kind, f, eps, n0, u_arr, u_ch, u_dec, float(theta), int(K), transmit_mode,
                        X, cumP, state, fifo, acc, bq, be, bd, bc, n_slots, nb)
        else:
            _python_chunk(rule, n0, u_arr, u_ch, u_dec, float(theta), int(K), transmit_mode,
                          X, cumP, state, fifo, acc, bq, be, bd, bc, n_slots, nb)
    if fast and kind == 1:
        rule.credit = float(state[_CREDIT])

    edges = -(-np.arange(nb + 1) * n_slots // nb)
    width = np.diff(edges).astype(float)
    arrivals, discarded, delivered = int(acc[0]), int(acc[1]), int(acc[2])
    with np.errstate(invalid="ignore", divide="ignore"):
        per_batch_delay = bd / bc
    return SimResult(
        slots=n_slots,
        avg_queue=float(acc[5] / n_slots),
        avg_delay=float(acc[3] / delivered) if delivered else float("nan"),
        avg_power=float(acc[4] / n_slots),
        delivered=delivered,
        discarded=discarded,
        seed=seed,
        arrivals=arrivals,
        final_queue=int(state[_L]),
        se_queue=_batch_se(bq / width),
        se_power=_batch_se(be / width),
        se_delay=_batch_se(per_batch_delay),
    )

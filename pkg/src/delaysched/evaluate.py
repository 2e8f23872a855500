"""Exact steady-state evaluation of stationary policies.

The closed-loop chain lives on pairs ``(l, s)``: the queue length carried
into a slot and the channel state of that slot. Flat indices follow the
column-major order ``s * (K + 1) + l``, the same order the LP uses for its
occupancy vector.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .exceptions import InfeasibleBudget, InvalidInput, NumericalFailure, ReducibleClosedLoop, TooLarge
from .markov import solve_balance
from .model import (
    OVERFLOW_MODES,
    ChannelModel,
    EvalResult,
    JointDistribution,
    PolicyTable,
    ProblemConfig,
    ThresholdPolicy,
    threshold_to_policy,
)

__all__ = [
    "ClosedLoopChain",
    "EnumerationResult",
    "MixedPolicy",
    "enumerate_thresholds",
    "exact_evaluate",
    "implied_occupancy",
    "policy_transition_matrix",
]

ENUMERATION_LIMIT = 10**5
MAX_SCAN_PAIRS = 20000


@dataclass(frozen=True, eq=False)
class MixedPolicy:
    """Per-slot randomisation between two threshold policies.

    ``lam`` is the weight of ``pi1``; the realised table is the entrywise
    mixture ``lam * table(pi1) + (1 - lam) * table(pi2)``.
    """

    pi1: ThresholdPolicy
    pi2: ThresholdPolicy
    lam: float

    def table(self) -> PolicyTable:
        return _mix(threshold_to_policy(self.pi1), threshold_to_policy(self.pi2), self.lam)


def _mix(a: PolicyTable, b: PolicyTable, lam: float) -> PolicyTable:
    f = lam * a.transmit_prob + (1.0 - lam) * b.transmit_prob
    return PolicyTable(np.clip(f, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class ClosedLoopChain:
    """Row-stochastic matrix over joint states plus per-state slot rewards.

    ``departure[i]`` is the probability a packet leaves during a slot that
    starts in state ``i``, ``energy[i]`` the expected energy spent, and
    ``loss[i]`` the probability an arrival is dropped.
    """

    transition: np.ndarray
    departure: np.ndarray
    energy: np.ndarray
    loss: np.ndarray
    buffer_size: int
    n_states: int


def _check_overflow(overflow: str):
    if overflow not in OVERFLOW_MODES:
        raise InvalidInput(f"overflow must be one of {OVERFLOW_MODES}")


def _kernels(P, X, f, theta, overflow):
    """Batched closed-loop pieces for tables ``f`` of shape (B, K+1, S)."""
    B, n, S = f.shape
    K = n - 1
    ft = np.transpose(f, (0, 2, 1))  # (B, S, n)
    Q = np.zeros((B, S, n, n))
    idx = np.arange(n)
    # no arrival: decide on l itself
    Q[:, :, idx[1:], idx[1:] - 1] += (1 - theta) * ft[:, :, 1:]
    Q[:, :, idx, idx] += (1 - theta) * (1 - ft)
    # arrival below the buffer limit: decide on l + 1
    Q[:, :, idx[:-1], idx[:-1]] += theta * ft[:, :, 1:]
    Q[:, :, idx[:-1], idx[1:]] += theta * (1 - ft[:, :, 1:])
    dep = (1 - theta) * ft.copy()
    dep[:, :, :-1] += theta * ft[:, :, 1:]
    loss = np.zeros((B, S, n))
    if overflow == "transmit":
        Q[:, :, K, K] += theta
        dep[:, :, K] += theta
    else:
        Q[:, :, K, K - 1] += theta * ft[:, :, K]
        Q[:, :, K, K] += theta * (1 - ft[:, :, K])
        dep[:, :, K] += theta * ft[:, :, K]
        loss[:, :, K] = theta
    T = np.einsum("st,bsqr->bsqtr", P, Q).reshape(B, S * n, S * n)
    energy = dep * X[None, :, None]
    return T, dep.reshape(B, -1), energy.reshape(B, -1), loss.reshape(B, -1)


def policy_transition_matrix(
    model: ChannelModel, policy: PolicyTable, theta: float, K: int | None = None, overflow: str = "discard"
) -> ClosedLoopChain:
    """Closed-loop chain of ``policy`` over ``(l, s)``.

    From ``(l, s)`` the arrival lands (probability ``theta``), the policy
    transmits with probability ``f[l + b, s]``, and the channel then moves
    to ``s'`` with probability ``P[s, s']``.
    """
    _check_overflow(overflow)
    K = policy.buffer_size if K is None else K
    if policy.transmit_prob.shape != (K + 1, model.n_states):
        raise InvalidInput("policy shape does not match (K+1) x S")
    T, dep, en, loss = _kernels(
        model.transition, model.powers, policy.transmit_prob[None], theta, overflow
    )
    return ClosedLoopChain(T[0], dep[0], en[0], loss[0], K, model.n_states)


def _stationary_on_reachable(T: np.ndarray, starts) -> np.ndarray:
    G = csr_matrix(T > 0)
    reach = np.zeros(T.shape[0], dtype=bool)
    for s0 in starts:
        reach[breadth_first_order(G, s0, return_predecessors=False)] = True
    sub = np.flatnonzero(reach)
    Ts = T[np.ix_(sub, sub)]
    ncomp, labels = connected_components(csr_matrix(Ts > 0), directed=True, connection="strong")
    closed = []
    for c in range(ncomp):
        members = labels == c
        if not (Ts[members][:, ~members] > 0).any():
            closed.append(members)
    if len(closed) != 1:
        raise ReducibleClosedLoop(f"closed-loop chain has {len(closed)} recurrent classes")
    cls = sub[closed[0]]
    pi_c = solve_balance(T[np.ix_(cls, cls)])
    pi = np.zeros(T.shape[0])
    pi[cls] = pi_c
    return pi


def _clean(pi: np.ndarray, T: np.ndarray) -> np.ndarray:
    if pi.min() < -1e-9:
        raise NumericalFailure(f"stationary vector has entry {pi.min():.3e}")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.max(np.abs(pi @ T - pi)) > 1e-11:
        raise NumericalFailure("stationary residual exceeds 1e-11")
    return pi


def _metrics(pi, dep, energy, loss, K, S, theta):
    mu = pi.reshape(S, K + 1).T
    avg_queue = float(mu.sum(axis=1) @ np.arange(K + 1))
    power = float(pi @ energy)
    throughput = float(pi @ dep)
    theta_eff = theta - float(pi @ loss)
    delay = avg_queue / theta_eff if theta_eff > 1e-15 else float("inf")
    return EvalResult(avg_queue, delay, power, throughput), mu


def exact_evaluate(
    model: ChannelModel, policy: PolicyTable, theta: float, K: int | None = None, overflow: str = "discard"
) -> tuple[EvalResult, JointDistribution]:
    """Exact long-run queue length, per-packet delay and power of ``policy``.

    The stationary distribution is computed on the states reachable from an
    empty queue. Per-packet delay uses Little's law with the delivered
    throughput ``theta * (1 - P{arrival finds a full buffer})`` under the
    ``"discard"`` closure and ``theta`` under ``"transmit"``.

    Returns
    -------
    result : EvalResult
    dist : JointDistribution
        ``mu[l, s]``, zero on unreachable states.
    """
    chain = policy_transition_matrix(model, policy, theta, K, overflow)
    K, S = chain.buffer_size, chain.n_states
    starts = [s * (K + 1) for s in range(S)]
    pi = _clean(_stationary_on_reachable(chain.transition, starts), chain.transition)
    result, mu = _metrics(pi, chain.departure, chain.energy, chain.loss, K, S, theta)
    return result, JointDistribution(mu)


def _batch_evaluate(model: ChannelModel, f: np.ndarray, theta: float, overflow: str):
    """Power, delay and queue for a stack of tables sharing one recurrent class each.

    Uses the full-state balance solve; tables for which it is singular fall
    back to :func:`exact_evaluate`.
    """
    B, n, S = f.shape
    K = n - 1
    T, dep, en, loss = _kernels(model.transition, model.powers, f, theta, overflow)
    N = S * n
    A = np.transpose(T, (0, 2, 1)) - np.eye(N)[None]
    A[:, -1, :] = 1.0
    b = np.zeros(N)
    b[-1] = 1.0
    power = np.empty(B)
    delay = np.empty(B)
    queue = np.empty(B)
    qidx = np.tile(np.arange(n), S)
    with np.errstate(all="ignore"):
        pis = np.linalg.solve(A, np.broadcast_to(b, (B, N))[..., None])[..., 0]
    resid = np.abs(np.einsum("bi,bij->bj", pis, T) - pis).max(axis=1)
    for i in range(B):
        pi = pis[i]
        if not np.all(np.isfinite(pi)) or pi.min() < -1e-9 or resid[i] > 1e-11:
            r, _ = exact_evaluate(model, PolicyTable(f[i]), theta, K, overflow)
            power[i], delay[i], queue[i] = r.avg_power, r.avg_delay, r.avg_queue
            continue
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
        queue[i] = pi @ qidx
        power[i] = pi @ en[i]
        theta_eff = theta - pi @ loss[i]
        delay[i] = queue[i] / theta_eff if theta_eff > 1e-15 else np.inf
    return power, delay, queue


def implied_occupancy(
    model: ChannelModel, policy: PolicyTable, theta: float, mu, overflow: str = "discard"
) -> np.ndarray:
    """Transmit occupancies ``y[q, s]`` implied by a policy and its ``mu``.

    ``y[q, s]`` is the stationary probability that a slot in channel ``s``
    ends with queue length ``q`` right after a packet left. Row ``K`` holds
    the overflow mass ``theta * mu[K, s]``: forced transmissions under
    ``"transmit"``, dropped arrivals under ``"discard"``.
    """
    _check_overflow(overflow)
    mu = np.asarray(getattr(mu, "mu", mu), dtype=float)
    f = policy.transmit_prob
    K = policy.buffer_size
    y = np.zeros_like(mu)
    y[:K] = (1 - theta) * mu[1:] * f[1:] + theta * mu[:K] * f[1:]
    if overflow == "discard":
        y[K - 1] += theta * mu[K] * f[K]
    y[K] = theta * mu[K]
    return y


@dataclass(frozen=True, eq=False)
class EnumerationResult:
    """Brute-force optimum plus the (power, delay) of every threshold policy."""

    best_delay: float
    best: MixedPolicy
    best_power: float
    policies: tuple
    powers: np.ndarray
    delays: np.ndarray

    def __iter__(self):
        return iter((self.best_delay, self.best))


def _bisect_mixture(model, fa, fb, theta, overflow, eps, lo, hi, tol, max_iter=200):
    """Largest-power feasible weight of ``fa`` in ``[lo, hi]``; power decreases in the weight."""
    K = fa.shape[0] - 1
    r_hi = None
    for _ in range(max_iter):
        if hi - lo <= 1e-15:
            break
        mid = 0.5 * (lo + hi)
        r, _ = exact_evaluate(model, PolicyTable(mid * fa + (1 - mid) * fb), theta, K, overflow)
        if r.avg_power <= eps:
            hi, r_hi = mid, r
            if eps - r.avg_power <= tol:
                break
        else:
            lo = mid
    if r_hi is None:
        r_hi, _ = exact_evaluate(model, PolicyTable(hi * fa + (1 - hi) * fb), theta, K, overflow)
    return hi, r_hi


def enumerate_thresholds(
    model: ChannelModel, config: ProblemConfig, lambda_grid: int = 8, refine: int = 12
) -> EnumerationResult:
    """Brute-force optimum over mixtures of two threshold policies.

    Every threshold vector in ``{1..K+1}^S`` is evaluated exactly. Each
    ordered pair whose powers straddle the budget is scanned on a uniform
    grid of ``lambda_grid`` weights; the ``refine`` most promising pairs
    are then bisected on the weight until the exact power meets the budget.
    Above ``MAX_SCAN_PAIRS`` straddling pairs only those with the lowest
    endpoint-chord delay at the budget are scanned.

    Raises
    ------
    TooLarge
        ``(K+1)^S`` exceeds 10^5.
    InfeasibleBudget
        No threshold policy fits the budget.
    """
    K, S = config.buffer_size, model.n_states
    theta, eps, ov = config.arrival_rate, config.power_budget, config.overflow
    if (K + 1) ** S > ENUMERATION_LIMIT:
        raise TooLarge(f"(K+1)^S = {(K + 1) ** S} exceeds {ENUMERATION_LIMIT}")
    policies = [ThresholdPolicy(L, K) for L in itertools.product(range(1, K + 2), repeat=S)]
    tables = np.stack([threshold_to_policy(p).transmit_prob for p in policies])
    powers, delays, _ = _batch_evaluate(model, tables, theta, ov)
    tol = config.bisection_tolerance
    feasible = np.flatnonzero(powers <= eps + tol)
    if feasible.size == 0:
        raise InfeasibleBudget(f"cheapest threshold policy needs power {powers.min():.6g} > {eps:.6g}")
    i0 = feasible[np.argmin(delays[feasible])]
    best = (delays[i0], MixedPolicy(policies[i0], policies[i0], 1.0), powers[i0])

    hi = np.flatnonzero(powers <= eps)
    lo = np.flatnonzero(powers > eps)
    if hi.size and lo.size:
        pairs = np.stack(np.meshgrid(hi, lo, indexing="ij"), axis=-1).reshape(-1, 2)
        if len(pairs) > MAX_SCAN_PAIRS:
            # keep the pairs whose endpoint chord is lowest at the budget
            pa, pb = powers[pairs[:, 0]], powers[pairs[:, 1]]
            w = (pb - eps) / (pb - pa)
            chord = delays[pairs[:, 1]] + w * (delays[pairs[:, 0]] - delays[pairs[:, 1]])
            pairs = pairs[np.argsort(chord, kind="stable")[:MAX_SCAN_PAIRS]]
        if pairs.size:
            candidates = _scan_pairs(model, tables, pairs, powers, delays, theta, ov, eps, lambda_grid)
            for est, i, j, a, b in sorted(candidates)[:refine]:
                lam, r = _bisect_mixture(model, tables[i], tables[j], theta, ov, eps, a, b, tol)
                if r.avg_power <= eps + tol and r.avg_delay < best[0]:
                    best = (r.avg_delay, MixedPolicy(policies[i], policies[j], lam), r.avg_power)
    return EnumerationResult(float(best[0]), best[1], float(best[2]), tuple(policies), powers, delays)


def _scan_pairs(model, tables, pairs, powers, delays, theta, overflow, eps, grid, chunk=4096):
    lams = np.linspace(0.0, 1.0, grid + 1)[1:-1]
    out = []
    for start in range(0, len(pairs), chunk):
        pc = pairs[start:start + chunk]
        fa, fb = tables[pc[:, 0]], tables[pc[:, 1]]
        mixed = lams[None, :, None, None] * fa[:, None] + (1 - lams[None, :, None, None]) * fb[:, None]
        n = mixed.shape[0]
        p, d, _ = _batch_evaluate(model, mixed.reshape(-1, *tables.shape[1:]), theta, overflow)
        p = np.concatenate([powers[pc[:, 1]][:, None], p.reshape(n, -1), powers[pc[:, 0]][:, None]], axis=1)
        d = np.concatenate([delays[pc[:, 1]][:, None], d.reshape(n, -1), delays[pc[:, 0]][:, None]], axis=1)
        grid_l = np.concatenate([[0.0], lams, [1.0]])
        for k in range(n):
            ok = np.flatnonzero(p[k] <= eps)
            m = ok[0]
            if m == 0:
                continue
            # linear interpolation of delay at the budget crossing
            w = (p[k, m - 1] - eps) / (p[k, m - 1] - p[k, m])
            est = d[k, m - 1] + w * (d[k, m] - d[k, m - 1])
            out.append((float(est), int(pc[k, 0]), int(pc[k, 1]), float(grid_l[m - 1]), float(grid_l[m])))
    return out

"""Lagrangian route: discounted value iteration, threshold extraction,
multiplier calibration and two-policy mixing.

Value iteration runs on the post-arrival state ``(q~, s)``. With the
``"transmit"`` overflow closure the state space includes ``q~ = K + 1``,
where transmitting is forced; with ``"discard"`` it stops at ``K``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluate import MixedPolicy, _mix, exact_evaluate
from .exceptions import BracketViolation, InfeasibleBudget, NoConvergence, StructureViolation
from .model import (
    ChannelModel,
    EvalResult,
    JointDistribution,
    PolicyTable,
    ProblemConfig,
    ThresholdPolicy,
    threshold_to_policy,
)

__all__ = [
    "MdpSolution",
    "MixedPolicy",
    "ValueFunction",
    "calibrate_eta",
    "extract_thresholds",
    "mix_policies",
    "solve",
    "value_iteration",
]

ETA_CAP = 1e9
ETA_RTOL = 1e-12
STRUCTURE_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Discounted Lagrangian value ``V[q~, s]`` and its first differences in ``q~``."""

    values: np.ndarray
    diffs: np.ndarray
    relative: np.ndarray
    eta: float
    alpha: float
    sweeps: int
    residual: float
    scale: float
    overflow: str


def _cost_scale(model: ChannelModel, K: int, eta: float) -> float:
    return max(1.0, K + 1 + eta * float(model.powers.max()))


def _q_values(V, model, theta, K, eta, alpha, overflow):
    """Action values without the constant ``-eta * eps`` shift.

    Returns ``(Q0, Q1)`` of shape (m, S); entries of infeasible actions are +inf.
    """
    P, X = model.transition, model.powers
    m = V.shape[0]
    up = np.arange(1, K + 2) if overflow == "transmit" else np.minimum(np.arange(1, K + 2), K)
    M = theta * V[up] + (1 - theta) * V[: K + 1]
    EV = M @ P.T  # EV[q', s] = sum_s' P[s, s'] E V(q' + b, s')
    qt = np.arange(m)[:, None]
    Q0 = np.full_like(V, np.inf)
    Q1 = np.full_like(V, np.inf)
    Q0[: K + 1] = qt[: K + 1] + alpha * EV
    Q1[1:] = (qt[1:] - 1) + eta * X[None, :] + alpha * EV[: m - 1]
    return Q0, Q1


def value_iteration(
    model: ChannelModel,
    config: ProblemConfig,
    eta: float,
    initial: np.ndarray | None = None,
    check_structure: bool = True,
) -> ValueFunction:
    """Fixed point of the discounted Bellman operator for the Lagrangian cost.

    Per-slot cost is ``(q~ - a) + eta * X_s * a``; the constant ``-eta * eps``
    only shifts values and is added back at the end. The iterate is kept as
    ``w + c`` with ``w[0, 0] = 0`` so the constant mode, which contracts only
    at rate ``alpha``, is carried analytically. Iteration stops when the
    Bellman residual ``max |T V - V|`` drops to
    ``vi_tolerance * (1 - alpha) / (2 alpha)`` times the per-slot cost scale
    ``max(1, K + 1 + eta * max X)``.

    After convergence the value differences must be nonnegative and
    nondecreasing in ``q~`` for every channel state. ``check_structure=False``
    skips that assertion; this is only meant for the ``"discard"`` closure,
    where dropped arrivals flatten the value near a full buffer and the
    property can fail at large ``eta``.

    Raises
    ------
    NoConvergence
        ``config.max_sweeps`` exceeded.
    StructureViolation
        Value differences not monotone.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    K, theta, alpha, ov = config.buffer_size, config.arrival_rate, config.discount, config.overflow
    m = K + 2 if ov == "transmit" else K + 1
    scale = _cost_scale(model, K, eta)
    thr = config.vi_tolerance * (1 - alpha) / (2 * alpha) * scale
    w = np.zeros((m, model.n_states)) if initial is None else np.array(initial, dtype=float)
    w = w - w[0, 0]
    c_prev = None
    resid = np.inf
    for sweep in range(1, config.max_sweeps + 1):
        Q0, Q1 = _q_values(w, model, theta, K, eta, alpha, ov)
        Tw = np.minimum(Q0, Q1)
        r = Tw[0, 0]
        if c_prev is not None:
            # Bellman residual of V = w + c_prev / (1 - alpha)
            resid = float(np.max(np.abs(Tw - w - c_prev)))
            if resid <= thr:
                break
        w = Tw - r
        c_prev = r
    else:
        raise NoConvergence(f"value iteration did not converge in {config.max_sweeps} sweeps")
    values = w + c_prev / (1 - alpha) - eta * config.power_budget / (1 - alpha)
    diffs = np.diff(w, axis=0)
    tol = STRUCTURE_RTOL * scale
    if check_structure and (diffs.min() < -tol or np.diff(diffs, axis=0).min(initial=0.0) < -tol):
        raise StructureViolation(f"value differences not monotone (eta={eta:.6g})")
    return ValueFunction(values, diffs, w, float(eta), alpha, sweep, resid, scale, ov)


def action_gap(vf: ValueFunction, model: ChannelModel, config: ProblemConfig) -> np.ndarray:
    """Transmit-minus-idle action value for ``q~ = 1..K`` (shape K x S)."""
    K = config.buffer_size
    Q0, Q1 = _q_values(vf.relative, model, config.arrival_rate, K, vf.eta, vf.alpha, vf.overflow)
    return Q1[1 : K + 1] - Q0[1 : K + 1]


def extract_thresholds(
    vf: ValueFunction, model: ChannelModel, config: ProblemConfig, check_structure: bool = True
) -> ThresholdPolicy:
    """Greedy thresholds: ``L_s`` is the smallest ``q~ >= 1`` where transmitting
    is no worse than idling, ``K + 1`` if none.

    Raises
    ------
    StructureViolation
        The greedy action is not monotone in ``q~`` for some state.
    """
    K = config.buffer_size
    gap = action_gap(vf, model, config)
    tol = STRUCTURE_RTOL * vf.scale
    L = []
    for s in range(model.n_states):
        send = np.flatnonzero(gap[:, s] <= 0)
        first = int(send[0]) + 1 if send.size else K + 1
        if check_structure and np.any(gap[first - 1 :, s] > tol):
            raise StructureViolation(f"greedy action not monotone in queue length for state {s}")
        L.append(first)
    return ThresholdPolicy(L, K)


class _Oracle:
    """Memoised eta -> (thresholds, exact evaluation) with VI warm starts."""

    def __init__(self, model, config):
        self.model, self.config = model, config
        self.cache = {}
        self.evals = {}
        self.last_w = None
        self.runs = []

    def policy(self, eta):
        if eta not in self.cache:
            vf = value_iteration(self.model, self.config, eta, self.last_w)
            self.last_w = vf.relative
            self.runs.append(vf)
            self.cache[eta] = extract_thresholds(vf, self.model, self.config)
        return self.cache[eta]

    def evaluate(self, pi):
        if pi not in self.evals:
            c = self.config
            self.evals[pi] = exact_evaluate(
                self.model, threshold_to_policy(pi), c.arrival_rate, c.buffer_size, c.overflow
            )[0]
        return self.evals[pi]


def calibrate_eta(model: ChannelModel, config: ProblemConfig, _oracle: _Oracle | None = None):
    """Bisect the power price until the greedy policy's exact power crosses the budget.

    Returns
    -------
    eta : float
        Upper end of the collapsed bracket, i.e. the price at which the
        greedy policy switches to ``pi_hi``.
    pi_hi : ThresholdPolicy
        Policy with power at most the budget.
    pi_lo : ThresholdPolicy
        Policy with power above the budget and lower delay (equal to
        ``pi_hi`` when the budget is met exactly or is slack).

    Raises
    ------
    InfeasibleBudget
        Even the power-minimising price ``eta = 1e9`` overspends the budget.
    """
    orc = _oracle or _Oracle(model, config)
    eps, tol = config.power_budget, config.bisection_tolerance
    p0 = orc.policy(0.0)
    if orc.evaluate(p0).avg_power <= eps + tol:
        return 0.0, p0, p0
    lo, hi = 0.0, 1.0
    while orc.evaluate(orc.policy(hi)).avg_power > eps + tol:
        lo, hi = hi, 2.0 * hi
        if hi > ETA_CAP:
            cheapest = orc.evaluate(orc.policy(lo)).avg_power
            raise InfeasibleBudget(f"cheapest greedy policy needs power {cheapest:.6g} > {eps:.6g}")
    while True:
        p_lo, p_hi = orc.policy(lo), orc.policy(hi)
        r_lo, r_hi = orc.evaluate(p_lo), orc.evaluate(p_hi)
        if abs(r_hi.avg_power - eps) <= tol:
            return hi, p_hi, p_hi
        if hi - lo <= ETA_RTOL * max(1.0, hi):
            return hi, p_hi, p_lo
        mid = 0.5 * (lo + hi)
        if orc.evaluate(orc.policy(mid)).avg_power <= eps + tol:
            hi = mid
        else:
            lo = mid


def mix_policies(
    pi_hi: ThresholdPolicy, pi_lo: ThresholdPolicy, model: ChannelModel, config: ProblemConfig
) -> MixedPolicy:
    """Weight on ``pi_hi`` that spends exactly the budget.

    Bisection on the exact power of the entrywise mixture; power is
    checked to be monotone in the weight along the way.

    Raises
    ------
    BracketViolation
        The endpoints do not straddle the budget or power is not monotone.
    """
    if pi_hi == pi_lo:
        return MixedPolicy(pi_hi, pi_lo, 1.0)
    eps, tol = config.power_budget, config.bisection_tolerance
    a, b = threshold_to_policy(pi_hi), threshold_to_policy(pi_lo)

    def power(lam):
        return exact_evaluate(
            model, _mix(a, b, lam), config.arrival_rate, config.buffer_size, config.overflow
        )[0].avg_power

    p1, p0 = power(1.0), power(0.0)
    if not p1 <= eps + tol or not p0 >= eps - tol:
        raise BracketViolation(f"powers {p1:.6g} (pi_hi) and {p0:.6g} (pi_lo) do not straddle {eps:.6g}")
    lo, hi = 0.0, 1.0  # power(lo) > eps >= power(hi)
    plo, phi = p0, p1
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        pm = power(mid)
        if pm > plo + tol or pm < phi - tol:
            raise BracketViolation("mixture power is not monotone in the weight")
        if abs(pm - eps) <= tol:
            return MixedPolicy(pi_hi, pi_lo, mid)
        if pm > eps:
            lo, plo = mid, pm
        else:
            hi, phi = mid, pm
    return MixedPolicy(pi_hi, pi_lo, hi)


@dataclass(frozen=True, eq=False)
class MdpSolution:
    eta: float
    mixture: MixedPolicy
    table: PolicyTable
    result: EvalResult
    dist: JointDistribution
    value_functions: tuple = ()


def solve(model: ChannelModel, config: ProblemConfig) -> MdpSolution:
    """Calibrate, mix and evaluate: the complete Lagrangian route."""
    orc = _Oracle(model, config)
    eta, pi_hi, pi_lo = calibrate_eta(model, config, orc)
    mix = mix_policies(pi_hi, pi_lo, model, config)
    table = mix.table()
    res, dist = exact_evaluate(model, table, config.arrival_rate, config.buffer_size, config.overflow)
    return MdpSolution(eta, mix, table, res, dist, tuple(orc.runs))

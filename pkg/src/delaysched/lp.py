"""Occupancy-measure linear program for the delay-optimal policy.

Decision variables are the transmit occupancies ``y[q, s]``: the stationary
probability that a slot in channel ``s`` ends with ``q`` packets queued
right after a packet was sent. The joint distribution ``mu`` of (queue
carried into a slot, channel of the slot) is a linear image ``mu = G y`` of
these variables, obtained from the tail-probability balance

    sum_s P[s, s'] * (theta * mu[q, s] + T_q[s] - y[q, s]) = T_q[s'],
    T_q[s] = sum_{i > q} mu[i, s].

Vectors over (q, s) are flattened column-major: index ``s * (K + 1) + q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .exceptions import NumericalFailure, SingularTransition
from .model import ChannelModel, JointDistribution, PolicyTable, ProblemConfig

__all__ = [
    "LpProblem",
    "LpSolution",
    "MuMap",
    "assemble_lp",
    "build_mu_map",
    "extract_policy",
    "minimum_power",
    "solve",
    "solve_lp",
]

OPTIMAL, INFEASIBLE, UNBOUNDED = "Optimal", "Infeasible", "Unbounded"


def _flat(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).reshape(-1, order="F")


def _unflat(v: np.ndarray, K: int, S: int) -> np.ndarray:
    return np.asarray(v).reshape((K + 1, S), order="F")


@dataclass(frozen=True, eq=False)
class MuMap:
    """Linear map ``mu = G y`` on column-major flattened (K+1) x S arrays."""

    g: np.ndarray
    buffer_size: int
    n_states: int
    method: str = "recursion"

    def apply(self, y) -> np.ndarray:
        """Map a (K+1) x S occupancy array to the (K+1) x S joint distribution."""
        return _unflat(self.g @ _flat(y), self.buffer_size, self.n_states)


def _balance_system(P: np.ndarray, theta: float, K: int):
    """Rows ``A mu = B y`` of the tail balance for every (q, s'), plus the
    per-level flux identity ``theta * sum_s mu[q, s] = sum_s y[q, s]``."""
    S = P.shape[0]
    n = K + 1
    N = n * S
    A = np.zeros((N + n, N))
    B = np.zeros((N + n, N))
    for q in range(n):
        for sp in range(S):
            r = sp * n + q
            for s in range(S):
                A[r, s * n + q] += P[s, sp] * theta
                B[r, s * n + q] += P[s, sp]
                for i in range(q + 1, n):
                    A[r, s * n + i] += P[s, sp]
            for i in range(q + 1, n):
                A[r, sp * n + i] -= 1.0
        for s in range(S):
            A[N + q, s * n + q] = theta
            B[N + q, s * n + q] = 1.0
    return A, B


def build_mu_map(model: ChannelModel, theta: float, K: int) -> MuMap:
    """Derive ``G`` with ``mu = G y`` from the balance equations.

    Descending from ``T_K = 0``, each level solves
    ``P^T theta mu_q = (I - P^T) T_q + P^T y_q`` and sets
    ``T_{q-1} = T_q + mu_q``. The recursion is linear in ``y``, so all
    columns of ``G`` are propagated at once. When ``P^T`` is numerically
    singular the full balance system is solved by least squares instead.

    Raises
    ------
    SingularTransition
        ``P`` is singular and the full balance system is rank deficient.
    """
    P = model.transition
    S = model.n_states
    n = K + 1
    N = n * S
    if np.linalg.cond(P) < 1e10:
        # theta mu_q = (P^-T - I) T_q + y_q
        A = np.linalg.solve(P.T, np.eye(S) - P.T)
        Y = np.eye(N).reshape(S, n, N).transpose(1, 0, 2)  # [q, s, column]
        G = np.zeros((n, S, N))
        tail = np.zeros((S, N))
        for q in range(K, -1, -1):
            G[q] = (A @ tail + Y[q]) / theta
            tail += G[q]
        g = G.transpose(1, 0, 2).reshape(N, N)
        return MuMap(g, K, S, "recursion")
    A, B = _balance_system(P, theta, K)
    if np.linalg.matrix_rank(A) < N:
        raise SingularTransition("P is singular and the balance equations do not determine mu")
    g, *_ = np.linalg.lstsq(A, B, rcond=None)
    return MuMap(g, K, S, "least-squares")


@dataclass(frozen=True, eq=False)
class LpProblem:
    """``min c.z`` s.t. ``row_lower <= A z <= row_upper``, ``var_lower <= z <= var_upper``.

    ``z`` starts with the ``N = (K+1) S`` occupancies ``y``. In the
    ``"balance"`` form it continues with ``N`` entries of ``mu`` tied to ``y``
    by the balance equations; in the ``"substituted"`` form ``mu = G y`` is
    folded into the rows and ``z = y``.
    """

    c: np.ndarray
    A: np.ndarray
    row_lower: np.ndarray
    row_upper: np.ndarray
    var_lower: np.ndarray
    var_upper: np.ndarray
    row_kind: tuple
    form: str
    theta: float
    powers: np.ndarray
    budget: float
    buffer_size: int
    n_states: int
    gmap: MuMap | None = None

    @property
    def n_occupancy(self) -> int:
        return (self.buffer_size + 1) * self.n_states

    def count(self, kind: str) -> int:
        return sum(k == kind for k in self.row_kind)


def assemble_lp(
    model: ChannelModel, config: ProblemConfig, gmap: MuMap | None = None, form: str = "balance"
) -> LpProblem:
    """Build the occupancy LP.

    Rows, in order: ``power`` (energy per slot at most the budget), ``mass``
    (occupancies sum to the arrival rate), ``channel`` (mu marginal equals
    the channel's stationary law, one row per state), ``coupling`` (a
    transmit occupancy cannot exceed the mass that could have transmitted:
    ``y[q, s] <= (1 - theta) mu[q+1, s] + theta mu[q, s]`` and
    ``y[K, s] <= theta mu[K, s]``) and, in the substituted form, ``box``
    (``0 <= G y <= 1``). The balance form instead appends one ``balance``
    row per (q, s) and boxes ``mu`` through variable bounds.

    The substituted form needs ``gmap``; its coefficients grow like
    ``cond(P)^K`` so it is only usable for small buffers.
    """
    if form not in ("balance", "substituted"):
        raise ValueError("form must be 'balance' or 'substituted'")
    theta, K, eps = config.arrival_rate, config.buffer_size, config.power_budget
    S = model.n_states
    n = K + 1
    N = n * S
    X = np.repeat(model.powers, n)
    rho = model.stationary
    q_of = np.tile(np.arange(n), S)
    if form == "substituted":
        if gmap is None:
            gmap = build_mu_map(model, theta, K)
        Mu = gmap.g  # mu = Mu @ z
        nz = N
    else:
        Mu = np.hstack([np.zeros((N, N)), np.eye(N)])
        nz = 2 * N
    Yz = np.eye(N, nz)  # y = Yz @ z

    rows, lo, hi, kind = [], [], [], []

    def add(r, a, b, k):
        rows.append(r)
        lo.append(a)
        hi.append(b)
        kind.append(k)

    add(X @ Yz, -np.inf, eps, "power")
    add(np.ones(N) @ Yz, theta, theta, "mass")
    for s in range(S):
        add(Mu[s * n:(s + 1) * n].sum(axis=0), rho[s], rho[s], "channel")
    for s in range(S):
        for q in range(n):
            i = s * n + q
            r = Yz[i] - theta * Mu[i]
            if q < K:
                r = r - (1 - theta) * Mu[i + 1]
            add(r, -np.inf, 0.0, "coupling")
    if form == "substituted":
        for i in range(N):
            add(Mu[i], 0.0, 1.0, "box")
    else:
        A_bal, B_bal = _balance_system(model.transition, theta, K)
        for i in range(N):
            add(np.concatenate([-B_bal[i], A_bal[i]]), 0.0, 0.0, "balance")
    c = np.zeros(nz)
    c[:N] = q_of / theta**2
    return LpProblem(
        c=c,
        A=np.array(rows),
        row_lower=np.array(lo),
        row_upper=np.array(hi),
        var_lower=np.zeros(nz),
        var_upper=np.ones(nz),
        row_kind=tuple(kind),
        form=form,
        theta=theta,
        powers=model.powers.copy(),
        budget=eps,
        buffer_size=K,
        n_states=S,
        gmap=gmap,
    )


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Solved LP. ``y`` and ``mu`` are (K+1) x S arrays; delay is per packet in slots."""

    status: str
    y: np.ndarray | None = None
    mu: JointDistribution | None = None
    objective_delay: float = float("nan")
    avg_queue: float = float("nan")
    achieved_power: float = float("nan")
    duality_gap: float = float("nan")
    max_violation: float = float("nan")
    min_power: float = float("nan")
    theta: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _split(problem: LpProblem, rows=None):
    A, lo, hi = problem.A, problem.row_lower, problem.row_upper
    if rows is not None:
        A, lo, hi = A[rows], lo[rows], hi[rows]
    eq = lo == hi
    ub_hi = ~eq & np.isfinite(hi)
    ub_lo = ~eq & np.isfinite(lo)
    A_ub = np.vstack([A[ub_hi], -A[ub_lo]])
    b_ub = np.concatenate([hi[ub_hi], -lo[ub_lo]])
    return A_ub, b_ub, A[eq], hi[eq]


def _highs(c, problem, tol, rows=None):
    A_ub, b_ub, A_eq, b_eq = _split(problem, rows)
    opts = {"primal_feasibility_tolerance": max(tol, 1e-10), "dual_feasibility_tolerance": max(tol, 1e-10)}
    return linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=np.column_stack([problem.var_lower, problem.var_upper]),
        method="highs-ds",
        options=opts,
    ), b_ub, b_eq


def _duality_gap(res, c, b_ub, b_eq, problem) -> float:
    dual = b_ub @ res.ineqlin.marginals + b_eq @ res.eqlin.marginals
    dual += problem.var_lower @ res.lower.marginals + problem.var_upper @ res.upper.marginals
    return abs(float(c @ res.x) - float(dual))


def solve_lp(problem: LpProblem, tol: float = 1e-9) -> LpSolution:
    """Solve with the HiGHS dual simplex and certify the answer.

    Optimal solutions carry the primal-dual gap and the largest constraint
    violation after cleanup. Infeasible problems are certified by solving
    the power-minimisation LP over the remaining constraints: its optimum
    ``min_power`` exceeds the budget.

    Raises
    ------
    NumericalFailure
        Solver error, unboundedness (impossible for boxed variables), a
        negative occupancy or ``mu`` entry larger than ``tol`` in magnitude,
        or a failed certificate.
    """
    theta = problem.theta
    K, S, N = problem.buffer_size, problem.n_states, problem.n_occupancy
    res, b_ub, b_eq = _highs(problem.c, problem, tol)
    if res.status == 2:
        keep = np.array([k != "power" for k in problem.row_kind])
        c_pow = problem.A[np.array(problem.row_kind) == "power"][0]
        r2, _, _ = _highs(c_pow, problem, tol, rows=keep)
        if r2.status != 0:
            raise NumericalFailure(f"infeasibility certificate failed: {r2.message}")
        if r2.fun <= problem.budget + tol:
            raise NumericalFailure("solver reported infeasible but the budget is attainable")
        return LpSolution(INFEASIBLE, min_power=float(r2.fun), theta=theta)
    if res.status == 3:
        raise NumericalFailure("LP reported unbounded although every variable is boxed")
    if res.status != 0:
        raise NumericalFailure(f"LP solver failed: {res.message}")

    z = res.x.copy()
    y = z[:N]
    if y.min() < -tol:
        raise NumericalFailure(f"negative occupancy {y.min():.3e}")
    y = np.clip(y, 0.0, None)
    z[:N] = y
    mu = problem.gmap.g @ y if problem.form == "substituted" else z[N:]
    if mu.min() < -tol:
        raise NumericalFailure(f"negative stationary mass {mu.min():.3e}")
    mu = np.clip(mu, 0.0, None)
    Ay = problem.A @ z
    viol = max(
        float(np.max(np.where(np.isfinite(problem.row_upper), Ay - problem.row_upper, -np.inf), initial=0.0)),
        float(np.max(np.where(np.isfinite(problem.row_lower), problem.row_lower - Ay, -np.inf), initial=0.0)),
        0.0,
    )
    gap = _duality_gap(res, problem.c, b_ub, b_eq, problem)
    if gap > 1e3 * tol * (1.0 + abs(res.fun)):
        raise NumericalFailure(f"duality gap {gap:.3e} too large")
    Y = _unflat(y, K, S)
    delay = float(np.arange(K + 1) @ Y.sum(axis=1)) / theta**2
    power = float(problem.powers @ Y.sum(axis=0))
    return LpSolution(
        status=OPTIMAL,
        y=Y,
        mu=JointDistribution(_unflat(mu, K, S)),
        objective_delay=delay,
        avg_queue=theta * delay,
        achieved_power=power,
        duality_gap=gap,
        max_violation=viol,
        theta=theta,
        info={"iterations": int(res.nit)},
    )


def minimum_power(model: ChannelModel, config: ProblemConfig) -> float:
    """Least average power of any policy that serves every arrival (budget ignored)."""
    problem = assemble_lp(model, config)
    keep = np.array([k != "power" for k in problem.row_kind])
    c_pow = problem.A[np.array(problem.row_kind) == "power"][0]
    res, _, _ = _highs(c_pow, problem, config.lp_tolerance, rows=keep)
    if res.status != 0:
        raise NumericalFailure(f"power minimisation failed: {res.message}")
    return float(res.fun)


def extract_policy(sol: LpSolution, theta: float | None = None, tol: float = 1e-9) -> PolicyTable:
    """Recover transmit probabilities from occupancies.

    ``f[q + 1, s] = y[q, s] / ((1 - theta) mu[q + 1, s] + theta mu[q, s])``
    wherever the denominator exceeds ``tol``. Unreachable rows above the
    highest reachable row of a channel state transmit; unreachable rows
    below it copy the nearest reachable row beneath them.
    """
    if sol.y is None:
        raise ValueError("solution carries no occupancies")
    theta = sol.theta if theta is None else theta
    y, mu = sol.y, sol.mu.mu
    K = y.shape[0] - 1
    S = y.shape[1]
    denom = (1 - theta) * mu[1:] + theta * mu[:K]
    f = np.zeros((K + 1, S))
    reach = np.zeros((K + 1, S), dtype=bool)
    reach[0] = True
    reach[1:] = denom > tol
    with np.errstate(divide="ignore", invalid="ignore"):
        f[1:] = np.where(reach[1:], y[:K] / np.where(reach[1:], denom, 1.0), 0.0)
    f = np.clip(f, 0.0, 1.0)
    for s in range(S):
        top = int(np.flatnonzero(reach[:, s]).max())
        for q in range(1, K + 1):
            if not reach[q, s]:
                f[q, s] = 1.0 if q > top else f[q - 1, s]
    f[0] = 0.0
    return PolicyTable(f)


def solve(
    model: ChannelModel, config: ProblemConfig, form: str = "balance"
) -> tuple[LpSolution, PolicyTable | None]:
    """Build, solve and extract in one call. The policy is ``None`` when infeasible."""
    gmap = build_mu_map(model, config.arrival_rate, config.buffer_size) if form == "substituted" else None
    sol = solve_lp(assemble_lp(model, config, gmap, form), config.lp_tolerance)
    if not sol.optimal:
        return sol, None
    return sol, extract_policy(sol, config.arrival_rate, config.lp_tolerance)

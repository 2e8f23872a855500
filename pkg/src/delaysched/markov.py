"""Stationary analysis of finite Markov chains.

The channel chain is small (a handful of states), so everything here works
on dense arrays and solves the balance equations directly.
"""
from __future__ import annotations

from collections import deque
from math import gcd

import numpy as np

from .exceptions import NotErgodic, NumericalFailure

__all__ = ["is_ergodic", "is_irreducible", "period", "stationary_distribution", "solve_balance"]


def _reach(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    todo = deque([start])
    while todo:
        u = todo.popleft()
        for v in np.flatnonzero(adj[u] & ~seen):
            seen[v] = True
            todo.append(v)
    return seen


def is_irreducible(P) -> bool:
    """True iff the digraph of positive entries of ``P`` is strongly connected."""
    adj = np.asarray(P) > 0
    return bool(_reach(adj, 0).all() and _reach(adj.T, 0).all())


def period(P) -> int:
    """Period of an irreducible chain (gcd of all cycle lengths).

    Uses BFS levels from state 0: the period is the gcd of
    ``level[u] + 1 - level[v]`` over all edges ``u -> v``.
    """
    adj = np.asarray(P) > 0
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    todo = deque([0])
    while todo:
        u = todo.popleft()
        for v in np.flatnonzero(adj[u]):
            if level[v] < 0:
                level[v] = level[u] + 1
                todo.append(v)
    d = 0
    for u, v in zip(*np.nonzero(adj)):
        d = gcd(d, int(abs(level[u] + 1 - level[v])))
    return d


def is_ergodic(P) -> bool:
    """True iff ``P`` is irreducible and aperiodic."""
    P = np.asarray(P, dtype=float)
    return is_irreducible(P) and period(P) == 1


def solve_balance(T: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible row-stochastic matrix.

    Solves ``pi (T - I) = 0`` with the last balance equation replaced by
    ``sum(pi) = 1``. Periodic chains are fine; reducible ones are not.
    """
    n = T.shape[0]
    A = T.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("balance equations are singular") from exc
    return pi


def stationary_distribution(P) -> np.ndarray:
    """Unique stationary distribution ``rho`` of an ergodic chain.

    Parameters
    ----------
    P : (S, S) array_like
        Row-stochastic transition matrix.

    Returns
    -------
    rho : (S,) ndarray
        ``rho @ P == rho`` and ``rho.sum() == 1``.
    """
    P = np.asarray(P, dtype=float)
    if not is_ergodic(P):
        raise NotErgodic("transition matrix is not ergodic")
    rho = solve_balance(P)
    rho = np.clip(rho, 0.0, None)
    rho /= rho.sum()
    if np.max(np.abs(rho @ P - rho)) > 1e-12:
        raise NumericalFailure("stationary solve residual too large")
    return rho

"""Acceptance criteria on the published configuration and on random small instances.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary under "acceptance criteria".
"""
import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from delaysched import ProblemConfig, exact_evaluate, lp, mdp, simulate
from delaysched.evaluate import enumerate_thresholds
from delaysched.model import effective_thresholds
from delaysched.sim import greedy_decision_rule

from oracles import REF_GRID, REF_K, REF_THETA, random_model, random_problem

pytestmark = pytest.mark.filterwarnings("error::RuntimeWarning")


def _cfg(eps, **kw):
    return ProblemConfig(REF_THETA, REF_K, eps, **kw)


@pytest.fixture(scope="module")
def lp_grid(ref_model):
    out = {}
    for eps in REF_GRID:
        sol, table = lp.solve(ref_model, _cfg(eps))
        out[eps] = (sol, table)
    return out


def test_criterion_01_cross_method_agreement(ref_model, criterion):
    t0 = time.perf_counter()
    deltas = []
    for eps in REF_GRID:
        sol, _ = lp.solve(ref_model, _cfg(eps))
        ms = mdp.solve(ref_model, _cfg(eps))
        deltas.append(abs(sol.objective_delay - ms.result.avg_delay))
    elapsed = time.perf_counter() - t0
    worst = max(deltas)
    ok = worst <= 1e-5 and elapsed < 10.0
    criterion(1, ok, f"max |LP - Lagrangian| = {worst:.2e} (<= 1e-5), {elapsed:.2f} s (< 10 s)")
    assert worst <= 1e-5
    assert elapsed < 10.0


def test_criterion_02_oracle_closure(ref_model, lp_grid, criterion):
    worst_delay, worst_power = 0.0, -np.inf
    for eps, (sol, table) in lp_grid.items():
        for ov in ("transmit", "discard"):
            r, _ = exact_evaluate(ref_model, table, REF_THETA, REF_K, ov)
            worst_delay = max(worst_delay, abs(r.avg_delay - sol.objective_delay))
            worst_power = max(worst_power, r.avg_power - eps)
    ok = worst_delay <= 1e-7 and worst_power <= 1e-7
    criterion(2, ok, f"max delay gap {worst_delay:.2e} (<= 1e-7), max power excess {worst_power:.2e} (<= 1e-7)")
    assert worst_delay <= 1e-7
    assert worst_power <= 1e-7


def test_criterion_03_brute_force_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for i in range(24):
        S = (1, 2, 3)[i % 3]
        K = (3, 4, 5)[(i // 3) % 3]
        model, cfg = random_problem(rng, S, K)
        sol, _ = lp.solve(model, cfg)
        assert sol.optimal
        best = enumerate_thresholds(model, cfg)
        worst = max(worst, abs(sol.objective_delay - best.best_delay))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60.0 and n >= 20
    criterion(3, ok, f"{n} instances, max |LP - enumeration| = {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 60 s)")
    assert n >= 20
    assert worst <= 1e-4
    assert elapsed < 60.0


def test_criterion_04_monotone_convex_tradeoff(lp_grid, criterion):
    d = np.array([lp_grid[e][0].objective_delay for e in REF_GRID])
    floor = d.min()
    nonincreasing = bool(np.all(np.diff(d) <= 1e-12))
    # strict decrease until the unconstrained optimum is reached
    first_floor = int(np.flatnonzero(d <= floor + 1e-12)[0])
    strict = bool(np.all(np.diff(d[: first_floor + 1]) < 0))
    second = d[2:] - 2 * d[1:-1] + d[:-2]  # uniform grid
    convex = bool(second.min() >= -1e-6)
    ok = nonincreasing and strict and convex
    criterion(4, ok, f"nonincreasing={nonincreasing}, strict until floor={strict}, "
                     f"min second difference {second.min():.2e} (>= -1e-6)")
    assert nonincreasing and strict and convex


def test_criterion_05_value_difference_structure(ref_model, criterion):
    rng = np.random.default_rng(55)
    cases = [(ref_model, _cfg(1.0), eta) for eta in (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 1e3, 1e6)]
    for _ in range(12):
        S = int(rng.integers(1, 4))
        model = random_model(rng, S)
        cfg = ProblemConfig(float(rng.uniform(0.2, 0.8)), int(rng.integers(3, 8)), 1.0)
        for eta in (0.1, 1.0, 5.0, 100.0):
            cases.append((model, cfg, eta))
    checked = 0
    for model, cfg, eta in cases:
        vf = mdp.value_iteration(model, cfg, eta)  # raises StructureViolation on failure
        tol = mdp.STRUCTURE_RTOL * vf.scale
        assert vf.diffs.min() >= -tol
        assert np.diff(vf.diffs, axis=0).min(initial=0.0) >= -tol
        gap = mdp.action_gap(vf, model, cfg)
        assert np.diff(gap, axis=0).max(initial=0.0) <= tol  # transmit advantage grows with q
        mdp.extract_thresholds(vf, model, cfg)
        checked += 1
    ok = checked >= 50
    criterion(5, ok, f"{checked} (instance, eta) pairs with monotone value differences and greedy actions")
    assert checked >= 50


def test_criterion_06_bounded_queue(ref_model, lp_grid, criterion):
    worst = 0.0
    for eps, (sol, table) in lp_grid.items():
        worst = max(worst, float(sol.mu.mu[REF_K].max()))
        _, dist = exact_evaluate(ref_model, table, REF_THETA, REF_K, "discard")
        worst = max(worst, float(dist.mu[REF_K].max()))
        ms = mdp.solve(ref_model, _cfg(eps))
        worst = max(worst, float(ms.dist.mu[REF_K].max()))
    ok = worst <= 1e-9
    criterion(6, ok, f"max stationary mass at q=K over the grid = {worst:.2e} (<= 1e-9)")
    assert worst <= 1e-9


def test_criterion_07_simulator_fidelity(ref_model, lp_grid, criterion):
    simulate(ref_model, lp_grid[1.0][1], REF_THETA, REF_K, 1000, seed=0)  # compile outside the timer
    details, ok = [], True
    for eps in (0.8, 1.0, 1.3):
        table = lp_grid[eps][1]
        exact, _ = exact_evaluate(ref_model, table, REF_THETA, REF_K, "discard")
        t0 = time.perf_counter()
        r = simulate(ref_model, table, REF_THETA, REF_K, 10**6, seed=7)
        elapsed = time.perf_counter() - t0
        zq = abs(r.avg_queue - exact.avg_queue) / r.se_queue if r.se_queue > 0 else (
            0.0 if r.avg_queue == exact.avg_queue else np.inf)
        zp = abs(r.avg_power - exact.avg_power) / r.se_power if r.se_power > 0 else (
            0.0 if r.avg_power == exact.avg_power else np.inf)
        good = zq <= 3 and zp <= 3 and elapsed < 10.0
        ok &= good
        details.append(f"eps={eps}: |z_q|={zq:.2f} |z_p|={zp:.2f} {elapsed:.2f}s")
    criterion(7, ok, "; ".join(details))
    assert ok, details


def test_criterion_08_greedy_dominance(ref_model, lp_grid, criterion):
    seeds = (11, 12, 13)
    gaps = {}
    for eps in REF_GRID:
        rule = greedy_decision_rule(ref_model, eps)
        g = np.mean([simulate(ref_model, rule, REF_THETA, REF_K, 10**6, seed=s).avg_delay for s in seeds])
        gaps[eps] = g - lp_grid[eps][0].objective_delay
    dominated = all(v >= 0 for v in gaps.values())
    shrinks = gaps[1.3] < gaps[0.8]
    ok = dominated and shrinks
    criterion(8, ok, f"min gap {min(gaps.values()):.3f} (>= 0), gap(0.8)={gaps[0.8]:.3f} > gap(1.3)={gaps[1.3]:.3f}")
    assert dominated and shrinks


def test_criterion_09_threshold_trend(ref_model, lp_grid, criterion):
    lp_L = np.array([effective_thresholds(lp_grid[e][1]) for e in REF_GRID])
    pairs = [mdp.solve(ref_model, _cfg(e)).mixture for e in REF_GRID]
    hi = np.array([m.pi1.thresholds for m in pairs])
    lo = np.array([m.pi2.thresholds for m in pairs])
    ok = all(bool(np.all(np.diff(a, axis=0) <= 0)) for a in (lp_L, hi, lo))
    trend = " -> ".join(str(tuple(int(v) for v in row)) for row in np.unique(lp_L, axis=0)[::-1])
    criterion(9, ok, f"thresholds nonincreasing in eps for LP and both mixture endpoints: {trend}")
    assert ok


def _digest(args):
    out = subprocess.run([sys.executable, "-m", "delaysched", *args], capture_output=True, check=False)
    return out.returncode, hashlib.sha256(out.stdout).hexdigest(), out.stdout


def test_criterion_10_determinism(criterion):
    commands = [
        ["sweep", "--config", "builtin:three-state", "--eps-from", "0.8", "--eps-to", "1.3", "--eps-step", "0.05",
         "--sim-slots", "200000", "--seed", "5"],
        ["solve", "--config", "builtin:three-state", "--epsilon", "0.9"],
        ["simulate", "--config", "builtin:three-state", "--policy", "lp", "--slots", "200000", "--seed", "5"],
        ["simulate", "--config", "builtin:three-state", "--policy", "greedy", "--slots", "200000", "--seed", "5"],
    ]
    ok = True
    for args in commands:
        a, b = _digest(args), _digest(args)
        same = a[0] == b[0] == 0 and a[1] == b[1]
        a[2].decode("utf-8")
        ok &= same
    criterion(10, ok, f"{len(commands)} CLI commands run twice with byte-identical output")
    assert ok

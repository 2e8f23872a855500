"""Command-line interface.

Subcommands ``solve``, ``sweep``, ``simulate`` and ``enumerate`` read one
JSON run document (see :func:`load_run_spec`) and write JSON or CSV to stdout
or ``--output``. Exit codes: 0 ok, 1 invalid input, 2 infeasible, 3 size
guard, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import lp, mdp
from .evaluate import enumerate_thresholds, exact_evaluate
from .exceptions import DelaySchedError, Infeasible, InvalidInput, NumericalFailure, TooLarge
from .model import (
    ChannelModel,
    PolicyTable,
    ProblemConfig,
    ThresholdPolicy,
    effective_thresholds,
    threshold_to_policy,
    validate_channel_model,
)
from .sim import greedy_decision_rule, simulate

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_TOO_LARGE, EXIT_NUMERICAL = 0, 1, 2, 3, 4

SOLVE_SCHEMA = "delaysched.solve/1"
SIMULATE_SCHEMA = "delaysched.simulate/1"
ENUMERATE_SCHEMA = "delaysched.enumerate/1"
SWEEP_SCHEMA_VERSION = 1

BUILTIN_PREFIX = "builtin:"
DEFAULT_SLOTS = 10**6
DEFAULT_SEED = 0

_REQUIRED = ("transition", "powers", "arrival_rate", "buffer_size", "power_budget")
_OPTIONAL = (
    "discount",
    "vi_tolerance",
    "bisection_tolerance",
    "lp_tolerance",
    "overflow",
    "max_sweeps",
    "seed",
    "slots",
)


@dataclass(frozen=True)
class RunSpec:
    model: ChannelModel
    config: ProblemConfig
    seed: int = DEFAULT_SEED
    slots: int = DEFAULT_SLOTS
    source: str = ""


def _read_text(path: str) -> tuple[str, str]:
    if path.startswith(BUILTIN_PREFIX):
        name = path[len(BUILTIN_PREFIX):]
        try:
            res = resources.files("delaysched").joinpath("data", f"{name}.json")
            return res.read_text(encoding="utf-8"), path
        except FileNotFoundError:
            raise InvalidInput(f"unknown builtin config {name!r}") from None
    try:
        return Path(path).read_text(encoding="utf-8"), path
    except OSError as exc:
        raise InvalidInput(f"{path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise InvalidInput(f"{path}: not valid UTF-8") from None


def parse_run_spec(text: str, source: str = "<config>") -> RunSpec:
    """Parse a JSON run document into a validated :class:`RunSpec`.

    Required fields: ``transition`` (row-major array of arrays), ``powers``,
    ``arrival_rate``, ``buffer_size``, ``power_budget``. Optional:
    tolerances, ``discount``, ``overflow``, ``max_sweeps``, ``seed``, ``slots``.
    Errors carry the file name and the offending line/column or field.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InvalidInput(f"{source}: top level must be a JSON object")
    unknown = sorted(set(doc) - set(_REQUIRED) - set(_OPTIONAL))
    if unknown:
        raise InvalidInput(f"{source}: unknown field {unknown[0]!r}")
    for key in _REQUIRED:
        if key not in doc:
            raise InvalidInput(f"{source}: missing field {key!r}")

    def field_error(key, what):
        return InvalidInput(f"{source}: field {key!r}: {what}")

    P = doc["transition"]
    if not isinstance(P, list) or not all(isinstance(r, list) for r in P):
        raise field_error("transition", "expected an array of arrays")
    for key in ("transition", "powers"):
        try:
            arr = np.asarray(doc[key], dtype=float)
        except (TypeError, ValueError):
            raise field_error(key, "expected numbers") from None
        if arr.dtype == object:
            raise field_error(key, "ragged array")
    try:
        model = validate_channel_model(doc["transition"], doc["powers"])
    except InvalidInput as exc:
        raise InvalidInput(f"{source}: {exc}") from None
    kw = {}
    for key in ("arrival_rate", "power_budget", "discount", "vi_tolerance", "bisection_tolerance", "lp_tolerance"):
        if key in doc:
            v = doc[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise field_error(key, "expected a number")
            kw[key] = float(v)
    for key in ("buffer_size", "max_sweeps", "seed", "slots"):
        if key in doc and (isinstance(doc[key], bool) or not isinstance(doc[key], int)):
            raise field_error(key, "expected an integer")
    kw["buffer_size"] = doc["buffer_size"]
    if "max_sweeps" in doc:
        kw["max_sweeps"] = doc["max_sweeps"]
    if "overflow" in doc:
        kw["overflow"] = doc["overflow"]
    try:
        config = ProblemConfig(**kw)
    except InvalidInput as exc:
        raise InvalidInput(f"{source}: {exc}") from None
    slots = doc.get("slots", DEFAULT_SLOTS)
    if slots < 1:
        raise field_error("slots", "must be positive")
    return RunSpec(model, config, int(doc.get("seed", DEFAULT_SEED)), int(slots), source)


def load_run_spec(path: str) -> RunSpec:
    text, source = _read_text(path)
    return parse_run_spec(text, source)


# ---- formatting ---------------------------------------------------------

def _num(x):
    """Round to 12 significant digits for emission; non-finite floats become ``None``."""
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.12g}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, str) or obj is None:
        return obj
    return _num(obj)


def _dump_json(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.12g}"


def _emit(text: str, output: str | None):
    if output:
        with open(output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _problem_doc(spec: RunSpec, config: ProblemConfig) -> dict:
    return {
        "epsilon": config.power_budget,
        "arrival_rate": config.arrival_rate,
        "buffer_size": config.buffer_size,
        "overflow": config.overflow,
        "n_states": spec.model.n_states,
    }


def _eval_doc(r) -> dict:
    return {"delay": r.avg_delay, "queue": r.avg_queue, "power": r.avg_power}


# ---- solve --------------------------------------------------------------

def _solve_both(model: ChannelModel, config: ProblemConfig) -> dict:
    """LP and Lagrangian paths at one budget. Raises Infeasible when the LP is infeasible."""
    sol, table = lp.solve(model, config)
    if not sol.optimal:
        raise Infeasible(f"no policy meets power budget {config.power_budget:.12g} "
                         f"(minimum average power {sol.min_power:.12g})")
    theta, K, ov = config.arrival_rate, config.buffer_size, config.overflow
    ev_lp, _ = exact_evaluate(model, table, theta, K, ov)
    ms = mdp.solve(model, config)
    return {
        "lp": sol,
        "table": table,
        "lp_eval": ev_lp,
        "mdp": ms,
        "delta": abs(sol.objective_delay - ms.result.avg_delay),
    }


def cmd_solve(spec: RunSpec, epsilon: float | None = None) -> tuple[int, str]:
    config = spec.config if epsilon is None else spec.config.replace(power_budget=epsilon)
    doc = {"schema": SOLVE_SCHEMA, "problem": _problem_doc(spec, config)}
    try:
        out = _solve_both(spec.model, config)
    except Infeasible as exc:
        doc["status"] = "Infeasible"
        doc["message"] = str(exc)
        return EXIT_INFEASIBLE, _dump_json(doc)
    sol, ms = out["lp"], out["mdp"]
    doc["status"] = "Optimal"
    doc["lp"] = {
        "delay": sol.objective_delay,
        "queue": sol.avg_queue,
        "power": sol.achieved_power,
        "duality_gap": sol.duality_gap,
        "exact": _eval_doc(out["lp_eval"]),
        "effective_thresholds": list(effective_thresholds(out["table"])),
        "transmit_prob": out["table"].transmit_prob,
    }
    doc["mdp"] = {
        "eta": ms.eta,
        "pi_hi": list(ms.mixture.pi1.thresholds),
        "pi_lo": list(ms.mixture.pi2.thresholds),
        "lambda": ms.mixture.lam,
        **_eval_doc(ms.result),
    }
    doc["cross_method_delta"] = out["delta"]
    return EXIT_OK, _dump_json(doc)


# ---- sweep --------------------------------------------------------------

def epsilon_grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, each point rounded to 12 significant digits."""
    if not step > 0:
        raise InvalidInput("--eps-step must be positive")
    if stop < start:
        raise InvalidInput("--eps-to must not be below --eps-from")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [float(f"{start + k * step:.12g}") for k in range(n)]


def sweep_columns(S: int) -> list[str]:
    cols = ["epsilon", "delay_lp", "queue_lp", "delay_mdp", "delay_greedy", "se_greedy", "lambda"]
    cols += [f"thresholds_{s}" for s in range(1, S + 1)]
    cols += ["status", "eta"]
    cols += [f"pi_hi_{s}" for s in range(1, S + 1)] + [f"pi_lo_{s}" for s in range(1, S + 1)]
    cols += ["delay_lp_nonincreasing"]
    return cols


def _sweep_row(args) -> dict:
    model, config, eps, slots, seed = args
    config = config.replace(power_budget=eps)
    S = model.n_states
    row = {"epsilon": eps}
    if slots > 0:
        g = simulate(model, greedy_decision_rule(model, eps), config.arrival_rate, config.buffer_size,
                     slots, seed)
        row["delay_greedy"], row["se_greedy"] = g.avg_delay, g.se_delay
    try:
        out = _solve_both(model, config)
    except Infeasible:
        row["status"] = "Infeasible"
        return row
    except NumericalFailure as exc:
        row["status"] = type(exc).__name__
        return row
    sol, ms = out["lp"], out["mdp"]
    row.update(delay_lp=sol.objective_delay, queue_lp=sol.avg_queue, delay_mdp=ms.result.avg_delay,
               eta=ms.eta, status="Optimal", **{"lambda": ms.mixture.lam})
    for s, L in enumerate(effective_thresholds(out["table"]), 1):
        row[f"thresholds_{s}"] = L
    for s in range(S):
        row[f"pi_hi_{s + 1}"] = ms.mixture.pi1.thresholds[s]
        row[f"pi_lo_{s + 1}"] = ms.mixture.pi2.thresholds[s]
    return row


def sweep_rows(spec: RunSpec, grid, slots: int, seed: int, jobs: int = 1) -> list[dict]:
    """One row per budget in grid order. Infeasible or failed budgets are flagged, not fatal."""
    if not grid:
        raise InvalidInput("empty epsilon grid")
    tasks = [(spec.model, spec.config, float(e), int(slots), int(seed)) for e in grid]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, tasks))
    else:
        rows = [_sweep_row(t) for t in tasks]
    prev = None
    for row in rows:
        if row.get("status") == "Optimal":
            d = row["delay_lp"]
            row["delay_lp_nonincreasing"] = prev is None or d <= prev + 1e-9
            prev = d
    return rows


def format_sweep_csv(rows: list[dict], S: int) -> str:
    cols = sweep_columns(S)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def cmd_sweep(spec: RunSpec, start, stop, step, slots=None, seed=None, jobs=1) -> tuple[int, str]:
    grid = epsilon_grid(start, stop, step)
    slots = spec.slots if slots is None else slots
    seed = spec.seed if seed is None else seed
    rows = sweep_rows(spec, grid, slots, seed, jobs)
    return EXIT_OK, format_sweep_csv(rows, spec.model.n_states)


# ---- simulate -----------------------------------------------------------

def _load_policy_file(path: str, K: int, S: int):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidInput(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if isinstance(doc, dict) and "thresholds" in doc:
        pol = threshold_to_policy(ThresholdPolicy(doc["thresholds"], K))
    elif isinstance(doc, dict) and "transmit_prob" in doc:
        pol = PolicyTable(doc["transmit_prob"])
    else:
        raise InvalidInput(f"{path}: expected an object with 'thresholds' or 'transmit_prob'")
    if pol.transmit_prob.shape != (K + 1, S):
        raise InvalidInput(f"{path}: policy shape {pol.transmit_prob.shape} does not match ({K + 1}, {S})")
    return pol


def cmd_simulate(spec: RunSpec, source: str, slots=None, seed=None, epsilon=None) -> tuple[int, str]:
    config = spec.config if epsilon is None else spec.config.replace(power_budget=epsilon)
    slots = spec.slots if slots is None else slots
    seed = spec.seed if seed is None else seed
    model, theta, K = spec.model, config.arrival_rate, config.buffer_size
    if source == "lp":
        sol, table = lp.solve(model, config)
        if table is None:
            raise Infeasible(f"no policy meets power budget {config.power_budget:.12g}")
        rule = table
    elif source == "mdp":
        rule = mdp.solve(model, config).table
    elif source == "greedy":
        rule = greedy_decision_rule(model, config.power_budget)
    elif source.startswith("file:"):
        rule = _load_policy_file(source[5:], K, model.n_states)
    else:
        raise InvalidInput(f"unknown policy source {source!r}")
    res = simulate(model, rule, theta, K, slots, seed)
    doc = {"schema": SIMULATE_SCHEMA, "problem": _problem_doc(spec, config), "policy": source}
    doc["result"] = {
        "slots": res.slots,
        "seed": res.seed,
        "avg_queue": res.avg_queue,
        "se_queue": res.se_queue,
        "avg_delay": res.avg_delay,
        "se_delay": res.se_delay,
        "avg_power": res.avg_power,
        "se_power": res.se_power,
        "arrivals": res.arrivals,
        "delivered": res.delivered,
        "discarded": res.discarded,
        "final_queue": res.final_queue,
    }
    if isinstance(rule, PolicyTable):
        ev, _ = exact_evaluate(model, rule, theta, K)
        doc["exact"] = _eval_doc(ev)
    return EXIT_OK, _dump_json(doc)


# ---- enumerate ----------------------------------------------------------

def cmd_enumerate(spec: RunSpec, epsilon=None) -> tuple[int, str]:
    config = spec.config if epsilon is None else spec.config.replace(power_budget=epsilon)
    doc = {"schema": ENUMERATE_SCHEMA, "problem": _problem_doc(spec, config)}
    try:
        res = enumerate_thresholds(spec.model, config)
    except Infeasible as exc:
        doc["status"] = "Infeasible"
        doc["message"] = str(exc)
        return EXIT_INFEASIBLE, _dump_json(doc)
    doc["status"] = "Optimal"
    doc["best"] = {
        "delay": res.best_delay,
        "power": res.best_power,
        "pi1": list(res.best.pi1.thresholds),
        "pi2": list(res.best.pi2.thresholds),
        "lambda": res.best.lam,
    }
    doc["policies"] = [
        {"thresholds": list(p.thresholds), "power": pw, "delay": d}
        for p, pw, d in zip(res.policies, res.powers, res.delays)
    ]
    return EXIT_OK, _dump_json(doc)


# ---- entry point --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="delaysched", description="Delay-optimal scheduling under an average power budget.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help="JSON run document, or builtin:three-state for the shipped instance")
        sp.add_argument("--output", help="write to this file instead of stdout")

    sp = sub.add_parser("solve", help="solve by LP and by Lagrangian value iteration")
    common(sp)
    sp.add_argument("--epsilon", type=float, help="override the power budget")

    sp = sub.add_parser("sweep", help="CSV table over a grid of power budgets")
    common(sp)
    sp.add_argument("--eps-from", type=float, required=True)
    sp.add_argument("--eps-to", type=float, required=True)
    sp.add_argument("--eps-step", type=float, required=True)
    sp.add_argument("--sim-slots", type=int, help="greedy simulation length (0 skips it)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("simulate", help="Monte Carlo run of one policy")
    common(sp)
    sp.add_argument("--policy", required=True, help="lp, mdp, greedy or file:PATH")
    sp.add_argument("--slots", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epsilon", type=float)

    sp = sub.add_parser("enumerate", help="brute force over all threshold policies")
    common(sp)
    sp.add_argument("--epsilon", type=float)
    return p


def run(argv=None) -> tuple[int, str, str | None]:
    """Parse ``argv`` and execute; returns ``(exit_code, text, output_path)`` without writing."""
    args = build_parser().parse_args(argv)
    code, text = _dispatch(args)
    return code, text, args.output


def _dispatch(args) -> tuple[int, str]:
    spec = load_run_spec(args.config)
    if args.command == "solve":
        return cmd_solve(spec, args.epsilon)
    if args.command == "sweep":
        if args.sim_slots is not None and args.sim_slots < 0:
            raise InvalidInput("--sim-slots must be nonnegative")
        return cmd_sweep(spec, args.eps_from, args.eps_to, args.eps_step, args.sim_slots, args.seed,
                         max(1, args.jobs))
    if args.command == "simulate":
        if args.slots is not None and args.slots < 1:
            raise InvalidInput("--slots must be positive")
        return cmd_simulate(spec, args.policy, args.slots, args.seed, args.epsilon)
    return cmd_enumerate(spec, args.epsilon)


def main(argv=None) -> int:
    try:
        code, text, output = run(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except TooLarge as exc:
        print(f"too large: {exc}", file=sys.stderr)
        return EXIT_TOO_LARGE
    except NumericalFailure as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DelaySchedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    try:
        _emit(text, output)
    except OSError as exc:
        print(f"error: cannot write {output}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INVALID
    if code == EXIT_INFEASIBLE:
        print("infeasible: power budget cannot be met", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

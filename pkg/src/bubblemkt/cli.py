"""Scenario-driven command line: classify, solve, decompose, welfare,
simulate, and parameter sweeps, all emitting CSV.

Scenario files are JSON with blocks ``market``, ``hazard``, ``excess``,
``preference``, ``grid``, ``sim``, and optionally ``sweep``; unspecified
keys fall back to the baseline scenario (horizon 1, mu 0.1, sigma 0.2,
truncated-exponential crash law, constant excess return 0.2, p = 4).
Numbers are printed with 17 significant digits so binary doubles
round-trip.

Exit codes: 1 parse error, 2 model validation error, 3 solver failure,
4 simulation diagnostic.  Errors print one machine-readable line on
standard error: ``ERROR code=<n> kind=<kind> message="..."``.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import elmm, hazard as hz, montecarlo as mc, solver as sv, welfare as wf

SEED_ENV_VAR = "BUBBLEMKT_SEED"

_DEFAULTS = {
    "market": {"mu": 0.1, "sigma": 0.2, "horizon": 1.0},
    "hazard": {"family": "exponential_cutoff", "params": {"rate": 1.0}},
    "excess": {"family": "constant", "params": {"alpha": 0.2}},
    "preference": {"p": 4.0, "x": 1.0},
    "grid": {"n": 512},
    "sim": {
        "n_paths": 100_000,
        "n_steps": 1024,
        "seed": 0,
        "estimand": "terminal_price",
        "strategy": "optimal",
    },
}

EXIT_PARSE = 1
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_SIMULATION = 4


class ScenarioError(ValueError):
    """Scenario file cannot be interpreted."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("scenario file must hold a JSON object")
    return _merge(_DEFAULTS, raw)


def _build_hazard(spec: dict, horizon: float) -> hz.CrashHazard:
    family = spec.get("family")
    params = spec.get("params", {})
    if family == "exponential_cutoff":
        return hz.ExponentialCutoffHazard(rate=params.get("rate", 1.0), horizon=horizon)
    if family == "uniform":
        return hz.UniformHazard(horizon=horizon)
    if family == "lppl":
        return hz.LPPLHazard(
            b=params["b"],
            c=params.get("c", 0.0),
            power=params["power"],
            omega=params.get("omega", 0.0),
            phase=params.get("phase", 0.0),
            horizon=horizon,
        )
    if family == "tabulated":
        return hz.TabulatedHazard(params["times"], params["cdf"])
    raise ScenarioError(f"unknown hazard family {family!r}")


def _build_excess(spec: dict, law: hz.CrashHazard) -> hz.ExcessReturn:
    family = spec.get("family")
    params = spec.get("params", {})
    if family == "zero":
        return hz.ZeroExcess()
    if family == "constant":
        return hz.ConstantExcess(params.get("alpha", 0.2))
    if family == "linear_ramp":
        return hz.LinearRampExcess(params.get("slope", 0.2))
    if family == "constant_jump_size":
        return hz.ConstantJumpSizeExcess(law, params["delta0"])
    if family == "jls_relaxed":
        delta = params.get("delta", {})
        kind = delta.get("kind")
        if kind == "linear":
            return hz.linear_delta_excess(law, delta["slope"])
        if kind == "constant":
            return hz.ConstantJumpSizeExcess(law, delta["value"])
        raise ScenarioError(f"unknown relative-jump-size kind {kind!r}")
    raise ScenarioError(f"unknown excess family {family!r}")


def build_model(scenario: dict) -> hz.MarketModel:
    market = scenario["market"]
    law = _build_hazard(scenario["hazard"], market.get("horizon", 1.0))
    excess = _build_excess(scenario["excess"], law)
    return hz.MarketModel(
        mu=market.get("mu", 0.1), sigma=market.get("sigma", 0.2), hazard=law, excess=excess
    )


def build_preference(scenario: dict) -> sv.Preference:
    pref = scenario["preference"]
    return sv.Preference(p=pref.get("p", 4.0), x=pref.get("x", 1.0))


def _fmt(value) -> str:
    if isinstance(value, float) or isinstance(value, np.floating):
        return f"{float(value):.17g}"
    return str(value)


def _emit(rows: list[list], header: list[str], out) -> None:
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(_fmt(v) for v in row) + "\n")


def _profile_id(scenario: dict) -> str:
    ex = scenario["excess"]
    params = ex.get("params", {})
    if ex.get("family") == "constant":
        return _fmt(params.get("alpha", 0.2))
    detail = ",".join(f"{k}={v}" for k, v in sorted(params.items()))
    return f"{ex.get('family')}({detail})"


def _run_classify(scenario: dict, args, out) -> int:
    model = build_model(scenario)
    if args.under_q:
        result = elmm.classify_under_Q(model, elmm.constant_tilt(0.0))
    else:
        result = hz.classify_under_P(model)
    _emit(
        [[
            result.verdict.value,
            result.atom,
            result.defect,
            result.limsup_delta,
            result.detail,
        ]],
        ["verdict", "atom", "defect", "limsup_delta", "detail"],
        out,
    )
    return 0


def _solve(scenario: dict, args) -> sv.Solution:
    model = build_model(scenario)
    prefs = build_preference(scenario)
    kwargs = {"n_grid": int(args.grid or scenario["grid"].get("n", 512))}
    if args.tol is not None:
        kwargs["tol"] = args.tol
    return sv.solve_optimal(model, prefs, **kwargs)


def _run_solve(scenario: dict, args, out) -> int:
    sol = _solve(scenario, args)
    pi = sv.optimal_fraction(sol, sol.grid)
    rows = [
        [t, yv, lo, hi, p, r]
        for t, yv, lo, hi, p, r in zip(
            sol.grid,
            sol.tilt.values,
            sol.lower.values,
            sol.upper.values,
            pi,
            sol.residuals,
        )
    ]
    _emit(rows, ["t", "y_hat", "y_star_lower", "y_star_upper", "pi_hat", "residual"], out)
    return 0


def _run_decompose(scenario: dict, args, out) -> int:
    sol = _solve(scenario, args)
    pi_m, pi_h = sv.decompose(sol)
    rows = [[t, m, h] for t, m, h in zip(sol.grid, pi_m.values, pi_h.values)]
    _emit(rows, ["t", "pi_m", "pi_h"], out)
    return 0


def _run_welfare(scenario: dict, args, out) -> int:
    sol = _solve(scenario, args)
    report = wf.safe_rates(sol)
    _emit(
        [[
            sol.preference.p,
            sol.model.mu,
            sol.model.sigma,
            _profile_id(scenario),
            report.certainty_equivalent,
            report.esr,
            report.esr_benchmark,
            report.relative_loss,
        ]],
        ["p", "mu", "sigma", "profile", "CE", "ESR", "ESR_BS", "rESRL"],
        out,
    )
    return 0


def _run_simulate(scenario: dict, args, out) -> int:
    model = build_model(scenario)
    sim = scenario["sim"]
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    cfg = mc.SimConfig(
        n_paths=int(args.paths or sim.get("n_paths", 100_000)),
        n_steps=int(sim.get("n_steps", 1024)),
        seed=int(seed),
    )
    estimand_name = sim.get("estimand", "terminal_price")
    if estimand_name == "terminal_price":
        estimand = mc.TerminalPrice()
    elif estimand_name == "expected_utility":
        sol = _solve(scenario, args)
        choice = sim.get("strategy", "optimal")
        strategies = {
            "optimal": mc.optimal_strategy(sol),
            "merton": mc.merton_strategy(model, sol.preference.p),
            "myopic": mc.myopic_only_strategy(sol),
        }
        if choice not in strategies:
            raise ScenarioError(f"unknown strategy {choice!r}")
        estimand = mc.ExpectedUtility(
            strategies[choice], sol.preference.p, sol.preference.x
        )
    elif estimand_name == "budget_under_q":
        estimand = mc.BudgetUnderQ(_solve(scenario, args))
    else:
        raise ScenarioError(f"unknown estimand {estimand_name!r}")
    start = time.perf_counter()
    result = mc.estimate(model, cfg, estimand)
    runtime_ms = result.diagnostics.get(
        "runtime_ms", 1e3 * (time.perf_counter() - start)
    )
    _emit(
        [[result.estimand, result.mean, result.stderr, result.n_paths, result.seed, runtime_ms]],
        ["estimand", "mean", "stderr", "n_paths", "seed", "runtime_ms"],
        out,
    )
    return 0


def _set_path(scenario: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = scenario
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


_COMMANDS = {
    "classify": _run_classify,
    "solve": _run_solve,
    "decompose": _run_decompose,
    "welfare": _run_welfare,
    "simulate": _run_simulate,
}


def _run_sweep(scenario: dict, args, out) -> int:
    sweep = scenario.get("sweep")
    if not sweep or "parameter" not in sweep or "values" not in sweep:
        raise ScenarioError("sweep needs 'parameter' and 'values'")
    inner = sweep.get("command", "welfare")
    if inner not in _COMMANDS:
        raise ScenarioError(f"sweep cannot wrap command {inner!r}")
    base_seed = int(scenario["sim"].get("seed", 0))

    def run_point(index_value):
        index, value = index_value
        point = copy.deepcopy(scenario)
        _set_path(point, sweep["parameter"], value)
        point["sim"]["seed"] = base_seed + index
        import io

        buf = io.StringIO()
        code = _COMMANDS[inner](point, args, buf)
        return code, buf.getvalue()

    values = list(sweep["values"])
    with ThreadPoolExecutor(max_workers=min(8, max(1, len(values)))) as pool:
        results = list(pool.map(run_point, enumerate(values)))
    status = 0
    for value, (code, text) in zip(values, results):
        out.write(f"# {sweep['parameter']} = {_fmt(value)}\n")
        out.write(text)
        status = max(status, code)
    return status


def _error(kind: str, code: int, message: str) -> int:
    msg = str(message).replace('"', "'")
    print(f'ERROR code={code} kind={kind} message="{msg}"', file=sys.stderr)
    return code


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bubblemkt",
        description="Bubble-market scenarios: classification, optimal "
        "investment, welfare, and Monte Carlo checks.",
    )
    parser.add_argument(
        "command",
        choices=["classify", "solve", "decompose", "welfare", "simulate", "sweep"],
    )
    parser.add_argument("--scenario", required=True, help="scenario JSON file")
    parser.add_argument("--out", help="write CSV here instead of stdout")
    parser.add_argument("--grid", type=int, help="solver grid size override")
    parser.add_argument("--paths", type=int, help="Monte Carlo path count override")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument(
        "--under-q", action="store_true", help="classify under the tilted measure"
    )
    parser.add_argument("--tol", type=float, help="solver tolerance override")
    args = parser.parse_args(argv)

    if args.seed is None and SEED_ENV_VAR in os.environ:
        try:
            args.seed = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            return _error("parse", EXIT_PARSE, f"bad {SEED_ENV_VAR} value")

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        return _error("parse", EXIT_PARSE, exc)
    if args.seed is not None:
        scenario["sim"]["seed"] = args.seed

    runner = _run_sweep if args.command == "sweep" else _COMMANDS[args.command]

    try:
        if args.out:
            with open(args.out, "w") as fh:
                return runner(scenario, args, fh)
        return runner(scenario, args, sys.stdout)
    except ScenarioError as exc:
        return _error("parse", EXIT_PARSE, exc)
    except (KeyError, TypeError) as exc:
        return _error("parse", EXIT_PARSE, f"scenario field problem: {exc!r}")
    except (hz.ModelError, elmm.RejectedTiltError) as exc:
        return _error("validation", EXIT_VALIDATION, exc)
    except (sv.SolverError, hz.DomainError) as exc:
        return _error("solver", EXIT_SOLVER, exc)
    except mc.SimulationDiagnostic as exc:
        return _error("simulation", EXIT_SIMULATION, exc)


if __name__ == "__main__":
    sys.exit(main())

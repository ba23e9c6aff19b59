"""Command-line entry point: ``coldchain <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .experiment import (ConfigError, ExperimentConfig, Seeds, fuel_frontier, prepare_instance, report,
                         run_experiment, train_policy, worker_count)
from .formulation import RouteModel
from .instance import InstanceError
from .lp import LpError
from .policies import (POLICY_ORDER, EvaluationSetup, HeuristicParams, best_lambda2, evaluate, lambda2_sweep,
                       write_results_csv, write_summary_csv)
from .power import PowerModel, fit_power_model
from .scenario import ScenarioLattice, ScenarioModel, build_lattice, write_lattice_csv
from .sddp import SDDP, SddpError, ValueFunction
from .thermo import ControlError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("coldchain.cli")


def _instance_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instance", default="builtin:r1", help="instance JSON path or builtin:r1..r4")
    p.add_argument("--h", type=float, default=None, help="heat-transfer coefficient override, W/(m2 K)")
    p.add_argument("--capacity-kw", type=float, default=None, help="unit capacity override, kW")


def _policies(text: str) -> list[str]:
    pols = [p.strip().lower() for p in text.split(",") if p.strip()]
    bad = [p for p in pols if p not in POLICY_ORDER]
    if bad or not pols:
        raise ConfigError(f"unknown policies {bad}; choose from {','.join(POLICY_ORDER)}")
    return pols


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args):
    return prepare_instance(args.instance, args.h, args.capacity_kw)


def _power(args, inst):
    if getattr(args, "power", None):
        try:
            return PowerModel.load(args.power)
        except FileNotFoundError:
            raise ConfigError(f"power model not found: {args.power}") from None
    return fit_power_model(inst)


def _lattice(path: str) -> ScenarioLattice:
    try:
        return ScenarioLattice.load(path)
    except FileNotFoundError:
        raise ConfigError(f"lattice not found: {path}") from None


def _out(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands ---------------------------------------------------------------

def cmd_fit_power(args) -> int:
    inst = _load(args)
    t0 = time.perf_counter()
    pm = fit_power_model(inst, K=args.planes, n=args.grid_n, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pm.save(out)
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["T_ext_bucket_K", "planes", "wmape_pct", "max_rel_error_pct"])
        for b, m in sorted(pm.buckets.items()):
            w.writerow([b, m.K, f"{100 * m.wmape:.6f}", f"{100 * m.max_rel_error:.6f}"])
    worst = max(m.wmape for m in pm.buckets.values())
    print(f"fitted {len(pm.buckets)} buckets with K={args.planes}; worst wMAPE {100 * worst:.2f}% "
          f"({time.perf_counter() - t0:.1f} s) -> {out}")
    return EXIT_OK


def _scenario_model(args, inst) -> ScenarioModel:
    return ScenarioModel.for_instance(inst, fix_temps=args.fix_temps, fix_door_times=args.fix_door_times)


def cmd_build_lattice(args) -> int:
    inst = _load(args)
    if args.nodes < 1 or args.samples < args.nodes:
        raise ConfigError("need 1 <= nodes <= samples")
    lat = build_lattice(_scenario_model(args, inst), args.nodes, args.samples, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lat.save(out)
    write_lattice_csv(out.with_suffix(".csv"), lat)
    print(f"lattice with {args.nodes} nodes for stages {lat.stages[0]}..{lat.stages[-1]} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.iterations < 1:
        raise ConfigError("iterations must be at least 1")
    inst = _load(args)
    lat = _lattice(args.lattice)
    power = _power(args, inst)
    solver = SDDP(RouteModel(inst, power, budget=args.budget_liters), lat)
    t0 = time.perf_counter()
    rep = solver.train(args.iterations, seed=args.seed)
    out = _out(args.out_dir)
    solver.vf.save(out / "cuts.json")
    rep.to_csv(out / "train_report.csv")
    print(f"{rep.iterations} iterations, lower bound {rep.lower_bound[-1]:.6f} K min, "
          f"{solver.vf.n_cuts()} cuts ({time.perf_counter() - t0:.1f} s) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params = HeuristicParams(args.lambda1, args.lambda2)
    policies = None if args.lambda2_sweep else _policies(args.policies)
    if policies and "sp" in policies and not (args.cuts and args.lattice):
        raise ConfigError("the sp policy needs --cuts and --lattice")
    inst = _load(args)
    power = _power(args, inst)
    scen = _scenario_model(args, inst)
    paths = scen.scenarios(args.seed, args.n)
    out = _out(args.out_dir)
    if args.lambda2_sweep:
        sweep = lambda2_sweep(inst, power, paths, lambda1=args.lambda1)
        with open(out / "lambda2_sweep.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lambda2", "mean_cost_Kmin", "se_cost_Kmin", "violation_scenarios"])
            for lam, r in sweep.items():
                w.writerow([f"{lam:.1f}", f"{r.mean:.9f}", f"{r.se:.9f}", r.violation_scenarios])
        best = best_lambda2(sweep)
        print(f"best lambda2 = {best:.1f}: {sweep[best].mean:.4f} K min (lambda2 = 1: {sweep[1.0].mean:.4f})")
        return EXIT_OK
    solver = None
    if "sp" in policies:
        solver = SDDP(RouteModel(inst, power, budget=args.fuel_budget), _lattice(args.lattice))
        try:
            solver.load_cuts(ValueFunction.load(args.cuts))
        except FileNotFoundError:
            raise ConfigError(f"cuts file not found: {args.cuts}") from None
    setup = EvaluationSetup(inst, power, scen, solver=solver, budget=args.fuel_budget, heuristic=params)
    res = evaluate(setup, policies, paths)
    write_results_csv(out / "results.csv", res)
    write_summary_csv(out / "summary.csv", res)
    for pol, r in res.items():
        print(f"{pol:>4}: mean {r.mean:10.4f} K min  se {r.se:8.4f}  VS {r.violation_scenarios:4d}  "
              f"fuel {r.mean_fuel:.3f} L")
    return EXIT_OK


def cmd_sweep(args) -> int:
    inst = _load(args)
    power = _power(args, inst)
    scen = ScenarioModel.for_instance(inst)
    seeds = Seeds(lattice=args.lattice_seed, train=args.train_seed, scenarios=args.seed)
    if args.budgets:
        budgets = _floats(args.budgets)
    else:
        # span a fraction range of the fuel an unconstrained lookahead policy uses
        ref = evaluate(EvaluationSetup(inst, power, scen), ["rlp"], scen.scenarios(args.seed, args.n))["rlp"]
        budgets = list(np.round(np.linspace(args.low, 1.0, args.points) * ref.mean_fuel, 6))
    if not budgets or min(budgets) <= 0:
        raise ConfigError("budgets must be positive")
    out = _out(args.out_dir)
    rows = fuel_frontier(inst, power, scen, budgets, args.nodes, args.samples, args.iterations, args.n, seeds,
                         out / "frontier.csv", policies=tuple(_policies(args.policies)))
    for r in rows:
        print(f"B={float(r['budget_L']):.4f} L {r['policy']:>4}: {float(r['mean_cost_Kmin']):.4f} K min, "
              f"max overrun {float(r['max_overrun_L']):.2e} L")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = ExperimentConfig.from_toml(args.config)
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    rows = run_experiment(cfg, worker_count())
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed -> {cfg.output_dir / 'table.csv'}")
    return EXIT_NUMERIC if failed and len(failed) == len(rows) else EXIT_OK


def cmd_report(args) -> int:
    files = report(args.results_dir, log_y=args.log_y)
    print("\n".join(str(f) for f in files))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coldchain", description="Cooling policies for refrigerated delivery routes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-power", help="fit max-affine power surrogates per external temperature")
    _instance_args(p)
    p.add_argument("--planes", "-K", type=int, default=4)
    p.add_argument("--grid-n", type=int, default=100, help="grid points per axis (n*n samples)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="power.json")
    p.set_defaults(func=cmd_fit_power)

    p = sub.add_parser("build-lattice", help="cluster sampled noise into a scenario lattice")
    _instance_args(p)
    p.add_argument("--nodes", "-M", type=int, default=100)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--fix-temps", action="store_true")
    p.add_argument("--fix-door-times", action="store_true")
    p.add_argument("--out", default="lattice.json")
    p.set_defaults(func=cmd_build_lattice)

    p = sub.add_parser("train", help="train the stochastic policy with SDDP")
    _instance_args(p)
    p.add_argument("--power", help="power model JSON (fitted on the fly if omitted)")
    p.add_argument("--lattice", required=True)
    p.add_argument("--iterations", type=int, default=450)
    p.add_argument("--budget-liters", type=float, default=None)
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--out-dir", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="simulate policies on common out-of-sample scenarios")
    _instance_args(p)
    p.add_argument("--power")
    p.add_argument("--lattice")
    p.add_argument("--cuts")
    p.add_argument("--policies", default="h1,h2,rlp,sp,clv")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--fix-temps", action="store_true")
    p.add_argument("--fix-door-times", action="store_true")
    p.add_argument("--fuel-budget", type=float, default=None, help="liters")
    p.add_argument("--lambda1", type=float, default=0.5)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--lambda2-sweep", action="store_true", help="sweep H2's lambda2 over 0.1..1.0 instead")
    p.add_argument("--out-dir", default="evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="fuel-budget frontier for SP and RLP")
    _instance_args(p)
    p.add_argument("--power")
    p.add_argument("--budgets", help="comma-separated liters; default spans a fraction of RLP's fuel use")
    p.add_argument("--points", type=int, default=6)
    p.add_argument("--low", type=float, default=0.4, help="smallest budget as a fraction of RLP fuel")
    p.add_argument("--policies", default="sp,rlp")
    p.add_argument("--nodes", "-M", type=int, default=30)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--lattice-seed", type=int, default=1)
    p.add_argument("--train-seed", type=int, default=2)
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run-experiment", help="run the parameter grid from a TOML config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("report", help="aggregate a results directory into tables and SVG charts")
    p.add_argument("results_dir")
    p.add_argument("--log-y", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InstanceError, json.JSONDecodeError, KeyError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LpError, SddpError, ControlError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

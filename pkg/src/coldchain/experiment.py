"""Experiment configuration, the parameter-grid runner and the report builder."""

from __future__ import annotations

import csv
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import svg
from .formulation import RouteModel
from .instance import InstanceError, RouteInstance, load_instance
from .policies import POLICY_ORDER, EvaluationSetup, HeuristicParams, evaluate, write_results_csv, write_summary_csv
from .power import PowerModel, fit_power_model
from .scenario import ScenarioModel, build_lattice
from .sddp import SDDP

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    power: int = 0
    lattice: int = 1
    train: int = 2
    scenarios: int = 3


@dataclass
class ExperimentConfig:
    instances: list[str]
    capacities_kW: list[float] = field(default_factory=lambda: [8.0, 10.0, 12.0])
    h_values: list[float] = field(default_factory=lambda: [2.0, 4.0, 6.0])
    lattice_nodes: int = 100
    lattice_samples: int = 100_000
    iterations: int = 450
    scenarios: int = 1000
    policies: list[str] = field(default_factory=lambda: ["h1", "h2", "rlp", "sp", "clv"])
    power_planes: int = 4
    lambda1: float = 0.5
    lambda2: float = 1.0
    value_of_information: bool = False
    frontier_budgets_L: list[float] = field(default_factory=list)
    seeds: Seeds = field(default_factory=Seeds)
    thermo: dict = field(default_factory=dict)
    product: dict = field(default_factory=dict)
    output_dir: Path = Path("results")
    log_y: bool = False

    def validate(self) -> None:
        if not self.instances or not self.capacities_kW or not self.h_values:
            raise ConfigError("empty parameter grid")
        for name in ("capacities_kW", "h_values", "frontier_budgets_L"):
            if any(not (v > 0 and math.isfinite(v)) for v in getattr(self, name)):
                raise ConfigError(f"{name} must be positive")
        for name in ("lattice_nodes", "lattice_samples", "iterations", "scenarios", "power_planes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lattice_samples < self.lattice_nodes:
            raise ConfigError("lattice_samples must be at least lattice_nodes")
        bad = [p for p in self.policies if p not in POLICY_ORDER]
        if bad or not self.policies:
            raise ConfigError(f"unknown or missing policies: {bad}")
        try:
            HeuristicParams(self.lambda1, self.lambda2)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for path in self.instances:
            try:
                load_instance(path)
            except InstanceError as e:
                raise ConfigError(f"instance {path}: {e}") from None

    def cells(self) -> list[tuple[str, float, float]]:
        return [(p, c, h) for p in self.instances for c in self.capacities_kW for h in self.h_values]

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> ExperimentConfig:
        doc = dict(doc)
        exp = dict(doc.pop("experiment", {}))
        seeds = Seeds(**doc.pop("seeds", {}))
        thermo = doc.pop("thermo", {})
        product = doc.pop("product", {})
        if doc:
            raise ConfigError(f"unknown sections: {sorted(doc)}")
        known = {f.name for f in fields(cls)} - {"seeds", "thermo", "product"}
        unknown = set(exp) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        base = base or Path(".")

        def resolve(p: str) -> str:
            return p if p.startswith("builtin:") or Path(p).is_absolute() else str(base / p)

        if "instances" not in exp:
            raise ConfigError("experiment.instances is required")
        exp["instances"] = [resolve(p) for p in exp["instances"]]
        if "output_dir" in exp:
            exp["output_dir"] = Path(resolve(exp["output_dir"]))
        try:
            cfg = cls(seeds=seeds, thermo=dict(thermo), product=dict(product), **exp)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from None
        return cls.from_dict(doc, path.parent)


# -- building blocks shared with the CLI -------------------------------------

def prepare_instance(path: str, h: float | None = None, capacity_kW: float | None = None,
                     thermo: dict | None = None, product: dict | None = None) -> RouteInstance:
    """Load an instance and apply overrides of the default parameters."""
    inst = load_instance(path)
    if thermo:
        names = {f.name for f in fields(inst.thermo)}
        if set(thermo) - names:
            raise ConfigError(f"unknown thermo keys: {sorted(set(thermo) - names)}")
        inst = replace(inst, thermo=replace(inst.thermo, **thermo))
    if product:
        names = {f.name for f in fields(inst.classes[0])} - {"id"}
        if set(product) - names:
            raise ConfigError(f"unknown product keys: {sorted(set(product) - names)}")
        inst = replace(inst, classes=tuple(replace(c, **product) for c in inst.classes))
    return inst.with_params(h=h, unit_capacity=None if capacity_kW is None else 1000.0 * capacity_kW)


def cell_name(path: str, capacity_kW: float, h: float) -> str:
    route = path.split(":", 1)[1] if path.startswith("builtin:") else Path(path).stem
    return f"{route}_W{capacity_kW:g}_h{h:g}"


def train_policy(inst: RouteInstance, power: PowerModel, scen: ScenarioModel, nodes: int, samples: int,
                 iterations: int, seeds: Seeds, budget: float | None = None):
    lattice = build_lattice(scen, nodes, samples, np.random.default_rng(seeds.lattice))
    solver = SDDP(RouteModel(inst, power, budget=budget), lattice)
    report = solver.train(iterations, seed=seeds.train)
    return solver, report


def run_cell(cfg: ExperimentConfig, path: str, capacity_kW: float, h: float) -> dict:
    """Fit, train and evaluate one grid cell; failures are recorded, not raised."""
    name = cell_name(path, capacity_kW, h)
    out = cfg.output_dir / "cells" / name
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "cell.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("coldchain")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    row = {"cell": name, "route": name.split("_W")[0], "capacity_kW": f"{capacity_kW:g}", "h_W_per_m2K": f"{h:g}"}
    t0 = time.perf_counter()
    try:
        inst = prepare_instance(path, h, capacity_kW, cfg.thermo, cfg.product)
        power = fit_power_model(inst, K=cfg.power_planes, seed=cfg.seeds.power)
        scen = ScenarioModel.for_instance(inst)
        solver = None
        if "sp" in cfg.policies:
            solver, rep = train_policy(inst, power, scen, cfg.lattice_nodes, cfg.lattice_samples, cfg.iterations,
                                       cfg.seeds)
            rep.to_csv(out / "train_report.csv")
            row["lower_bound_Kmin"] = f"{rep.lower_bound[-1]:.9f}"
        paths = scen.scenarios(cfg.seeds.scenarios, cfg.scenarios)
        setup = EvaluationSetup(inst, power, scen, solver=solver,
                                heuristic=HeuristicParams(cfg.lambda1, cfg.lambda2))
        res = evaluate(setup, cfg.policies, paths)
        write_results_csv(out / "results.csv", res)
        write_summary_csv(out / "summary.csv", res)
        for pol, r in res.items():
            row[f"{pol}_mean_cost_Kmin"] = f"{r.mean:.9f}"
            row[f"{pol}_se_cost_Kmin"] = f"{r.se:.9f}"
        if cfg.value_of_information:
            value_of_information(cfg, inst, power, out / "voi.csv")
        if cfg.frontier_budgets_L:
            fuel_frontier(inst, power, scen, cfg.frontier_budgets_L, cfg.lattice_nodes, cfg.lattice_samples,
                          cfg.iterations, cfg.scenarios, cfg.seeds, out / "frontier.csv")
        row["status"] = "ok"
    except Exception as e:  # one failing cell must not stop the grid
        log.exception("cell %s failed", name)
        row["status"] = f"failed: {type(e).__name__}: {e}"
    finally:
        log.info("cell %s finished in %.1f s", name, time.perf_counter() - t0)
        root.removeHandler(handler)
        handler.close()
    return row


def value_of_information(cfg: ExperimentConfig, inst: RouteInstance, power: PowerModel, path: Path) -> list[dict]:
    """SP cost with both random factors, with door times fixed and with temperatures fixed."""
    rows = []
    for variant, kw in (("full", {}), ("fixed_temps", {"fix_temps": True}),
                        ("fixed_door_times", {"fix_door_times": True})):
        scen = ScenarioModel.for_instance(inst, **kw)
        solver, _ = train_policy(inst, power, scen, cfg.lattice_nodes, cfg.lattice_samples, cfg.iterations,
                                 cfg.seeds)
        paths = scen.scenarios(cfg.seeds.scenarios, cfg.scenarios)
        r = evaluate(EvaluationSetup(inst, power, scen, solver=solver), ["sp"], paths)["sp"]
        rows.append({"variant": variant, "mean_cost_Kmin": f"{r.mean:.9f}", "se_cost_Kmin": f"{r.se:.9f}"})
    _write_rows(path, rows)
    return rows


def fuel_frontier(inst: RouteInstance, power: PowerModel, scen: ScenarioModel, budgets, nodes: int, samples: int,
                  iterations: int, n: int, seeds: Seeds, path: Path | None = None,
                  policies=("sp", "rlp")) -> list[dict]:
    """Violation cost of budget-constrained SP and RLP for each fuel budget."""
    rows = []
    paths = scen.scenarios(seeds.scenarios, n)
    for B in sorted(float(b) for b in budgets):
        solver = None
        if "sp" in policies:
            solver, _ = train_policy(inst, power, scen, nodes, samples, iterations, seeds, budget=B)
        res = evaluate(EvaluationSetup(inst, power, scen, solver=solver, budget=B), list(policies), paths)
        for pol, r in res.items():
            rows.append({"budget_L": f"{B:.6f}", "policy": pol, "mean_cost_Kmin": f"{r.mean:.9f}",
                         "se_cost_Kmin": f"{r.se:.9f}", "mean_fuel_L": f"{r.mean_fuel:.9f}",
                         "max_overrun_L": f"{r.max_overrun:.9f}"})
    if path is not None:
        _write_rows(path, rows)
    return rows


def _write_rows(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, restval="")
        w.writeheader()
        w.writerows(rows)


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def worker_count() -> int:
    raw = os.environ.get("COLDCHAIN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"COLDCHAIN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("COLDCHAIN_THREADS must be at least 1")
    return n


def table_columns(policies) -> list[str]:
    cols = ["cell", "route", "capacity_kW", "h_W_per_m2K", "status", "lower_bound_Kmin"]
    for p in policies:
        cols += [f"{p}_mean_cost_Kmin", f"{p}_se_cost_Kmin"]
    return cols


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Run every grid cell, write ``table.csv`` with one row per cell, then the report."""
    cfg.validate()
    cells = cfg.cells()
    workers = workers or worker_count()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as ex:
            rows = list(ex.map(run_cell, [cfg] * len(cells), *zip(*cells)))
    else:
        rows = [run_cell(cfg, *c) for c in cells]
    _write_rows(cfg.output_dir / "table.csv", rows, table_columns(cfg.policies))
    report(cfg.output_dir, log_y=cfg.log_y)
    return rows


# -- report -------------------------------------------------------------------

def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def report(results_dir: str | Path, log_y: bool = False) -> list[Path]:
    """Grouped averages by route, capacity and h, plus charts; returns written files."""
    results_dir = Path(results_dir)
    table = results_dir / "table.csv"
    if not table.exists():
        raise ConfigError(f"no table.csv in {results_dir}")
    rows = [r for r in _read_rows(table) if r.get("status") == "ok"]
    if not rows:
        raise ConfigError("no successful cells to report")
    policies = [p for p in POLICY_ORDER[::-1] if f"{p}_mean_cost_Kmin" in rows[0] and rows[0][f"{p}_mean_cost_Kmin"]]
    written = []
    for key, label in (("route", "route"), ("capacity_kW", "unit capacity (kW)"), ("h_W_per_m2K", "h (W/m2K)")):
        levels = list(dict.fromkeys(r[key] for r in rows))
        agg = []
        for lev in levels:
            sub = [r for r in rows if r[key] == lev]
            agg.append({key: lev, "cells": len(sub),
                        **{f"{p}_mean_cost_Kmin": f"{_mean([float(r[f'{p}_mean_cost_Kmin']) for r in sub]):.9f}"
                           for p in policies}})
        out = results_dir / f"report_by_{key}.csv"
        _write_rows(out, agg)
        written.append(out)
        series = {p.upper(): [float(a[f"{p}_mean_cost_Kmin"]) for a in agg] for p in policies}
        if key == "route":
            text = svg.bar_chart(levels, series, "average cost by route", label, "cost (K min)", log_y)
        else:
            xs = [float(v) for v in levels]
            text = svg.line_chart({k: (xs, v) for k, v in series.items()}, f"average cost by {label}", label,
                                  "cost (K min)", log_y)
        svg.save(text, results_dir / f"report_by_{key}.svg")
        written.append(results_dir / f"report_by_{key}.svg")

    voi = sorted((results_dir / "cells").glob("*/voi.csv"))
    if voi:
        agg: dict[str, list[float]] = {}
        for f in voi:
            for r in _read_rows(f):
                agg.setdefault(r["variant"], []).append(float(r["mean_cost_Kmin"]))
        vrows = [{"variant": k, "cells": len(v), "mean_cost_Kmin": f"{_mean(v):.9f}"} for k, v in agg.items()]
        _write_rows(results_dir / "report_voi.csv", vrows)
        svg.save(svg.bar_chart(list(agg), {"SP": [_mean(v) for v in agg.values()]}, "value of information",
                               "randomness", "cost (K min)", log_y), results_dir / "report_voi.svg")
        written += [results_dir / "report_voi.csv", results_dir / "report_voi.svg"]

    for f in sorted((results_dir / "cells").glob("*/frontier.csv")):
        fr = _read_rows(f)
        series = {}
        for pol in dict.fromkeys(r["policy"] for r in fr):
            pts = [(float(r["budget_L"]), float(r["mean_cost_Kmin"])) for r in fr if r["policy"] == pol]
            series[pol.upper()] = ([p[0] for p in pts], [p[1] for p in pts])
        out = results_dir / f"frontier_{f.parent.name}.svg"
        svg.save(svg.line_chart(series, f"fuel frontier {f.parent.name}", "fuel budget (L)", "cost (K min)",
                                log_y), out)
        written.append(out)
    return written

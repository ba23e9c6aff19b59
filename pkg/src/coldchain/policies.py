"""Control policies (SP, RLP, CLV, H1, H2) and the out-of-sample evaluator.

Every policy is turned into a controller for ``simulate_trajectory`` so that
all of them are scored by the same simulator on the same scenarios.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .formulation import RouteModel, build_horizon_lp, horizon_plan
from .instance import DRIVING, RouteInstance
from .lp import OPTIMAL, LpError, solve
from .power import PowerModel, full_capacity_setpoint
from .scenario import ScenarioModel, ScenarioPath
from .sddp import SDDP
from .thermo import ThermalState, Trajectory, simulate_trajectory

log = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9  # K*min below which a scenario counts as violation free
POLICY_ORDER = ("clv", "sp", "rlp", "h2", "h1")


# -- heuristic rules --------------------------------------------------------------

@dataclass(frozen=True)
class HeuristicParams:
    lambda1: float = 0.5
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


def h1_state(T_air: float, lower, upper, previous: bool, lambda1: float = 0.5) -> bool:
    """Air-only hysteresis rule."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if T_air > np.min(lower + lambda1 * (upper - lower)):
        return True
    return bool(previous and T_air > np.max(lower))


def h2_state(T_air: float, temps, lower, upper, previous: bool, lambda1: float = 0.5,
             lambda2: float = 1.0) -> bool:
    """Air and product hysteresis rule; each comparison is taken per product."""
    temps = np.asarray(temps, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    above_floor = np.min(temps - lower) > 0
    air_hot = T_air > np.min(lower + lambda1 * (upper - lower))
    product_hot = np.max((temps - lower) - lambda2 * (upper - lower)) > 0
    if (air_hot or product_hot) and above_floor:
        return True
    return bool(previous and above_floor and T_air > np.max(lower))


class HeuristicController:
    """On/off controller; when on the unit runs at full capacity."""

    def __init__(self, instance: RouteInstance, power: PowerModel, params: HeuristicParams, which: str):
        if which not in ("h1", "h2"):
            raise ValueError(f"unknown heuristic {which!r}")
        self.instance = instance
        self.power = power
        self.params = params
        self.which = which
        self.lower = np.array([instance.pallet_class(p).T_lower for p in instance.pallets])
        self.upper = np.array([instance.pallet_class(p).T_upper for p in instance.pallets])
        self.on = False

    def __call__(self, s: int, k: int, state: ThermalState) -> float:
        if k == 0:
            self.on = False  # the unit is off while the doors are open
        board = ~np.isnan(state.products)
        lo, hi = self.lower[board], self.upper[board]
        if self.which == "h1":
            on = h1_state(state.air, lo, hi, self.on, self.params.lambda1)
        else:
            on = h2_state(state.air, state.products[board], lo, hi, self.on, self.params.lambda1,
                          self.params.lambda2)
        self.on = on
        if not on:
            return state.air
        th = self.instance.thermo
        T_ext = self.instance.stops[s - 1].ext_temps[k]
        T = full_capacity_setpoint(self.power.model_for(T_ext), state.air, th.refrigerant_floor, th.unit_capacity)
        return min(T, state.air)


def run_heuristic(instance: RouteInstance, path: ScenarioPath, power: PowerModel, params: HeuristicParams,
                  which: str) -> Trajectory:
    ctrl = HeuristicController(instance, power, params, which)
    return simulate_trajectory(instance, path, ctrl, power=power.surrogate)


# -- optimization-based controllers ----------------------------------------------

def _z0(model: RouteModel, s: int, state: ThermalState) -> np.ndarray:
    idx = model.instance.pallet_index
    ids = model.layouts[s].drive_ids
    return np.concatenate([[state.air], state.products[[idx[p] for p in ids]]])


class PlanController:
    """Applies a per-stage plan computed at the first driving slot of each stage."""

    def __init__(self, model: RouteModel, planner: Callable[[int, ThermalState], np.ndarray]):
        self.model = model
        self.planner = planner
        self.plan: np.ndarray | None = None
        self.predicted = 0.0

    def __call__(self, s: int, k: int, state: ThermalState) -> float:
        if k == 0:
            self.plan = np.asarray(self.planner(s, state), dtype=float)
        T = float(self.plan[k])
        # the LP meets floor and no-heating up to solver tolerance
        return min(max(T, self.model.Gamma), state.air)


def sp_controller(solver: SDDP) -> PlanController:
    model = solver.model

    def planner(s, state):
        sol = solver.stages[s].solve(_z0(model, s, state), state.fuel)
        return sol.Tcu

    return PlanController(model, planner)


def rlp_decide(model: RouteModel, s: int, z0: np.ndarray, expected: dict[int, np.ndarray], F: float = 0.0):
    """Stage-s cooling plan from the deterministic lookahead with future noise at its expectation."""
    h = build_horizon_lp(model, s, z0, {t: expected[t] for t in range(s + 1, model.S + 1)}, F)
    sol = solve(h.lp)
    if sol.status != OPTIMAL:
        raise LpError(f"lookahead LP from stage {s}: {sol.status}")
    Tcu, W, air = horizon_plan(model, h, sol.x, s)
    return Tcu, sol.objective


def expected_noise(scenarios: ScenarioModel) -> dict[int, np.ndarray]:
    return {s: scenarios.expected_xi(s) for s in scenarios.stages}


def rlp_controller(model: RouteModel, expected: dict[int, np.ndarray]) -> PlanController:
    def planner(s, state):
        return rlp_decide(model, s, _z0(model, s, state), expected, state.fuel)[0]

    return PlanController(model, planner)


@dataclass
class ClairvoyantSolution:
    cost: float       # violation cost, K*min
    overrun: float    # fuel above budget, L
    plan: np.ndarray  # cooling-fluid temperatures for every driving slot


def clv_solve(model: RouteModel, path: ScenarioPath) -> ClairvoyantSolution:
    """Full-horizon LP with the realized noise."""
    inst = model.instance
    xis = {s: path.xi(inst, s) for s in range(2, model.S + 1)}
    h = build_horizon_lp(model, 1, model.initial_state(), xis)
    sol = solve(h.lp)
    if sol.status != OPTIMAL:
        raise LpError(f"clairvoyant LP: {sol.status}")
    mu = float(sol.x[h.mu]) if h.mu is not None else 0.0
    plan = np.concatenate([horizon_plan(model, h, sol.x, s)[0] for s in range(1, model.S + 1)])
    return ClairvoyantSolution(sol.objective - model.penalty * mu, mu, plan)


def clv_cost(model: RouteModel, path: ScenarioPath) -> float:
    return clv_solve(model, path).cost


def clv_controller(model: RouteModel, path: ScenarioPath) -> PlanController:
    plan = clv_solve(model, path).plan
    offsets = np.cumsum([0] + list(model.instance.grid.driving_slots))
    return PlanController(model, lambda s, state: plan[offsets[s - 1]:offsets[s]])


# -- evaluation ---------------------------------------------------------------------

@dataclass
class ScenarioOutcome:
    policy: str
    scenario: int
    cost: float          # K*min
    fuel: float          # L
    on_fraction: float   # share of driving slots with the unit on
    mean_power: float    # W, averaged over on slots
    overrun: float       # L above the budget (0 without budget)
    seconds: float

    @property
    def violated(self) -> bool:
        return self.cost > VIOLATION_TOL


@dataclass
class PolicyResult:
    policy: str
    outcomes: list[ScenarioOutcome] = field(default_factory=list)

    def _arr(self, name):
        return np.array([getattr(o, name) for o in self.outcomes], dtype=float)

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def costs(self) -> np.ndarray:
        return self._arr("cost")

    @property
    def mean(self) -> float:
        return float(self.costs.mean())

    @property
    def se(self) -> float:
        c = self.costs
        return float(c.std(ddof=1) / np.sqrt(len(c))) if len(c) > 1 else 0.0

    @property
    def violation_scenarios(self) -> int:
        return int(sum(o.violated for o in self.outcomes))

    @property
    def mean_fuel(self) -> float:
        return float(self._arr("fuel").mean())

    @property
    def on_fraction(self) -> float:
        return float(self._arr("on_fraction").mean())

    @property
    def mean_power(self) -> float:
        return float(self._arr("mean_power").mean())

    @property
    def max_overrun(self) -> float:
        return float(self._arr("overrun").max()) if self.outcomes else 0.0


def trajectory_outcome(policy: str, k: int, tr: Trajectory, instance: RouteInstance, budget: float | None,
                       seconds: float) -> ScenarioOutcome:
    drive = tr.phase == DRIVING
    on = tr.on[drive]
    fuel = tr.fuel_liters(instance.thermo.fuel_conversion)
    mean_power = float(tr.W[drive][on].mean()) if on.any() else 0.0
    overrun = max(0.0, fuel - budget) if budget is not None else 0.0
    return ScenarioOutcome(policy, k, tr.cost_Kmin, fuel, float(on.mean()), mean_power, overrun, seconds)


@dataclass
class EvaluationSetup:
    """Everything the evaluator needs; policies are built lazily from it."""

    instance: RouteInstance
    power: PowerModel
    scenarios: ScenarioModel
    solver: SDDP | None = None
    budget: float | None = None
    heuristic: HeuristicParams = field(default_factory=HeuristicParams)

    def __post_init__(self):
        self.model = RouteModel(self.instance, self.power, budget=self.budget)
        self._expected = None

    @property
    def expected(self) -> dict[int, np.ndarray]:
        if self._expected is None:
            self._expected = expected_noise(self.scenarios)
        return self._expected

    def controller(self, policy: str, path: ScenarioPath):
        if policy == "sp":
            if self.solver is None:
                raise ValueError("the SP policy needs a trained value function")
            return sp_controller(self.solver)
        if policy == "rlp":
            return rlp_controller(self.model, self.expected)
        if policy == "clv":
            return clv_controller(self.model, path)
        if policy in ("h1", "h2"):
            return HeuristicController(self.instance, self.power, self.heuristic, policy)
        raise ValueError(f"unknown policy {policy!r}")

    def run(self, policy: str, path: ScenarioPath) -> Trajectory:
        return simulate_trajectory(self.instance, path, self.controller(policy, path), power=self.power.surrogate)


def evaluate(setup: EvaluationSetup, policies, paths: list[ScenarioPath]) -> dict[str, PolicyResult]:
    """Simulate each policy on the same scenario list (common random numbers)."""
    out = {}
    for pol in policies:
        res = PolicyResult(pol)
        for k, path in enumerate(paths):
            t0 = time.perf_counter()
            tr = setup.run(pol, path)
            res.outcomes.append(trajectory_outcome(pol, k, tr, setup.instance, setup.budget,
                                                   time.perf_counter() - t0))
        log.info("%s: mean %.4f (se %.4f) over %d scenarios", pol, res.mean, res.se, res.n)
        out[pol] = res
    return out


def lambda2_sweep(instance: RouteInstance, power: PowerModel, paths: list[ScenarioPath],
                  lambdas=tuple(np.round(np.arange(1, 11) / 10, 1)), lambda1: float = 0.5) -> dict[float, PolicyResult]:
    out = {}
    for lam in lambdas:
        params = HeuristicParams(lambda1, float(lam))
        res = PolicyResult(f"h2_l{lam:.1f}")
        for k, path in enumerate(paths):
            t0 = time.perf_counter()
            tr = run_heuristic(instance, path, power, params, "h2")
            res.outcomes.append(trajectory_outcome(res.policy, k, tr, instance, None, time.perf_counter() - t0))
        out[float(lam)] = res
    return out


def best_lambda2(sweep: dict[float, PolicyResult]) -> float:
    """Smallest mean cost; ties go to the larger value (less switching)."""
    return max(sweep, key=lambda lam: (-round(sweep[lam].mean, 9), lam))


# -- CSV output -------------------------------------------------------------------------

RESULT_COLUMNS = ["policy", "scenario", "cost_Kmin", "fuel_L", "on_fraction", "mean_power_W", "overrun_L",
                  "violation"]
SUMMARY_COLUMNS = ["policy", "n_scenarios", "mean_cost_Kmin", "se_cost_Kmin", "mean_fuel_L", "on_fraction",
                   "mean_power_W", "violation_scenarios", "max_overrun_L"]


def write_results_csv(path: str | Path, results: dict[str, PolicyResult], extra: dict | None = None) -> None:
    extra = extra or {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(extra) + RESULT_COLUMNS)
        for pol in results:
            for o in results[pol].outcomes:
                w.writerow(list(extra.values()) + [pol, o.scenario, f"{o.cost:.9f}", f"{o.fuel:.9f}",
                                                   f"{o.on_fraction:.6f}", f"{o.mean_power:.3f}",
                                                   f"{o.overrun:.9f}", int(o.violated)])


def summary_rows(results: dict[str, PolicyResult]) -> list[list]:
    rows = []
    for pol, r in results.items():
        rows.append([pol, r.n, f"{r.mean:.9f}", f"{r.se:.9f}", f"{r.mean_fuel:.9f}", f"{r.on_fraction:.6f}",
                     f"{r.mean_power:.3f}", r.violation_scenarios, f"{r.max_overrun:.9f}"])
    return rows


def write_summary_csv(path: str | Path, results: dict[str, PolicyResult], extra: dict | None = None,
                      append: bool = False) -> None:
    extra = extra or {}
    exists = Path(path).exists() and append
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(list(extra) + SUMMARY_COLUMNS)
        for row in summary_rows(results):
            w.writerow(list(extra.values()) + row)

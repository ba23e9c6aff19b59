"""Stochastic dual dynamic programming over a stage-wise independent lattice.

Stage s covers the door-open phase at stop s-1 (uncontrolled, evaluated in
closed form) and the drive to stop s (an LP).  The state after stage s is
the air temperature, the temperatures of the pallets still on board and,
under a fuel budget, the fuel used so far.  Cuts lower-bound the expected
cost-to-go ``V_s`` as a function of that state.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formulation import (Cut, DrivingStageLP, HandlingResult, RouteModel, StageSolution, assemble_z0, handling,
                          handling_adjoint)
from .lp import LpError
from .scenario import ScenarioLattice, round_to_lattice

log = logging.getLogger(__name__)


class SddpError(RuntimeError):
    pass


@dataclass
class ValueFunction:
    """Cut collections per stage; ``cuts[s]`` bounds the cost-to-go after stage s."""

    cuts: dict[int, list[Cut]]
    meta: dict = field(default_factory=dict)

    def value(self, s: int, x: np.ndarray) -> float:
        cs = self.cuts.get(s, [])
        return max([0.0] + [c.value(np.asarray(x, dtype=float)) for c in cs])

    def n_cuts(self) -> int:
        return sum(len(v) for v in self.cuts.values())

    def to_dict(self) -> dict:
        return {"meta": self.meta, "cuts": {str(s): [c.to_dict() for c in cs] for s, cs in sorted(self.cuts.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> ValueFunction:
        return cls({int(s): [Cut.from_dict(c) for c in cs] for s, cs in d["cuts"].items()}, d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> ValueFunction:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainReport:
    lower_bound: list[float] = field(default_factory=list)
    forward_cost: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.lower_bound)

    def to_csv(self, path: str | Path) -> None:
        """Bounds per iteration; timings are left out so reruns give identical files."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "lower_bound_Kmin", "forward_cost_Kmin"])
            for k, (lb, fc) in enumerate(zip(self.lower_bound, self.forward_cost), start=1):
                w.writerow([k, f"{lb:.9f}", f"{fc:.9f}"])


@dataclass
class StageOutcome:
    cost: float               # handling + driving cost of the stage, K*min
    value: float              # cost plus cut value of the future
    grad: np.ndarray          # d value / d incoming state
    x_out: np.ndarray
    lp: StageSolution
    handling: HandlingResult | None
    z0: np.ndarray


def fuel_floor_cut(model: RouteModel, s: int) -> Cut:
    """V_s >= penalty * (F - B): fuel only accumulates and every other cost is nonnegative.

    Valid from the start, so it is added to the stage LPs up front rather than
    learned; without it early stages see the budget only through sampled cuts
    and can overspend on scenarios the forward passes never visited.
    """
    g = np.zeros(model.state_size(s))
    g[-1] = model.penalty
    return Cut(s, -model.penalty * model.budget, g, 0)


class SDDP:
    """Holds per-stage LPs and the cut pool while training."""

    def __init__(self, model: RouteModel, lattice: ScenarioLattice, screen: bool = True):
        self.model = model
        self.lattice = lattice
        self.stages = {s: DrivingStageLP(model, s, screen=screen) for s in range(1, model.S + 1)}
        self.vf = ValueFunction({s: [] for s in range(1, model.S)},
                                {"instance": model.instance.name, "stages": model.S,
                                 "budget_L": model.budget, "lattice_nodes": {s: lattice.size(s) for s in lattice.stages}})
        self.x0 = model.initial_state()
        for s in range(2, model.S + 1):
            if model.layouts[s].handle_ids != model.layouts[s - 1].out_ids:
                raise SddpError(f"state order mismatch at stage {s}")
        if model.with_budget:
            for s in range(1, model.S):
                self.stages[s].add_cuts([fuel_floor_cut(model, s)])

    # -- one stage --------------------------------------------------------------
    def stage(self, s: int, x_in: np.ndarray | None, xi: np.ndarray | None, F: float = 0.0) -> StageOutcome:
        """Solve stage s from the incoming state (ignored for s=1) under realization xi."""
        m = self.model
        lay = m.layouts[s]
        if s == 1:
            z0 = self.x0
            res = None
        else:
            n_old = len(lay.handle_ids)
            res = handling(m, s, float(x_in[0]), np.asarray(x_in[1:1 + n_old]), float(xi[0]))
            z0 = assemble_z0(m, s, res.z_air, res.z_old, np.asarray(xi[1:], dtype=float))
        try:
            sol = self.stages[s].solve(z0, F)
        except LpError as e:
            raise SddpError(f"stage {s}: {e}") from e
        h_cost = res.cost if res is not None else 0.0
        value = h_cost + sol.value
        if s == 1:
            grad = np.zeros(0)
        else:
            g = handling_adjoint(res, sol.grad_z[0], sol.grad_z[1 + lay.old_positions])
            grad = np.concatenate([g, [sol.grad_F]]) if m.with_budget else g
        cost = h_cost + sol.driving_cost
        return StageOutcome(cost, value, grad, sol.x_out, sol, res, z0)

    def _fuel(self, x: np.ndarray) -> float:
        return float(x[-1]) if self.model.with_budget else 0.0

    # -- passes -----------------------------------------------------------------
    def forward_pass(self, rng: np.random.Generator):
        """Sample one lattice path; returns (visited states x_1..x_{S-1}, path cost, stage-1 value)."""
        states = []
        out = self.stage(1, None, None, 0.0)
        lb = out.value
        cost = out.cost
        x = out.x_out
        states.append(x)
        for s in range(2, self.model.S + 1):
            k = int(rng.choice(self.lattice.size(s), p=self.lattice.probs[s]))
            out = self.stage(s, x, self.lattice.nodes[s][k], self._fuel(x))
            cost += out.cost + self.model.penalty * out.lp.overrun
            x = out.x_out
            if s < self.model.S:
                states.append(x)
        return states, cost, lb

    def expected_cut(self, s: int, x: np.ndarray, iteration: int = 0) -> Cut:
        """Averaged cut for V_{s-1} at state x from all lattice nodes of stage s."""
        vals, grads = [], []
        for xi in self.lattice.nodes[s]:
            out = self.stage(s, x, xi, self._fuel(x))
            vals.append(out.value)
            grads.append(out.grad)
        p = np.asarray(self.lattice.probs[s], dtype=float)
        v = float(p @ np.array(vals))
        g = p @ np.array(grads)
        return Cut(s - 1, v - float(g @ x), g, iteration)

    def backward_pass(self, states: list[np.ndarray], iteration: int = 0) -> list[Cut]:
        new = []
        for s in range(self.model.S, 1, -1):
            cut = self.expected_cut(s, states[s - 2], iteration)
            self.add_cut(cut)
            new.append(cut)
        return new

    def add_cut(self, cut: Cut) -> None:
        self.vf.cuts[cut.stage].append(cut)
        self.stages[cut.stage].add_cuts([cut])

    def lower_bound(self) -> float:
        return self.stage(1, None, None, 0.0).value

    def train(self, iterations: int, seed: int = 0, time_limit: float | None = None) -> TrainReport:
        rng = np.random.default_rng(seed)
        rep = TrainReport()
        t0 = time.perf_counter()
        for it in range(1, iterations + 1):
            states, cost, _ = self.forward_pass(rng)
            self.backward_pass(states, it)
            lb = self.lower_bound()
            rep.lower_bound.append(lb)
            rep.forward_cost.append(cost)
            rep.seconds.append(time.perf_counter() - t0)
            log.debug("iteration %d lower bound %.6f forward %.6f", it, lb, cost)
            if time_limit is not None and rep.seconds[-1] > time_limit:
                break
        self.vf.meta["iterations"] = rep.iterations
        return rep

    def load_cuts(self, vf: ValueFunction) -> None:
        for s, cs in vf.cuts.items():
            for c in cs:
                self.add_cut(c)
        self.vf.meta.update({k: v for k, v in vf.meta.items() if k not in self.vf.meta})


def train(model: RouteModel, lattice: ScenarioLattice, iterations: int, seed: int = 0):
    """Run SDDP; returns the value function and the per-iteration report."""
    solver = SDDP(model, lattice)
    rep = solver.train(iterations, seed)
    return solver.vf, rep


@dataclass
class StageDecision:
    Tcu: np.ndarray           # kelvin, per driving slot of the stage
    W: np.ndarray | None
    predicted_cost: float     # handling + driving cost the LP anticipates
    node: int | None          # lattice node the realization rounds to (None for stage 1)
    x_out: np.ndarray


def sp_decide(solver: SDDP, s: int, x_in: np.ndarray | None, xi: np.ndarray, F: float = 0.0) -> StageDecision:
    """Stage-s decision for the realized xi with the trained cost-to-go.

    The feasible set uses the realization itself.  The lattice node it rounds
    to is reported, though with stage-wise independence the cost-to-go does
    not depend on it.
    """
    out = solver.stage(s, x_in, xi, F)
    node = round_to_lattice(solver.lattice, s, xi) if s >= 2 else None
    return StageDecision(out.lp.Tcu, out.lp.W, out.cost, node, out.x_out)

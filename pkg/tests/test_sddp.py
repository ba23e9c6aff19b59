import time

import numpy as np
import pytest

from coldchain.formulation import RouteModel, build_extensive_form, build_horizon_lp
from coldchain.instance import builtin_instance
from coldchain.lp import solve
from coldchain.policies import EvaluationSetup, sp_controller
from coldchain.power import fit_power_model
from coldchain.scenario import ScenarioModel, ScenarioPath, build_lattice
from coldchain.sddp import SDDP, ValueFunction, fuel_floor_cut, sp_decide
from coldchain.thermo import simulate_trajectory

from oracles import two_stage_extensive_form
from toys import toy_instance, toy_lattice


@pytest.fixture(scope="module")
def toy():
    inst = toy_instance()
    power = fit_power_model(inst, K=4, restarts=4)
    return inst, power, toy_lattice()


def ef_nodes(lat):
    return [(float(v[0]), {"b": float(v[1])}) for v in lat.nodes[2]], list(lat.probs[2])


def node_paths(lat):
    return [ScenarioPath({2: float(v[0])}, {"b": float(v[1])}) for v in lat.nodes[2]]


def policy_cost(inst, power, solver, lat):
    costs = [simulate_trajectory(inst, p, sp_controller(solver), power=power.surrogate).cost_Kmin
             for p in node_paths(lat)]
    return float(np.dot(lat.probs[2], costs))


@pytest.mark.parametrize("budget", [None, 0.003, 0.001])
def test_toy_matches_extensive_form(toy, budget):
    inst, power, lat = toy
    t0 = time.perf_counter()
    model = RouteModel(inst, power, budget=budget)
    solver = SDDP(model, lat)
    rep = solver.train(10, seed=0)
    nodes, probs = ef_nodes(lat)
    ef = two_stage_extensive_form(inst, power, nodes, probs, budget=budget, penalty=model.penalty)
    assert rep.lower_bound[-1] == pytest.approx(ef, rel=1e-4)
    # every bound on the way is below the optimum
    assert max(rep.lower_bound) <= ef * (1 + 1e-7)
    if budget is None:
        assert policy_cost(inst, power, solver, lat) == pytest.approx(ef, rel=1e-4)
    # the package's own extensive form agrees with the independent one
    assert solve(build_extensive_form(model, lat).lp).objective == pytest.approx(ef, rel=1e-7)
    assert time.perf_counter() - t0 < 5.0


def test_lower_bound_monotone(toy):
    inst, power, lat = toy
    rep = SDDP(RouteModel(inst, power), lat).train(8, seed=3)
    assert np.all(np.diff(rep.lower_bound) >= -1e-7)


def test_cuts_are_valid(toy):
    """Cut values never exceed the exact expected cost of the last stage."""
    inst, power, lat = toy
    solver = SDDP(RouteModel(inst, power), lat)
    solver.train(6, seed=1)
    x1 = solver.stage(1, None, None).x_out
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = x1 + rng.normal(scale=[1.5, 0.8], size=2)
        exact = sum(p * solver.stage(2, x, xi).value for xi, p in zip(lat.nodes[2], lat.probs[2]))
        assert solver.vf.value(1, x) <= exact + 1e-5


def test_fuel_floor_cut_is_valid(toy):
    inst, power, lat = toy
    B = 0.003
    model = RouteModel(inst, power, budget=B)
    solver = SDDP(model, lat)
    cut = fuel_floor_cut(model, 1)
    x1 = solver.stage(1, None, None).x_out
    rng = np.random.default_rng(4)
    for F in np.concatenate([rng.uniform(0, 2 * B, 50), [B]]):
        x = x1.copy()
        x[-1] = F
        exact = sum(p * solver.stage(2, x, xi, F).value for xi, p in zip(lat.nodes[2], lat.probs[2]))
        assert cut.value(x) <= exact + 1e-7


def test_single_node_lattice_is_deterministic_lp():
    inst = builtin_instance("r4").with_params(h=4.0, unit_capacity=12000.0)
    power = fit_power_model(inst, K=3, restarts=1)
    scen = ScenarioModel.for_instance(inst)
    lat = build_lattice(scen, 1, 500, np.random.default_rng(0))
    model = RouteModel(inst, power)
    rep = SDDP(model, lat).train(12, seed=0)
    xis = {s: lat.nodes[s][0] for s in lat.stages}
    det = solve(build_horizon_lp(model, 1, model.initial_state(), xis).lp).objective
    assert rep.lower_bound[-1] == pytest.approx(det, rel=1e-6, abs=1e-6)


@pytest.fixture(scope="module")
def r4_trained():
    inst = builtin_instance("r4").with_params(h=4.0, unit_capacity=12000.0)
    power = fit_power_model(inst, K=3, restarts=1)
    scen = ScenarioModel.for_instance(inst)
    lat = build_lattice(scen, 5, 300, np.random.default_rng(1))
    solver = SDDP(RouteModel(inst, power), lat)
    solver.train(6, seed=2)
    return inst, power, scen, solver


def test_non_anticipativity(r4_trained):
    inst, power, scen, solver = r4_trained
    path = scen.scenarios(seed=5, n=1)[0]
    other = scen.scenarios(seed=6, n=1)[0]
    k = 3
    # same history up to stage k, different future
    mixed = ScenarioPath({s: (path if s <= k else other).door_times[s] for s in path.door_times},
                         {p: (path.temps[p] if inst.pallet_by_id[p].load_stop < k else other.temps[p])
                          for p in path.temps})
    a = simulate_trajectory(inst, path, sp_controller(solver), power=power.surrogate)
    b = simulate_trajectory(inst, mixed, sp_controller(solver), power=power.surrogate)
    upto = a.stage <= k
    assert np.array_equal(a.T_cu[upto], b.T_cu[upto])


def test_decisions_admissible(r4_trained):
    inst, power, scen, solver = r4_trained
    setup = EvaluationSetup(inst, power, scen, solver=solver)
    for path in scen.scenarios(seed=7, n=3):
        tr = setup.run("sp", path)
        d = tr.phase == "driving"
        assert np.all(tr.T_cu[d] >= inst.thermo.refrigerant_floor - 1e-6)
        assert np.all(tr.T_cu[d] <= tr.T_air[d] + 1e-9)


def test_sp_decide_at_node_equals_in_sample(r4_trained):
    _, _, _, solver = r4_trained
    x = solver.stage(1, None, None).x_out
    xi = solver.lattice.nodes[2][1]
    d = sp_decide(solver, 2, x, xi)
    assert d.node == 1
    assert np.array_equal(d.Tcu, solver.stage(2, x, xi).lp.Tcu)


def test_value_function_round_trip(tmp_path, r4_trained):
    inst, power, _, solver = r4_trained
    solver.vf.save(tmp_path / "cuts.json")
    vf = ValueFunction.load(tmp_path / "cuts.json")
    assert vf.n_cuts() == solver.vf.n_cuts()
    fresh = SDDP(RouteModel(inst, power), solver.lattice)
    fresh.load_cuts(vf)
    assert fresh.lower_bound() == pytest.approx(solver.lower_bound(), rel=1e-12)


def test_train_report_csv_is_reproducible(tmp_path, toy):
    inst, power, lat = toy
    for name in ("a.csv", "b.csv"):
        SDDP(RouteModel(inst, power), lat).train(4, seed=9).to_csv(tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


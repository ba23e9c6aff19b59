import numpy as np
import pytest

from coldchain.formulation import (Cut, DrivingStageLP, RouteModel, build_horizon_lp, build_stage_lp, handling,
                                   handling_adjoint, horizon_plan)
from coldchain.instance import builtin_instance
from coldchain.lp import OPTIMAL, solve
from coldchain.power import fit_power_model
from coldchain.scenario import ScenarioModel, ScenarioPath, build_lattice
from coldchain.sddp import SDDP
from coldchain.thermo import simulate_trajectory

from toys import toy_instance


@pytest.fixture(scope="module")
def toy():
    inst = toy_instance()
    power = fit_power_model(inst, K=3, restarts=2)
    return inst, power


@pytest.fixture(scope="module")
def r4():
    inst = builtin_instance("r4").with_params(h=4.0, unit_capacity=12000.0)
    power = fit_power_model(inst, K=4, restarts=2)
    return inst, power, ScenarioModel.for_instance(inst)


def test_two_slot_stage_hand_count():
    inst = toy_instance(drive=(2, 2), handling_slots=2)
    power = fit_power_model(inst, K=2, restarts=1)
    model = RouteModel(inst, power)
    K = model.layouts[2].planes.shape[1]
    n = len(model.layouts[2].drive_ids)
    lp, _ = DrivingStageLP(model, 2, screen=False).build(np.array([279.0, 276.0, 275.5]))
    # copy 1+n, air 2, q 2, class sum 1, nu 2n, end n, T_cu 2
    assert lp.n_cols == 8 + 4 * n
    # copy 1+n, class sum 1, air 2, q 2, nu rows 4n, end n, no-heating 2, capacity 2K
    assert lp.n_rows == 8 + 6 * n + 2 * K


def test_last_stage_has_no_future(toy):
    inst, power = toy
    model = RouteModel(inst, power)
    st = build_stage_lp(model, model.S, np.array([900.0, 276.0]), [], np.array([278.0, 276.5]))
    assert st.theta is None
    with pytest.raises(Exception):
        DrivingStageLP(model, model.S).add_cuts([Cut(model.S, 0.0, np.zeros(2))])


def test_no_cuts_future_is_zero(toy):
    inst, power = toy
    model = RouteModel(inst, power)
    sol = DrivingStageLP(model, 1).solve(model.initial_state())
    assert sol.theta == pytest.approx(0.0, abs=1e-9)
    assert sol.value == pytest.approx(sol.driving_cost, abs=1e-9)


def test_screening_is_exact(r4):
    inst, power, _ = r4
    model = RouteModel(inst, power)
    rng = np.random.default_rng(0)
    for s in (1, 2, 3):
        n = len(model.layouts[s].drive_ids)
        for _ in range(5):
            z0 = np.concatenate([[rng.uniform(274, 284)], rng.uniform(273, 279, size=n)])
            a = DrivingStageLP(model, s, screen=True).solve(z0)
            b = DrivingStageLP(model, s, screen=False).solve(z0)
            assert a.value == pytest.approx(b.value, rel=1e-7, abs=1e-7)
            assert np.allclose(a.grad_z, b.grad_z, rtol=1e-5, atol=1e-6)


def test_closed_form_handling_matches_stage_lp(r4):
    inst, power, scen = r4
    model = RouteModel(inst, power)
    solver = SDDP(model, build_lattice(scen, 2, 50, np.random.default_rng(0)))
    x = solver.stage(1, None, None).x_out
    rng = np.random.default_rng(1)
    for s in (2, 3):
        xi = scen.sample_stage(s, rng, 1)[0]
        fast = solver.stage(s, x, xi)
        full = build_stage_lp(model, s, xi, [], x)
        sol = solve(full.lp)
        assert sol.status == OPTIMAL
        assert sol.objective == pytest.approx(fast.value, rel=1e-7, abs=1e-7)
        assert np.allclose(sol.duals[full.copy_rows], fast.grad, rtol=1e-4, atol=1e-6)
        x = fast.x_out


def test_handling_adjoint_finite_difference(r4):
    inst, power, _ = r4
    model = RouteModel(inst, power)
    s = 3
    lay = model.layouts[s]
    n = len(lay.handle_ids)
    rng = np.random.default_rng(2)
    x = np.concatenate([[279.3], rng.uniform(276.2, 278.5, size=n)])
    lam_air, lam_old = 0.7, rng.normal(size=n)

    def f(v):
        r = handling(model, s, v[0], v[1:], 1500.0)
        return r.cost + lam_air * r.z_air + lam_old @ r.z_old

    g = handling_adjoint(handling(model, s, x[0], x[1:], 1500.0), lam_air, lam_old)
    # the cost is piecewise linear; a small step stays clear of the kinks
    h = 1e-5
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(n + 1)])
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-5)


def test_horizon_plan_simulates_to_lp_cost(r4):
    inst, power, scen = r4
    model = RouteModel(inst, power)
    path = scen.scenarios(seed=4, n=1)[0]
    xis = {s: path.xi(inst, s) for s in range(2, model.S + 1)}
    h = build_horizon_lp(model, 1, model.initial_state(), xis)
    sol = solve(h.lp)
    plan = np.concatenate([horizon_plan(model, h, sol.x, s)[0] for s in range(1, model.S + 1)])
    tr = simulate_trajectory(inst, path, _no_heat(plan, inst), power=power.surrogate)
    assert tr.cost_Kmin == pytest.approx(sol.objective, rel=1e-6, abs=1e-6)
    unscreened = solve(build_horizon_lp(model, 1, model.initial_state(), xis, screen=False).lp)
    assert unscreened.objective == pytest.approx(sol.objective, rel=1e-7, abs=1e-7)


def _no_heat(plan, inst):
    """Apply the plan, clipping LP round-off above the current air temperature."""
    offsets = np.cumsum([0] + list(inst.grid.driving_slots))
    return lambda s, k, state: min(plan[offsets[s - 1] + k], state.air)


def test_path_from_xi_round_trip(r4):
    inst, _, scen = r4
    path = scen.scenarios(seed=1, n=1)[0]
    again = ScenarioPath.from_xi(inst, {s: path.xi(inst, s) for s in scen.stages})
    assert again == path

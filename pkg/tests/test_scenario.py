import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coldchain.instance import builtin_instance
from coldchain.scenario import (DoorTimeModel, ScenarioLattice, ScenarioModel, TempSampler, build_lattice,
                                cluster_samples, kmeans, latent_correlation, load_residual_pool,
                                read_scenarios_csv, required_handling_slots, residual_autocorrelation,
                                round_to_lattice, sample_door_time, sample_initial_temps, split_by_route,
                                write_lattice_csv, write_scenarios_csv)

PAIR = TempSampler(np.array([274.0, 274.0]), np.array([277.0, 277.0]))


@pytest.fixture(scope="module")
def r1_model():
    return ScenarioModel.for_instance(builtin_instance("r1"))


def test_latent_correlation_value():
    assert latent_correlation(0.8) == pytest.approx(0.8135, abs=1e-4)


def test_pair_correlation_and_bounds():
    x = PAIR.sample(np.random.default_rng(0), 100_000)
    r = np.corrcoef(x[:, 0], x[:, 1])[0, 1]
    assert 0.75 <= r <= 0.85
    assert x.min() >= 274.0 and x.max() <= 277.0


def test_marginals_uniform_ks():
    x = PAIR.sample(np.random.default_rng(1), 10_000)
    for j in range(2):
        assert stats.kstest((x[:, j] - 274.0) / 3.0, "uniform").pvalue > 0.01


def test_single_pallet_uniform():
    one = TempSampler(np.array([274.0]), np.array([277.0]))
    x = one.sample(np.random.default_rng(2), 20_000)[:, 0]
    assert x.min() >= 274.0 and x.max() <= 277.0
    assert stats.kstest((x - 274.0) / 3.0, "uniform").pvalue > 0.01
    assert sample_initial_temps(one, np.random.default_rng(2)).shape == (1,)


def flat_model(residuals):
    return DoorTimeModel(intercept=float(np.log(600.0)), lm_coef=0.0, residuals=np.asarray(residuals, dtype=float))


def test_door_time_two_point_residuals():
    m = flat_model([-0.1, 0.1])
    x = m.sample({"loaded_meters": 0.0}, np.random.default_rng(3), 20_000)
    vals = np.unique(np.round(x, 1))
    assert np.allclose(vals, [542.9, 663.1])
    assert abs(np.mean(x > 600) - 0.5) < 0.02
    assert m.expected({"loaded_meters": 0.0}) == pytest.approx(300 * (np.exp(-0.1) + np.exp(0.1)))


def test_door_time_degenerate_pool():
    m = flat_model([0.0, 0.0, 0.0])
    assert sample_door_time(m, {"loaded_meters": 0.0}, np.random.default_rng(0)) == pytest.approx(600.0)


@given(st.floats(0.0, 20.0), st.floats(0.0, 20.0))
def test_door_time_monotone_in_loaded_meters(a, b):
    m = DoorTimeModel.from_config(builtin_instance("r1").door_time)
    assert m.lm_coef > 0
    lo, hi = sorted((a, b))
    assert m.predict_log({"loaded_meters": lo}) <= m.predict_log({"loaded_meters": hi})


def test_residual_pool_calibration():
    res, routes = load_residual_pool()
    assert len(res) == len(routes)
    assert abs(res.mean()) < 1e-9
    # stop-time dispersion of the order of a quarter hour at typical stops
    inst = builtin_instance("r1")
    m = DoorTimeModel.from_config(inst.door_time)
    sd_min = [np.exp(m.predict_log(m.features(inst, s))) * np.exp(res).std() / 60 for s in range(1, inst.n_stages)]
    assert 5.0 < np.median(sd_min) < 30.0


def test_residual_autocorrelation_examples():
    rng = np.random.default_rng(4)
    b1, (lo, hi) = residual_autocorrelation([rng.normal(size=10_000)])
    assert lo <= 0.0 <= hi
    b1, _ = residual_autocorrelation([np.arange(10.0)])
    assert b1 == pytest.approx(1.0)
    b1, _ = residual_autocorrelation([np.array([1.0, -1.0] * 10)])
    assert b1 == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        residual_autocorrelation([np.array([1.0, 2.0])])


def test_shipped_residuals_not_autocorrelated():
    res, routes = load_residual_pool()
    _, (lo, hi) = residual_autocorrelation(split_by_route(res, routes))
    assert lo <= 0.0 <= hi


def test_stage_dimensions(r1_model):
    inst = r1_model.instance
    rng = np.random.default_rng(5)
    for s in r1_model.stages:
        x = r1_model.sample_stage(s, rng, 7)
        assert x.shape == (7, 1 + len(inst.loaded_at(s - 1)))
        assert np.all(x[:, 0] > 0)
        assert r1_model.expected_xi(s).shape == (x.shape[1],)


def test_scenarios_reproducible_and_prefix_stable(r1_model):
    a = r1_model.scenarios(seed=9, n=5)
    b = r1_model.scenarios(seed=9, n=8)
    assert a == b[:5]
    assert a != r1_model.scenarios(seed=10, n=5)


def test_fixed_variants(r1_model):
    inst = r1_model.instance
    fixed = ScenarioModel.for_instance(inst, fix_door_times=True, fix_temps=True)
    p = fixed.sample_path(np.random.default_rng(0))
    for s in fixed.stages:
        assert np.allclose(p.xi(inst, s), fixed.expected_xi(s))


def test_handling_slots_cover_longest_door_time(r1_model):
    inst = r1_model.instance
    for s in r1_model.stages:
        need = required_handling_slots(inst, r1_model, s)
        # shipped instances are built with exactly this rule at the most demanding heat-transfer setting
        assert inst.grid.handling_slots[s - 1] >= need


def test_lattice_m1_is_mean(r1_model):
    rng = np.random.default_rng(6)
    samples = r1_model.sample_stage(2, np.random.default_rng(6), 500)
    nodes, probs, _, _ = cluster_samples(samples, 1, rng)
    assert np.allclose(nodes[0], samples.mean(axis=0))
    assert probs.tolist() == [1.0]


def test_lattice_m_equals_n():
    X = np.random.default_rng(7).normal(size=(40, 3))
    nodes, probs, _, _ = cluster_samples(X, 40, np.random.default_rng(0))
    assert np.allclose(np.sort(nodes, axis=0), np.sort(X, axis=0))
    assert np.allclose(probs, 1 / 40)


def test_kmeans_sse_monotone():
    X = np.random.default_rng(8).normal(size=(3000, 3))
    _, labels, trace = kmeans(X, 25, np.random.default_rng(1))
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])
    assert len(np.unique(labels)) == 25


def test_build_lattice_probabilities(r1_model):
    lat = build_lattice(r1_model, 30, 3000, np.random.default_rng(2))
    assert lat.stages == list(r1_model.stages)
    for s in lat.stages:
        assert abs(lat.probs[s].sum() - 1.0) <= 1e-12
        assert lat.size(s) <= 30
        assert lat.nodes[s].shape[1] == r1_model.dim(s)
    with pytest.raises(ValueError):
        build_lattice(r1_model, 0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_lattice(r1_model, 20, 10, np.random.default_rng(0))


def one_dim_lattice(values):
    v = np.asarray(values, dtype=float)[:, None]
    return ScenarioLattice({2: v}, {2: np.full(len(v), 1 / len(v))}, {2: np.ones(1)})


def test_rounding_examples():
    lat = one_dim_lattice([600.0, 1200.0])
    assert round_to_lattice(lat, 2, [720.0]) == 0
    assert round_to_lattice(lat, 2, [1200.0]) == 1
    assert round_to_lattice(lat, 2, [900.0]) == 0


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=20), st.floats(0, 1e4))
def test_rounding_idempotent(values, x):
    lat = one_dim_lattice(values)
    k = round_to_lattice(lat, 2, [x])
    assert round_to_lattice(lat, 2, lat.nodes[2][k]) == k


def test_lattice_round_trip(tmp_path, r1_model):
    lat = build_lattice(r1_model, 5, 200, np.random.default_rng(3))
    lat.save(tmp_path / "lat.json")
    back = ScenarioLattice.load(tmp_path / "lat.json")
    for s in lat.stages:
        assert np.array_equal(back.nodes[s], lat.nodes[s])
        assert np.array_equal(back.probs[s], lat.probs[s])
    write_lattice_csv(tmp_path / "lat.csv", lat)
    lines = (tmp_path / "lat.csv").read_text().splitlines()
    assert lines[0].startswith("stage,node_id,probability,O_s_seconds")
    assert len(lines) == 1 + sum(lat.size(s) for s in lat.stages)


def test_scenarios_csv_round_trip(tmp_path, r1_model):
    inst = r1_model.instance
    paths = r1_model.scenarios(seed=1, n=4)
    write_scenarios_csv(tmp_path / "sc.csv", inst, paths)
    back = read_scenarios_csv(tmp_path / "sc.csv", inst)
    for a, b in zip(paths, back):
        for s in r1_model.stages:
            assert np.allclose(a.xi(inst, s), b.xi(inst, s), atol=1e-8)

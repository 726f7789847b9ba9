import logging

import numpy as np
import pytest

from kwtse.grid import Trajectory
from kwtse.microsim import (DemandScenario, DriverParams, idm_acceleration, load_sim_config,
                            record_section, regime_scenario, run_simulation, simulate)


def _scenario(inflow, duration=600.0, fraction=0.0, seed=0, lanes=1, ramp=1500.0):
    return DemandScenario(inflow, fraction, ramp, duration, seed, lanes)


def test_zero_inflow_gives_no_vehicles():
    assert simulate(_scenario(0.0), 2000.0) == []


def test_lone_vehicle_reaches_desired_speed():
    drivers = DriverParams(v_lo=80.0, v_hi=80.0)
    trajs = simulate(_scenario(30.0, duration=400.0, seed=3), 20000.0, drivers)
    lead = min(trajs, key=lambda tr: tr.t[0])
    assert lead.t[-1] > 300
    assert abs(lead.v[-1] - 80.0) < 0.5


def test_idm_free_road_and_equilibrium():
    p = DriverParams()
    v0 = 25.0
    assert idm_acceleration(np.array([v0]), np.array([v0]), np.array([np.inf]), np.array([0.0]), p)[0] == 0.0
    # at the equilibrium gap for speed v the acceleration is zero
    v = 15.0
    s_star = p.s0 + v * p.T_headway
    gap = s_star / np.sqrt(1 - (v / v0) ** 4)
    a = idm_acceleration(np.array([v]), np.array([v0]), np.array([gap]), np.array([0.0]), p)[0]
    assert abs(a) < 1e-12


def _positions_at(trajs, t):
    out = []
    for tr in trajs:
        hit = np.nonzero(np.isclose(tr.t, t))[0]
        if hit.size:
            out.append(tr.x[hit[0]])
    return np.sort(np.array(out))


def test_no_collisions_under_heavy_demand():
    sc = regime_scenario("congested", 900.0, seed=4)
    p = DriverParams()
    trajs = simulate(sc, 2000.0, p)
    assert len(trajs) > 100
    for t in np.arange(100.0, 900.0, 37.4):
        x = _positions_at(trajs, round(t / 0.2) * 0.2)
        if x.size > 1:
            gaps = np.diff(x) - p.vehicle_length
            assert gaps.min() >= -1e-9
    assert all(np.all(tr.v >= 0) for tr in trajs)


def test_determinism():
    sc = regime_scenario("slow", 300.0, seed=5)
    a = simulate(sc, 2000.0)
    b = simulate(sc, 2000.0)
    assert len(a) == len(b)
    for ta, tb in zip(a, b):
        assert ta.vehicle_id == tb.vehicle_id
        for f in ("t", "x", "v"):
            assert np.array_equal(getattr(ta, f), getattr(tb, f))


def test_followers_never_affect_leaders():
    # identical arrivals before t=200; scenario b drops demand afterwards
    a = simulate(_scenario(((0.0, 1800.0), (200.0, 1800.0)), duration=500.0, seed=8), 3000.0)
    b = simulate(_scenario(((0.0, 1800.0), (200.0, 600.0)), duration=500.0, seed=8), 3000.0)
    early = {tr.vehicle_id: tr for tr in a if tr.t[0] < 150.0}
    assert len(early) > 20
    other = {tr.vehicle_id: tr for tr in b}
    for vid, tr in early.items():
        tb = other[vid]
        assert np.array_equal(tr.t, tb.t) and np.array_equal(tr.x, tb.x) and np.array_equal(tr.v, tb.v)


def test_queue_cap_counts_drops(caplog):
    sc = _scenario(9000.0, duration=120.0, seed=1, ramp=500.0)
    with caplog.at_level(logging.WARNING):
        res = run_simulation(sc, 1000.0, queue_cap=2)
    assert res.dropped_mainline > 0
    assert "queue cap" in caplog.text


def test_ramp_vehicles_enter_in_merge_zone():
    sc = _scenario(600.0, duration=600.0, fraction=0.3, seed=2, ramp=800.0)
    trajs = simulate(sc, 2000.0)
    starts = np.array([tr.x[0] for tr in trajs])
    ramp = starts[starts > 0]
    assert ramp.size > 10
    assert ramp.min() >= 800.0 and ramp.max() < 1000.0


def test_parameter_validation():
    with pytest.raises(ValueError):
        DriverParams(a_max=0.0)
    with pytest.raises(ValueError):
        DriverParams(v_lo=90.0, v_hi=80.0)
    with pytest.raises(ValueError):
        _scenario(-1.0)
    with pytest.raises(ValueError):
        _scenario(100.0, fraction=0.6)
    with pytest.raises(ValueError):
        run_simulation(_scenario(100.0), 2000.0, dt=0.6)
    with pytest.raises(ValueError):
        run_simulation(_scenario(100.0, ramp=2500.0), 2000.0)


def test_record_section():
    inside = Trajectory("a", [0, 1, 2], [110, 120, 130], [36, 36, 36])
    outside = Trajectory("b", [0, 1], [10, 20], [36, 36])
    straddle = Trajectory("c", [0, 1, 2, 3], [180, 195, 200, 210], [50, 50, 50, 50])
    out = record_section([inside, outside, straddle], 100.0, 200.0)
    assert [t.vehicle_id for t in out] == ["a", "c"]
    np.testing.assert_array_equal(out[0].x, [10, 20, 30])
    np.testing.assert_array_equal(out[1].t, [0, 1])
    with pytest.raises(ValueError):
        record_section([], 5.0, 5.0)


def test_config_file(tmp_path):
    p = tmp_path / "sim.json"
    p.write_text('{"scenario": {"mainline_inflow": [[0, 1200], [300, 2400]], "ramp_inflow_fraction": 0.15,'
                 ' "ramp_position": 1600, "duration": 600, "seed": 4},'
                 ' "drivers": {"v_lo": 70, "v_hi": 90}, "section_length": 2000}')
    sc, drivers, cfg = load_sim_config(p)
    assert sc.inflow_at(np.array([0.0, 299.0, 300.0])).tolist() == [1200.0, 1200.0, 2400.0]
    assert drivers.v_lo == 70.0 and cfg["section_length"] == 2000

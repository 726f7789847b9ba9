import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwtse.grid import SpaceTimeGrid, Trajectory
from kwtse.groundtruth import InterpolationParams, blend_speed, interpolate_speed_field

P = InterpolationParams()


def _blend(d_up, v_up, d_dn, v_dn, params=P):
    return float(blend_speed(np.array([d_up]), np.array([v_up]), np.array([d_dn]), np.array([v_dn]), params)[0])


def test_defaults():
    assert (P.V_max, P.l_up, P.l_dn) == (95.0, 80.0, 40.0)
    with pytest.raises(ValueError):
        InterpolationParams(l_up=30.0, l_dn=40.0)


def test_empty_input_gives_vmax_everywhere():
    g = SpaceTimeGrid(0, 0, 10, 1, 80, 60)
    f = interpolate_speed_field([], g)
    assert np.all(f.values == 95.0)


def test_worked_example_both_neighbours():
    assert _blend(20.0, 50.0, 20.0, 30.0) == 40.0


def test_worked_example_upstream_only():
    assert _blend(40.0, 60.0, math.inf, 0.0) == 77.5


def test_downstream_only_and_far():
    assert _blend(math.inf, 0.0, 10.0, 55.0) == pytest.approx(0.75 * 55 + 0.25 * 95, abs=1e-12)
    assert _blend(80.0, 10.0, 40.0, 10.0) == 95.0


@pytest.mark.parametrize("v", [0.0, 30.0, 94.0])
def test_continuity_at_interaction_boundaries(v):
    eps = 1e-12
    inside = _blend(math.inf, 0.0, P.l_dn - eps, v)
    at = _blend(math.inf, 0.0, P.l_dn, v)
    assert abs(inside - at) <= 1e-9
    inside = _blend(P.l_up - eps, v, math.inf, 0.0)
    at = _blend(P.l_up, v, math.inf, 0.0)
    assert abs(inside - at) <= 1e-9


def test_zero_distance_reproduces_vehicle_speed():
    assert _blend(0.0, 42.0, 0.0, 42.0) == 42.0
    assert _blend(0.0, 42.0, 15.0, 70.0) == 42.0
    assert _blend(10.0, 70.0, 0.0, 33.0) == 33.0


def _oracle(trajs, grid, p=P):
    """Cell-by-cell brute force over all vehicles."""
    out = np.empty(grid.shape)
    for j, tc in enumerate(grid.t_centers()):
        states = []
        for tr in trajs:
            if tr.t[0] <= tc <= tr.t[-1]:
                states.append((float(np.interp(tc, tr.t, tr.x)),
                               min(max(float(np.interp(tc, tr.t, tr.v)), 0.0), p.V_max)))
        for i, xc in enumerate(grid.x_centers()):
            dn = [(x - xc, v) for x, v in states if x >= xc]
            up = [(xc - x, v) for x, v in states if x <= xc]
            d_dn, v_dn = min(dn) if dn else (math.inf, 0.0)
            d_up, v_up = min(up) if up else (math.inf, 0.0)
            if d_up < p.l_up and d_dn < p.l_dn:
                w = d_dn / (d_dn + d_up) if d_dn + d_up > 0 else 1.0
                val = w * v_up + (1 - w) * v_dn
            elif d_up < p.l_up:
                w = 1 - d_up / p.l_up
                val = w * v_up + (1 - w) * p.V_max
            elif d_dn < p.l_dn:
                w = 1 - d_dn / p.l_dn
                val = w * v_dn + (1 - w) * p.V_max
            else:
                val = p.V_max
            if any(v == 0 and grid.x0 + i * grid.dx <= x < grid.x0 + (i + 1) * grid.dx for x, v in states):
                val = 0.0
            out[i, j] = val
    return out


vehicle = st.tuples(st.floats(0, 30), st.floats(0, 120), st.floats(0, 120))


def _make(specs, shift):
    # vehicles 40 m apart plus jitter, moving by a common shift: never coincident
    trajs = []
    for k, (off, v0, v1) in enumerate(specs):
        x0 = 40.0 * k + off
        trajs.append(Trajectory(str(k), [0.0, 12.0], [x0, x0 + shift], [v0, v1]))
    return trajs


@settings(max_examples=40, deadline=None)
@given(st.lists(vehicle, min_size=0, max_size=7), st.floats(0, 30))
def test_field_matches_brute_force_and_bounds(specs, shift):
    g = SpaceTimeGrid(0.0, 0.0, 10.0, 1.0, 32, 12)
    trajs = _make(specs, shift)
    f = interpolate_speed_field(trajs, g)
    np.testing.assert_allclose(f.values, _oracle(trajs, g), rtol=0, atol=1e-9)
    assert f.values.min() >= 0.0 and f.values.max() <= P.V_max


def test_stopped_vehicle_cell_is_zero():
    g = SpaceTimeGrid(0.0, 0.0, 10.0, 1.0, 10, 4)
    tr = Trajectory("s", [0.0, 4.0], [43.0, 43.0], [0.0, 0.0])
    f = interpolate_speed_field([tr], g)
    assert np.all(f.values[4] == 0.0)
    # neighbours blend toward the stopped vehicle but stay positive
    assert np.all(f.values[3] > 0.0) and np.all(f.values[3] < 95.0)


def test_vehicle_at_cell_centre_is_reproduced():
    g = SpaceTimeGrid(0.0, 0.0, 10.0, 1.0, 10, 3)
    tr = Trajectory("c", [0.0, 3.0], [55.0, 55.0 + 1e-9], [37.0, 37.0])
    f = interpolate_speed_field([tr], g)
    assert f.values[5, 1] == pytest.approx(37.0, abs=1e-6)

"""Dense "true" speed field from a complete trajectory set.

At each time column every vehicle's position and speed are interpolated, and
each cell takes a distance-weighted blend of its nearest upstream vehicle,
nearest downstream vehicle and the free-flow speed ``V_max``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import DEFAULT_V_CAP, SpaceTimeGrid, SpeedField, Trajectory


@dataclass(frozen=True)
class InterpolationParams:
    V_max: float = 95.0
    l_up: float = 80.0
    l_dn: float = 40.0

    def __post_init__(self) -> None:
        if not self.V_max > 0:
            raise ValueError("V_max must be positive")
        if not self.l_up > self.l_dn > 0:
            raise ValueError("need l_up > l_dn > 0")


def blend_speed(d_up: np.ndarray, v_up: np.ndarray, d_dn: np.ndarray, v_dn: np.ndarray,
                params: InterpolationParams) -> np.ndarray:
    """Four-case blend for cells at distance ``d_up`` behind / ``d_dn`` ahead of neighbours.

    Missing neighbours are passed as ``inf`` distances. Weights fall linearly to
    zero at the interaction lengths, so the single-neighbour cases meet ``V_max``
    continuously at their boundary.
    """
    d_up = np.asarray(d_up, dtype=float)
    d_dn = np.asarray(d_dn, dtype=float)
    near_up = d_up < params.l_up
    near_dn = d_dn < params.l_dn
    out = np.full(np.broadcast(d_up, d_dn).shape, params.V_max, dtype=float)

    both = near_up & near_dn
    if both.any():
        du, dd = d_up[both], d_dn[both]
        tot = du + dd
        w = np.where(tot > 0, dd / np.where(tot > 0, tot, 1.0), 1.0)
        out[both] = np.asarray(v_up)[both] * w + np.asarray(v_dn)[both] * (1 - w)
    up_only = near_up & ~near_dn
    if up_only.any():
        w = 1.0 - d_up[up_only] / params.l_up
        out[up_only] = np.asarray(v_up)[up_only] * w + params.V_max * (1 - w)
    dn_only = near_dn & ~near_up
    if dn_only.any():
        w = 1.0 - d_dn[dn_only] / params.l_dn
        out[dn_only] = np.asarray(v_dn)[dn_only] * w + params.V_max * (1 - w)
    return out


def vehicle_states(trajs: Sequence[Trajectory], times: np.ndarray):
    """Per-column vehicle snapshots: list (one per time) of ``(x_sorted, v_sorted)``."""
    times = np.asarray(times, dtype=float)
    cols: list[list[np.ndarray]] = [[] for _ in times]
    vals: list[list[np.ndarray]] = [[] for _ in times]
    for tr in trajs:
        lo = np.searchsorted(times, tr.t[0], side="left")
        hi = np.searchsorted(times, tr.t[-1], side="right")
        if hi <= lo:
            continue
        tt = times[lo:hi]
        xs = np.interp(tt, tr.t, tr.x)
        vs = np.interp(tt, tr.t, tr.v)
        for k in range(hi - lo):
            cols[lo + k].append(xs[k])
            vals[lo + k].append(vs[k])
    out = []
    for xs, vs in zip(cols, vals):
        x = np.array(xs, dtype=float)
        v = np.array(vs, dtype=float)
        order = np.argsort(x, kind="stable")
        out.append((x[order], v[order]))
    return out


def interpolate_speed_field(trajs: Sequence[Trajectory], grid: SpaceTimeGrid,
                            params: InterpolationParams | None = None) -> SpeedField:
    """Speed field on ``grid`` evaluated at cell centres.

    Vehicle speeds are clipped to ``[0, V_max]`` before blending so the field
    stays within the free-flow bound. A cell holding a stopped vehicle is 0.
    """
    params = params or InterpolationParams()
    xc = grid.x_centers()
    values = np.empty(grid.shape)
    for j, (xv, vv) in enumerate(vehicle_states(trajs, grid.t_centers())):
        values[:, j] = _column(xc, xv, np.clip(vv, 0.0, params.V_max), grid, params)
    # blends of values within [0, V_max] can overshoot by one rounding step
    np.clip(values, 0.0, params.V_max, out=values)
    return SpeedField(grid, values, v_cap=max(params.V_max, DEFAULT_V_CAP))


def _column(xc: np.ndarray, xv: np.ndarray, vv: np.ndarray, grid: SpaceTimeGrid,
            params: InterpolationParams) -> np.ndarray:
    if xv.size == 0:
        return np.full(xc.shape, params.V_max)
    # nearest downstream vehicle: first with x >= xc; upstream: last with x <= xc
    i_dn = np.searchsorted(xv, xc, side="left")
    i_up = np.searchsorted(xv, xc, side="right") - 1
    has_dn = i_dn < xv.size
    has_up = i_up >= 0
    i_dn_c = np.minimum(i_dn, xv.size - 1)
    i_up_c = np.maximum(i_up, 0)
    d_dn = np.where(has_dn, xv[i_dn_c] - xc, np.inf)
    d_up = np.where(has_up, xc - xv[i_up_c], np.inf)
    col = blend_speed(d_up, vv[i_up_c], d_dn, vv[i_dn_c], params)

    stopped = vv == 0
    if stopped.any():
        cell = np.floor((xv[stopped] - grid.x0) / grid.dx).astype(np.int64)
        cell = cell[(cell >= 0) & (cell < grid.nx)]
        col[cell] = 0.0
    return col

"""Single-lane IDM microsimulation with an on-ramp merge.

Generates synthetic freeway trajectories: heterogeneous desired speeds give
forward-moving free-flow waves, and ramp merges at high demand trigger
backward-moving stop-and-go waves.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import KMPH, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DriverParams:
    """Distribution of driver behaviour. ``v_desired`` is drawn uniformly on ``[v_lo, v_hi]`` kmph."""

    v_lo: float = 60.0
    v_hi: float = 100.0
    a_max: float = 1.0
    b_comf: float = 2.0
    T_headway: float = 1.2
    s0: float = 2.0
    vehicle_length: float = 5.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"DriverParams.{name} must be positive")
        if self.v_lo > self.v_hi:
            raise ValueError("v_lo must not exceed v_hi")


@dataclass(frozen=True)
class DemandScenario:
    """Demand offered to the simulated section.

    ``mainline_inflow`` is a piecewise-constant profile of ``(start_time_s, veh/hr)``
    breakpoints for the whole carriageway; ``lanes`` splits it evenly so the
    simulated lane receives ``1/lanes`` of it. The ramp contributes
    ``ramp_inflow_fraction`` of the total (mainline + ramp) flow.
    """

    mainline_inflow: tuple[tuple[float, float], ...]
    ramp_inflow_fraction: float
    ramp_position: float
    duration: float
    seed: int = 0
    lanes: int = 3

    def __post_init__(self) -> None:
        profile = self.mainline_inflow
        if isinstance(profile, (int, float)):
            profile = ((0.0, float(profile)),)
        profile = tuple((float(t), float(q)) for t, q in profile)
        object.__setattr__(self, "mainline_inflow", profile)
        if not profile or profile[0][0] != 0.0:
            raise ValueError("inflow profile must start at t=0")
        if any(b[0] <= a[0] for a, b in zip(profile, profile[1:])):
            raise ValueError("inflow breakpoints must be strictly increasing")
        if any(q < 0 for _, q in profile):
            raise ValueError("inflow must be non-negative")
        if not 0.0 <= self.ramp_inflow_fraction <= 0.5:
            raise ValueError("ramp_inflow_fraction must lie in [0, 0.5]")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.lanes < 1:
            raise ValueError("lanes must be at least 1")

    def inflow_at(self, t: np.ndarray) -> np.ndarray:
        starts = np.array([p[0] for p in self.mainline_inflow])
        rates = np.array([p[1] for p in self.mainline_inflow])
        return rates[np.searchsorted(starts, t, side="right") - 1]

    @classmethod
    def from_dict(cls, d: dict) -> "DemandScenario":
        keys = {"mainline_inflow", "ramp_inflow_fraction", "ramp_position", "duration", "seed", "lanes"}
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class SimulationResult:
    trajectories: list[Trajectory]
    dropped_mainline: int = 0
    dropped_ramp: int = 0
    config: dict = field(default_factory=dict)


def _arrival_times(rng: np.random.Generator, rate_fn, rate_max: float, duration: float) -> np.ndarray:
    """Non-homogeneous Poisson arrivals by thinning a rate-``rate_max`` process (rates in veh/s)."""
    if rate_max <= 0:
        return np.empty(0)
    n = rng.poisson(rate_max * duration * 1.2 + 20)
    gaps = rng.exponential(1.0 / rate_max, size=n)
    times = np.cumsum(gaps)
    while times.size and times[-1] < duration:
        more = np.cumsum(rng.exponential(1.0 / rate_max, size=n + 1)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times < duration]
    keep = rng.random(times.size) < rate_fn(times) / rate_max
    return times[keep]


def idm_acceleration(v, v_des, gap, dv, p: DriverParams) -> np.ndarray:
    """IDM acceleration (m/s^2); all speeds m/s, ``gap`` bumper to bumper (inf for free road)."""
    root_ab = 2.0 * math.sqrt(p.a_max * p.b_comf)
    s_star = p.s0 + np.maximum(0.0, v * p.T_headway + v * dv / root_ab)
    with np.errstate(divide="ignore"):
        interaction = np.where(np.isfinite(gap), (s_star / np.maximum(gap, 1e-3)) ** 2, 0.0)
    return p.a_max * (1.0 - (v / v_des) ** 4 - interaction)


def _entry_speed(gap: float, v_lead: float, v_des: float, p: DriverParams) -> float:
    """Speed for a vehicle entering behind a leader, or -1 while the gap is too short.

    The vehicle enters at ``min(v_des, v_lead)`` once the gap reaches the
    equilibrium spacing ``s0 + v*T`` for that speed (m/s).
    """
    if not math.isfinite(gap):
        return v_des
    v = min(v_des, v_lead)
    if gap < p.s0 + v * p.T_headway:
        return -1.0
    return v


def run_simulation(scenario: DemandScenario, section_length: float,
                   drivers: DriverParams | None = None, *, dt: float = 0.2,
                   queue_cap: int = 200, merge_length: float = 200.0,
                   b_merge: float = 10.0) -> SimulationResult:
    """Integrate the single-lane IDM with mainline entry at ``x=0`` and a ramp merge zone.

    Vehicles are stored leader-first. Positions are front bumpers; the gap to the
    leader is ``x_leader - vehicle_length - x``. Ramp vehicles merge into the first
    gap in ``[ramp_position, ramp_position + merge_length)`` where neither the merging
    vehicle nor its new follower would need to brake harder than ``b_merge``.
    """
    p = drivers or DriverParams()
    if not 0 < dt <= 0.5:
        raise ValueError("simulation step must lie in (0, 0.5] s")
    if not section_length > 0:
        raise ValueError("section_length must be positive")
    if not 0 <= scenario.ramp_position < section_length:
        raise ValueError("ramp_position must lie inside the section")

    rng = np.random.default_rng(scenario.seed)
    lanes = scenario.lanes
    f = scenario.ramp_inflow_fraction
    ramp_ratio = f / (1.0 - f)
    max_main = max(q for _, q in scenario.mainline_inflow) / 3600.0 / lanes

    def main_rate(t):
        return scenario.inflow_at(t) / 3600.0 / lanes

    def ramp_rate(t):
        return main_rate(t) * ramp_ratio

    main_arr = _arrival_times(rng, main_rate, max_main, scenario.duration)
    ramp_arr = _arrival_times(rng, ramp_rate, max_main * ramp_ratio, scenario.duration)
    n_total = main_arr.size + ramp_arr.size
    v_des_pool = rng.uniform(p.v_lo, p.v_hi, size=n_total) * KMPH

    L = p.vehicle_length
    pos = np.empty(0)
    vel = np.empty(0)
    vdes = np.empty(0)
    vid = np.empty(0, dtype=np.int64)

    main_queue: deque[int] = deque()
    ramp_queue: deque[int] = deque()
    next_id = 0
    mi = ri = 0
    dropped_main = dropped_ramp = 0

    rec_id: list[np.ndarray] = []
    rec_t: list[np.ndarray] = []
    rec_x: list[np.ndarray] = []
    rec_v: list[np.ndarray] = []

    def record(t: float, idx=None) -> None:
        sel = slice(None) if idx is None else idx
        ids = np.atleast_1d(vid[sel])
        if ids.size:
            rec_id.append(ids)
            rec_t.append(np.full(ids.size, t))
            rec_x.append(np.atleast_1d(pos[sel]).copy())
            rec_v.append(np.atleast_1d(vel[sel]).copy())

    n_steps = int(round(scenario.duration / dt))
    for step in range(n_steps):
        t = step * dt
        while mi < main_arr.size and main_arr[mi] < t + dt:
            if len(main_queue) >= queue_cap:
                dropped_main += 1
            else:
                main_queue.append(next_id)
                next_id += 1
            mi += 1
        while ri < ramp_arr.size and ramp_arr[ri] < t + dt:
            if len(ramp_queue) >= queue_cap:
                dropped_ramp += 1
            else:
                ramp_queue.append(next_id)
                next_id += 1
            ri += 1

        # mainline entry at x = 0
        if main_queue:
            k = main_queue[0]
            if pos.size:
                gap, v_lead = pos[-1] - L, vel[-1]
            else:
                gap, v_lead = math.inf, 0.0
            v_in = _entry_speed(gap, v_lead, v_des_pool[k], p)
            if v_in >= 0:
                main_queue.popleft()
                pos = np.append(pos, 0.0)
                vel = np.append(vel, v_in)
                vdes = np.append(vdes, v_des_pool[k])
                vid = np.append(vid, k)
                record(t, pos.size - 1)

        if ramp_queue and lanes >= 1:
            k = ramp_queue[0]
            slot = _find_merge_slot(pos, vel, vdes, v_des_pool[k], scenario.ramp_position,
                                    merge_length, p, b_merge)
            if slot is not None:
                ramp_queue.popleft()
                at, x_new, v_new = slot
                pos = np.insert(pos, at, x_new)
                vel = np.insert(vel, at, v_new)
                vdes = np.insert(vdes, at, v_des_pool[k])
                vid = np.insert(vid, at, k)
                record(t, at)

        if pos.size == 0:
            continue
        gap = np.empty_like(pos)
        gap[0] = math.inf
        gap[1:] = pos[:-1] - L - pos[1:]
        dv = np.zeros_like(vel)
        dv[1:] = vel[1:] - vel[:-1]
        acc = idm_acceleration(vel, vdes, gap, dv, p)
        v_next = np.maximum(vel + acc * dt, 0.0)
        x_next = pos + v_next * dt
        # Hard no-overlap guard, cascading from the leader: x_k <= x_{k-1} - L.
        offs = np.arange(pos.size) * L
        x_next = np.minimum.accumulate(x_next + offs) - offs
        x_next = np.maximum(x_next, pos)
        vel = np.minimum((x_next - pos) / dt, v_next)
        pos = x_next
        record(t + dt)

        gone = pos >= section_length
        if gone.any():
            keep = ~gone
            pos, vel, vdes, vid = pos[keep], vel[keep], vdes[keep], vid[keep]

    if dropped_main or dropped_ramp:
        log.warning("insertion backlog exceeded queue cap: dropped %d mainline, %d ramp vehicles",
                    dropped_main, dropped_ramp)
    trajs = _assemble(rec_id, rec_t, rec_x, rec_v)
    cfg = {"scenario": asdict(scenario), "drivers": asdict(p), "section_length": section_length,
           "dt": dt, "queue_cap": queue_cap, "merge_length": merge_length, "b_merge": b_merge}
    return SimulationResult(trajs, dropped_main, dropped_ramp, cfg)


def _find_merge_slot(pos, vel, vdes, v_des_new, x_lo, length, p: DriverParams, b_merge):
    """First gap (scanning upstream to downstream) where a merge is acceptable.

    Returns ``(insert_index, x_front, speed)`` or None.
    """
    L = p.vehicle_length
    x_hi = x_lo + length
    n = pos.size
    # candidate slot k sits between leader k-1 and follower k (array order);
    # slots above k_first lie wholly upstream of the zone
    k_first = int(np.searchsorted(-pos, -(x_lo + L), side="right"))
    for k in range(k_first, -1, -1):
        has_lead = k > 0
        has_follow = k < n
        x_f = pos[k] if has_follow else -math.inf
        x_l = pos[k - 1] if has_lead else math.inf
        if has_follow and x_f >= x_hi:
            break
        if has_lead and x_l - L < x_lo:
            continue
        if has_lead and has_follow:
            g = (x_l - L - x_f - L) / 2.0
            x_new = x_f + L + g
            v_new = min(v_des_new, 0.5 * (vel[k - 1] + vel[k]))
        elif has_lead:
            x_new = max(x_lo, min(x_hi, x_l - 2 * L - p.s0 - vel[k - 1] * p.T_headway))
            v_new = min(v_des_new, vel[k - 1])
        elif has_follow:
            x_new = min(x_hi, max(x_lo, x_f + 2 * L + p.s0 + vel[k] * p.T_headway))
            v_new = min(v_des_new, max(vel[k], 0.5 * v_des_new))
        else:
            x_new = x_lo
            v_new = v_des_new
        if not x_lo <= x_new < x_hi:
            continue
        ok = True
        if has_lead:
            g_front = x_l - L - x_new
            a_new = idm_acceleration(np.array([v_new]), np.array([v_des_new]),
                                     np.array([g_front]), np.array([v_new - vel[k - 1]]), p)[0]
            ok = g_front >= p.s0 and a_new >= -b_merge
        if ok and has_follow:
            g_back = x_new - L - x_f
            a_f = idm_acceleration(np.array([vel[k]]), np.array([vdes[k]]),
                                   np.array([g_back]), np.array([vel[k] - v_new]), p)[0]
            ok = g_back >= p.s0 and a_f >= -b_merge
        if ok:
            return k, x_new, v_new
    return None


def _assemble(rec_id, rec_t, rec_x, rec_v) -> list[Trajectory]:
    if not rec_id:
        return []
    ids = np.concatenate(rec_id)
    t = np.concatenate(rec_t)
    x = np.concatenate(rec_x)
    v = np.concatenate(rec_v) / KMPH
    order = np.lexsort((t, ids))
    ids, t, x, v = ids[order], t[order], x[order], v[order]
    splits = np.flatnonzero(np.diff(ids)) + 1
    trajs = []
    for seg_ids, seg_t, seg_x, seg_v in zip(np.split(ids, splits), np.split(t, splits),
                                            np.split(x, splits), np.split(v, splits)):
        trajs.append(Trajectory(str(int(seg_ids[0])), seg_t, seg_x, seg_v))
    return trajs


def simulate(scenario: DemandScenario, section_length: float,
             drivers: DriverParams | None = None, **kwargs) -> list[Trajectory]:
    """Trajectories of every vehicle that entered the road during ``scenario.duration``."""
    return run_simulation(scenario, section_length, drivers, **kwargs).trajectories


def record_section(trajs: Sequence[Trajectory], x_start: float, x_end: float) -> list[Trajectory]:
    """Keep samples with ``x_start <= x < x_end``, re-based so the section starts at 0."""
    if not x_start < x_end:
        raise ValueError("x_start must be below x_end")
    out = []
    for tr in trajs:
        keep = (tr.x >= x_start) & (tr.x < x_end)
        if keep.any():
            out.append(Trajectory(tr.vehicle_id, tr.t[keep], tr.x[keep] - x_start, tr.v[keep]))
    return out


# ---------------------------------------------------------------------------
# Scenario presets and config files
# ---------------------------------------------------------------------------

REGIME_DEMAND = {
    "free": (800.0, 1200.0),
    "slow": (2400.0, 3000.0),
    "congested": (4200.0, 5400.0),
}


def regime_scenario(regime: str, duration: float, seed: int, *, ramp_position: float = 1600.0,
                    profile_step: float = 300.0, ramp_fraction: tuple[float, float] = (0.15, 0.20),
                    lanes: int = 3) -> DemandScenario:
    """Random piecewise-constant demand within the regime's range (levels change every ``profile_step``)."""
    lo, hi = REGIME_DEMAND[regime]
    rng = np.random.default_rng([seed, 7919])
    starts = np.arange(0.0, duration, profile_step)
    levels = rng.uniform(lo, hi, size=starts.size)
    frac = float(rng.uniform(*ramp_fraction))
    return DemandScenario(tuple(zip(starts.tolist(), levels.tolist())), frac, ramp_position,
                          duration, seed, lanes)


def load_sim_config(path: str | Path) -> tuple[DemandScenario, DriverParams, dict]:
    """Parse a JSON config with ``scenario``, ``drivers`` and optional ``section_length``/``record``."""
    cfg = json.loads(Path(path).read_text())
    scenario = DemandScenario.from_dict(cfg["scenario"])
    drivers = DriverParams(**cfg.get("drivers", {}))
    return scenario, drivers, cfg

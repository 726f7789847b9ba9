"""Space-time data model: grids, trajectories, speed fields, CSV I/O and Edie estimators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = ("vehicle_id", "t_s", "x_m", "v_kmph")
DEFAULT_V_CAP = 130.0
KMPH = 1.0 / 3.6  # m/s per kmph


class TrajectoryFormatError(ValueError):
    """Raised when a trajectory file or trajectory sample set is malformed."""


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Half-open cells ``[x0 + i*dx, x0 + (i+1)*dx) x [t0 + j*dt, t0 + (j+1)*dt)``."""

    x0: float
    t0: float
    dx: float
    dt: float
    nx: int
    nt: int

    def __post_init__(self) -> None:
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be positive")
        if self.nx < 1 or self.nt < 1:
            raise ValueError("nx and nt must be at least 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nt)

    @property
    def x_end(self) -> float:
        return self.x0 + self.nx * self.dx

    @property
    def t_end(self) -> float:
        return self.t0 + self.nt * self.dt

    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    def t_centers(self) -> np.ndarray:
        return self.t0 + (np.arange(self.nt) + 0.5) * self.dt

    def sub_grid(self, i0: int, j0: int, nx: int, nt: int) -> "SpaceTimeGrid":
        """Grid of the ``nx x nt`` block whose first cell is ``(i0, j0)``."""
        if i0 < 0 or j0 < 0 or i0 + nx > self.nx or j0 + nt > self.nt:
            raise ValueError("sub-grid exceeds parent grid")
        return SpaceTimeGrid(self.x0 + i0 * self.dx, self.t0 + j0 * self.dt,
                             self.dx, self.dt, nx, nt)

    def cell_indices(self, t: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised :func:`cell_of`. Returns ``(i, j, inside)``."""
        i = _floor_index(np.asarray(x, dtype=float), self.x0, self.dx)
        j = _floor_index(np.asarray(t, dtype=float), self.t0, self.dt)
        inside = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.nt)
        return i, j, inside


def _floor_index(v: np.ndarray, origin: float, step: float) -> np.ndarray:
    """``floor((v - origin) / step)`` corrected so that ``v`` lies in its half-open cell."""
    k = np.floor((v - origin) / step).astype(np.int64)
    k = np.where(v < origin + k * step, k - 1, k)
    return np.where(v >= origin + (k + 1) * step, k + 1, k)


def cell_of(grid: SpaceTimeGrid, t: float, x: float) -> tuple[int, int] | None:
    """Return ``(space index, time index)`` of the cell holding ``(t, x)``, or None outside."""
    i, j, inside = grid.cell_indices(np.array([t]), np.array([x]))
    if not inside[0]:
        return None
    return int(i[0]), int(j[0])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples of one vehicle. Speeds are kmph; times s; positions m."""

    vehicle_id: str
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        t = np.array(self.t, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if not (t.size == x.size == v.size):
            raise TrajectoryFormatError(f"vehicle {self.vehicle_id}: sample arrays differ in length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise TrajectoryFormatError(f"vehicle {self.vehicle_id}: non-finite sample")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise TrajectoryFormatError(f"vehicle {self.vehicle_id}: time is not strictly increasing")
        if x.size > 1 and np.any(np.diff(x) < 0):
            raise TrajectoryFormatError(f"vehicle {self.vehicle_id}: position decreases")
        if np.any(v < 0):
            raise TrajectoryFormatError(f"vehicle {self.vehicle_id}: negative speed")
        for name, arr in (("t", t), ("x", x), ("v", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "vehicle_id", str(self.vehicle_id))

    def __len__(self) -> int:
        return int(self.t.size)

    def samples(self) -> list[tuple[float, float, float]]:
        return list(zip(self.t.tolist(), self.x.tolist(), self.v.tolist()))

    def state_at(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Linear interpolation of position and speed; third item flags times within the record."""
        times = np.asarray(times, dtype=float)
        present = (times >= self.t[0]) & (times <= self.t[-1])
        return np.interp(times, self.t, self.x), np.interp(times, self.t, self.v), present


@dataclass(frozen=True, eq=False)
class SpeedField:
    """Dense ``nx x nt`` speed values (kmph) on a grid."""

    grid: SpaceTimeGrid
    values: np.ndarray
    v_cap: float = field(default=DEFAULT_V_CAP)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("speed field contains non-finite values")
        if values.size and (values.min() < 0 or values.max() > self.v_cap):
            raise ValueError(f"speed values must lie in [0, {self.v_cap}] kmph")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def read_trajectories_csv(path: str | Path) -> list[Trajectory]:
    """Read the long-format ``vehicle_id,t_s,x_m,v_kmph`` schema.

    Rows of one vehicle need not be contiguous; they are grouped and sorted by
    time. Duplicate or decreasing times within a vehicle are rejected.
    """
    rows: dict[str, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise TrajectoryFormatError(f"line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TrajectoryFormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
            vid = row[0].strip()
            try:
                t, x, v = (float(c) for c in row[1:])
            except ValueError:
                raise TrajectoryFormatError(f"line {lineno}: non-numeric field") from None
            if not vid:
                raise TrajectoryFormatError(f"line {lineno}: empty vehicle_id")
            if not all(math.isfinite(c) for c in (t, x, v)):
                raise TrajectoryFormatError(f"line {lineno}: non-finite value")
            if v < 0:
                raise TrajectoryFormatError(f"line {lineno}: negative speed")
            rows.setdefault(vid, []).append((t, x, v))

    trajs = []
    for vid, samples in rows.items():
        arr = np.array(sorted(samples, key=lambda s: s[0]), dtype=float)
        if arr.shape[0] > 1 and np.any(np.diff(arr[:, 0]) <= 0):
            raise TrajectoryFormatError(f"vehicle {vid}: repeated time stamps")
        trajs.append(Trajectory(vid, arr[:, 0], arr[:, 1], arr[:, 2]))
    return trajs


def write_trajectories_csv(trajs: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for tr in trajs:
            for t, x, v in zip(tr.t, tr.x, tr.v):
                # repr() round-trips float64 exactly
                writer.writerow((tr.vehicle_id, repr(float(t)), repr(float(x)), repr(float(v))))


# ---------------------------------------------------------------------------
# Edie's generalised definitions
# ---------------------------------------------------------------------------

def _clipped_segments(tr: Trajectory, t_lo: float, t_hi: float,
                      x_lo: float, x_hi: float) -> tuple[float, float]:
    """Distance travelled and time spent by the piecewise-linear path inside the rectangle."""
    if len(tr) < 2:
        return 0.0, 0.0
    t1, t2 = tr.t[:-1], tr.t[1:]
    x1, x2 = tr.x[:-1], tr.x[1:]
    seg_dt = t2 - t1
    seg_dx = x2 - x1
    u_lo = np.zeros_like(t1)
    u_hi = np.ones_like(t1)
    # Liang-Barsky clipping in parameter u in [0, 1]; seg_dt > 0 always
    u_lo = np.maximum(u_lo, (t_lo - t1) / seg_dt)
    u_hi = np.minimum(u_hi, (t_hi - t1) / seg_dt)
    moving = seg_dx > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ua = np.where(moving, (x_lo - x1) / seg_dx, -np.inf)
        ub = np.where(moving, (x_hi - x1) / seg_dx, np.inf)
    u_lo = np.maximum(u_lo, ua)
    u_hi = np.minimum(u_hi, ub)
    # stationary segments count only when they sit inside the space interval
    inside_x = moving | ((x1 >= x_lo) & (x1 < x_hi))
    frac = np.where(inside_x, np.clip(u_hi - u_lo, 0.0, None), 0.0)
    return float(np.sum(frac * seg_dx)), float(np.sum(frac * seg_dt))


def edie_flow_density(trajs: Sequence[Trajectory],
                      t_interval: tuple[float, float],
                      x_interval: tuple[float, float]) -> tuple[float, float]:
    """Flow (veh/hr) and density (veh/km) in a space-time rectangle."""
    t_lo, t_hi = t_interval
    x_lo, x_hi = x_interval
    area = (t_hi - t_lo) * (x_hi - x_lo)
    if not (t_hi > t_lo and x_hi > x_lo):
        raise ValueError("region must have positive duration and length")
    dist = 0.0
    time = 0.0
    for tr in trajs:
        d, s = _clipped_segments(tr, t_lo, t_hi, x_lo, x_hi)
        dist += d
        time += s
    return dist / area * 3600.0, time / area * 1000.0


def flow_density_tiles(trajs: Sequence[Trajectory], grid: SpaceTimeGrid,
                       tile_dx: float = 50.0, tile_dt: float = 30.0) -> np.ndarray:
    """Edie (k, q) per tile covering ``grid``; rows are ``(x_lo, t_lo, k_vehkm, q_vehhr)``."""
    out = []
    n_x = int(round((grid.x_end - grid.x0) / tile_dx))
    n_t = int(round((grid.t_end - grid.t0) / tile_dt))
    for a in range(n_x):
        x_lo = grid.x0 + a * tile_dx
        for b in range(n_t):
            t_lo = grid.t0 + b * tile_dt
            q, k = edie_flow_density(trajs, (t_lo, t_lo + tile_dt), (x_lo, x_lo + tile_dx))
            out.append((x_lo, t_lo, k, q))
    return np.array(out, dtype=float).reshape(-1, 4)

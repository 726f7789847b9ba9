"""Metrics, wave-speed measurement and field/scatter export."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import DEFAULT_V_CAP, KMPH, SpaceTimeGrid, SpeedField, Trajectory, flow_density_tiles


def wave_speed_estimate(field: SpeedField | np.ndarray, dx: float | None = None, dt: float | None = None,
                        *, v_min: float = -40.0, v_max: float = 120.0, step: float = 0.5,
                        max_lag_s: float = 20.0) -> float:
    """Signed propagation speed (kmph) maximising space-time cross-correlation.

    For every candidate speed ``c`` and lag ``tau`` the column ``t + tau`` is
    compared with column ``t`` translated by ``c * tau`` (linear interpolation in
    space). The pooled Pearson correlation over all lags is maximised over the
    candidate grid. Returns NaN for a constant field.
    """
    if isinstance(field, SpeedField):
        values, dx, dt = field.values, field.grid.dx, field.grid.dt
    else:
        values = np.asarray(field, dtype=float)
        if dx is None or dt is None:
            raise ValueError("dx and dt are required for raw arrays")
    nx, nt = values.shape
    if nt < 2:
        raise ValueError("need at least two time columns")
    if np.ptp(values) == 0:
        return math.nan
    n_lag = max(1, min(nt - 1, int(round(max_lag_s / dt))))
    candidates = np.arange(v_min, v_max + step / 2, step)
    best, best_score = math.nan, -np.inf
    rows = np.arange(nx, dtype=float)
    for c in candidates:
        s1 = s2 = s11 = s22 = s12 = 0.0
        n = 0
        for tau in range(1, n_lag + 1):
            shift = c * KMPH * tau * dt / dx
            src = rows - shift
            ok = (src >= 0) & (src <= nx - 1)
            if not ok.any():
                continue
            src = src[ok]
            i0 = np.minimum(np.floor(src).astype(np.int64), nx - 2) if nx > 1 else np.zeros(src.size, np.int64)
            frac = (src - i0)[:, None]
            if nx > 1:
                b = (1 - frac) * values[i0, : nt - tau] + frac * values[i0 + 1, : nt - tau]
            else:
                b = values[i0, : nt - tau]
            a = values[ok, tau:]
            s1 += a.sum()
            s2 += b.sum()
            s11 += (a * a).sum()
            s22 += (b * b).sum()
            s12 += (a * b).sum()
            n += a.size
        if n < 2:
            continue
        cov = s12 / n - (s1 / n) * (s2 / n)
        va = s11 / n - (s1 / n) ** 2
        vb = s22 / n - (s2 / n) ** 2
        if va <= 0 or vb <= 0:
            continue
        score = cov / math.sqrt(va * vb)
        if score > best_score + 1e-12:
            best, best_score = float(c), score
    return best


def congested_windows(field: SpeedField, *, width_s: float = 200.0, threshold_kmph: float = 50.0,
                      min_fraction: float = 0.9) -> list[tuple[int, int]]:
    """Disjoint column ranges ``[j0, j1)`` of ``width_s`` where most cells are slow.

    A window qualifies when at least ``min_fraction`` of its cells are below
    ``threshold_kmph``. Windows are scanned left to right without overlap.
    """
    w = max(2, int(round(width_s / field.grid.dt)))
    slow = field.values < threshold_kmph
    out = []
    j = 0
    while j + w <= field.grid.nt:
        if slow[:, j:j + w].mean() >= min_fraction:
            out.append((j, j + w))
            j += w
        else:
            j += 1
    return out


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def rmse(estimate: SpeedField | np.ndarray, truth: SpeedField | np.ndarray) -> float:
    """Root mean squared difference over all cells (kmph)."""
    if isinstance(estimate, SpeedField) and isinstance(truth, SpeedField):
        if estimate.grid != truth.grid:
            raise ValueError("fields live on different grids")
    a = estimate.values if isinstance(estimate, SpeedField) else np.asarray(estimate, dtype=float)
    b = truth.values if isinstance(truth, SpeedField) else np.asarray(truth, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b
    return float(np.sqrt(np.mean(d * d)))


def per_sample_rmse(estimates: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """RMSE of each ``(nx, nt)`` slice along the first axis."""
    d = np.asarray(estimates, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    if d.ndim < 2:
        raise ValueError("expected a stack of fields")
    return np.sqrt(np.mean(d.reshape(d.shape[0], -1) ** 2, axis=1))


@dataclass(frozen=True)
class RegimeRow:
    regime: str
    mean_rmse: float
    std_rmse: float
    n: int


def rmse_by_regime(estimates: np.ndarray, truths: np.ndarray, regimes: Sequence[str],
                   order: Sequence[str] = ("congested", "slow", "free")) -> list[RegimeRow]:
    """Per-regime mean and sample std of per-sample RMSE, plus a ``total`` row.

    Regimes listed in ``order`` come first, any others follow alphabetically.
    """
    errs = per_sample_rmse(estimates, truths)
    labels = np.asarray(regimes).astype(str)
    if labels.shape != errs.shape:
        raise ValueError("one regime label per sample is required")
    present = [r for r in order if np.any(labels == r)]
    present += sorted(set(labels.tolist()) - set(present))
    rows = []
    for r in present:
        e = errs[labels == r]
        rows.append(RegimeRow(r, float(e.mean()), float(e.std(ddof=1)) if e.size > 1 else 0.0, int(e.size)))
    rows.append(RegimeRow("total", float(errs.mean()),
                          float(errs.std(ddof=1)) if errs.size > 1 else 0.0, int(errs.size)))
    return rows


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

# speed (kmph) -> RGB stops, linear in between, clipped at both ends
COLORMAP_STOPS = (
    (0.0, (128, 0, 0)),
    (30.0, (255, 0, 0)),
    (60.0, (255, 255, 0)),
    (90.0, (0, 200, 0)),
    (120.0, (0, 100, 0)),
)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map speeds to uint8 RGB with :data:`COLORMAP_STOPS`."""
    xs = np.array([s for s, _ in COLORMAP_STOPS])
    rgb = np.array([c for _, c in COLORMAP_STOPS], dtype=float)
    v = np.asarray(values, dtype=float)
    out = np.stack([np.interp(v, xs, rgb[:, k]) for k in range(3)], axis=-1)
    return np.floor(out + 0.5).astype(np.uint8)


def field_image(field: SpeedField) -> np.ndarray:
    """``(nx, nt, 3)`` image: time runs left to right, downstream at the top."""
    return colorize(field.values[::-1, :])


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary 8-bit PPM file")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data, dtype=np.uint8, offset=m.end())
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated PPM")
    return pixels.reshape(h, w, 3)


def write_field_csv(field: SpeedField, path: str | Path) -> None:
    """One row per cell: ``x_m,t_s,v_kmph`` at cell centres, space-major order."""
    xc, tc = field.grid.x_centers(), field.grid.t_centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_m", "t_s", "v_kmph"])
        for i, x in enumerate(xc):
            for j, t in enumerate(tc):
                w.writerow([repr(float(x)), repr(float(t)), repr(float(field.values[i, j]))])


def read_field_csv(path: str | Path) -> SpeedField:
    """Inverse of :func:`write_field_csv` (grid recovered from the cell centres)."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        raise ValueError(f"{path}: empty field file")
    xs, ts = np.unique(rows[:, 0]), np.unique(rows[:, 1])
    if xs.size * ts.size != rows.shape[0]:
        raise ValueError(f"{path}: rows do not form a full grid")
    dx = float(xs[1] - xs[0]) if xs.size > 1 else 1.0
    dt = float(ts[1] - ts[0]) if ts.size > 1 else 1.0
    grid = SpaceTimeGrid(float(xs[0] - dx / 2), float(ts[0] - dt / 2), dx, dt, xs.size, ts.size)
    values = np.empty(grid.shape)
    i = np.searchsorted(xs, rows[:, 0])
    j = np.searchsorted(ts, rows[:, 1])
    values[i, j] = rows[:, 2]
    return SpeedField(grid, values, v_cap=max(DEFAULT_V_CAP, float(values.max())))


def export_field(field: SpeedField, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``field`` as CSV (``.csv``) or as a PPM image (``.ppm``)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        write_field_csv(field, path)
    elif fmt == "ppm":
        write_ppm(field_image(field), path)
    else:
        raise ValueError(f"unsupported export format {fmt!r} (use csv or ppm)")
    return path


def export_scatter(trajs: Sequence[Trajectory], grid: SpaceTimeGrid, path: str | Path,
                   tile_dx: float = 50.0, tile_dt: float = 30.0) -> int:
    """Edie flow/density per tile as CSV; returns the number of tiles written."""
    rows = flow_density_tiles(trajs, grid, tile_dx, tile_dt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_lo_m", "t_lo_s", "k_veh_per_km", "q_veh_per_hr"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return len(rows)

"""Binary kernel supports: isotropic (full) and anisotropic (kinematic-wave) masks.

Kernel axes are (space, time): row offset ``i`` is downstream-positive, column
offset ``j`` is future-positive, both measured from the kernel centre. A wave
moving at ``c`` m/s covers ``c * dt / dx`` rows per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import KMPH

# Closed-set tolerance (in cells) for boundary-touching intersections.
TOUCH_TOL = 1e-9


@dataclass(frozen=True)
class WaveParams:
    """Wave speeds in kmph: free-flow range ``[c_v_min, c_v_max]``, backward shock speed ``c_w``."""

    c_v_max: float = 100.0
    c_v_min: float = 60.0
    c_w: float = 18.0

    def __post_init__(self) -> None:
        if not (self.c_v_max >= self.c_v_min > 0):
            raise ValueError("need c_v_max >= c_v_min > 0")
        if not self.c_w > 0:
            raise ValueError("c_w must be positive")

    def slopes(self, dx: float, dt: float) -> tuple[float, float, float]:
        """``(s_min, s_max, s_w)`` in cells of space per cell of time."""
        k = KMPH * dt / dx
        return self.c_v_min * k, self.c_v_max * k, self.c_w * k


@dataclass(frozen=True, eq=False)
class KernelMask:
    cells: np.ndarray

    def __post_init__(self) -> None:
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or cells.shape[0] % 2 == 0 or cells.shape[1] % 2 == 0:
            raise ValueError(f"mask must be a 2-D array with odd sides, got {cells.shape}")
        kh, kw = cells.shape
        if not cells[kh // 2, kw // 2]:
            raise ValueError("mask centre must be set")
        if not np.array_equal(cells, cells[::-1, ::-1]):
            raise ValueError("mask must be point-symmetric about its centre")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def k_h(self) -> int:
        return self.cells.shape[0]

    @property
    def k_w(self) -> int:
        return self.cells.shape[1]

    @property
    def cardinality(self) -> int:
        return int(self.cells.sum())

    def offsets(self) -> list[tuple[int, int]]:
        """Kernel index pairs ``(a, b)`` (0-based, row-major) of the support."""
        return [tuple(map(int, ab)) for ab in np.argwhere(self.cells)]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KernelMask) and np.array_equal(self.cells, other.cells)

    def to_text(self) -> str:
        """Rows printed downstream-first (top = largest space offset), time left to right."""
        return "\n".join(" ".join("1" if c else "0" for c in row) for row in self.cells[::-1])


def _check_odd(k_h: int, k_w: int) -> None:
    if k_h < 1 or k_w < 1 or k_h % 2 == 0 or k_w % 2 == 0:
        raise ValueError(f"kernel sides must be odd and positive, got {k_h}x{k_w}")


def build_isotropic_mask(k_h: int, k_w: int) -> KernelMask:
    _check_odd(k_h, k_w)
    return KernelMask(np.ones((k_h, k_w), dtype=bool))


def wave_regions(k_h: int, k_w: int, waves: WaveParams, dx: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Free-flow cone and congested line cells, each a ``k_h x k_w`` boolean array.

    For every off-centre time column ``j`` the closed cell rectangle
    ``[i-1/2, i+1/2] x [j-1/2, j+1/2]`` is kept when it meets the wave set over
    that column's time slab. The centre column holds only the centre cell:
    both wave sets pass through the centre point.
    """
    _check_odd(k_h, k_w)
    if not (dx > 0 and dt > 0):
        raise ValueError("dx and dt must be positive")
    s_min, s_max, s_w = waves.slopes(dx, dt)
    rh, rw = k_h // 2, k_w // 2
    free = np.zeros((k_h, k_w), dtype=bool)
    cong = np.zeros((k_h, k_w), dtype=bool)
    rows = np.arange(-rh, rh + 1)
    for j in range(-rw, rw + 1):
        if j == 0:
            continue
        t_lo, t_hi = j - 0.5, j + 0.5
        # x = s*t is bilinear, so its range over the box sits at the corners
        corners = [s * t for s in (s_min, s_max) for t in (t_lo, t_hi)]
        free[:, j + rw] = _rows_hit(rows, min(corners), max(corners))
        line = (-s_w * t_lo, -s_w * t_hi)
        cong[:, j + rw] = _rows_hit(rows, min(line), max(line))
    return free, cong


def _rows_hit(rows: np.ndarray, x_lo: float, x_hi: float) -> np.ndarray:
    return (rows - 0.5 <= x_hi + TOUCH_TOL) & (rows + 0.5 >= x_lo - TOUCH_TOL)


def build_anisotropic_mask(k_h: int, k_w: int, waves: WaveParams | None = None,
                           dx: float = 10.0, dt: float = 1.0) -> KernelMask:
    """Union of the free-flow cone and the backward shock line, centre forced on."""
    free, cong = wave_regions(k_h, k_w, waves or WaveParams(), dx, dt)
    cells = free | cong
    cells[k_h // 2, k_w // 2] = True
    return KernelMask(cells)

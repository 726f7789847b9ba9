"""Probe-vehicle sampling and the 3-channel input encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import SpaceTimeGrid, Trajectory

DEFAULT_V_SCALE = 128.0


@dataclass(frozen=True)
class ProbeInputTensor:
    """``channels`` is ``(nx, nt, 3)`` uint8; empty cells are (0, 0, 0)."""

    grid: SpaceTimeGrid
    channels: np.ndarray

    def __post_init__(self) -> None:
        ch = np.asarray(self.channels)
        if ch.shape != self.grid.shape + (3,):
            raise ValueError(f"channels shape {ch.shape} does not match grid {self.grid.shape}")
        if ch.dtype != np.uint8:
            raise ValueError("channels must be uint8")

    def occupied(self) -> np.ndarray:
        return self.channels.any(axis=-1)

    def scaled(self) -> np.ndarray:
        """Channels as floats in [0, 1] (network input)."""
        return self.channels.astype(np.float32) / 255.0


def sample_probes(trajs: Sequence[Trajectory], rate: float, seed: int) -> list[Trajectory]:
    """Pick ``round(rate * N)`` vehicles (at least one) uniformly without replacement.

    The returned list keeps the input order.
    """
    n = len(trajs)
    if n == 0:
        raise ValueError("no trajectories to sample from")
    if not 0 < rate <= 1:
        raise ValueError(f"penetration rate must be in (0, 1], got {rate}")
    k = max(1, int(np.floor(rate * n + 0.5)))
    k = min(k, n)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=k, replace=False))
    return [trajs[i] for i in picked]


def encode_speeds(mean_kmph: np.ndarray, v_scale: float = DEFAULT_V_SCALE) -> np.ndarray:
    """Channel triples for occupied cells with the given mean speeds."""
    u = np.clip(np.asarray(mean_kmph, dtype=float) / v_scale, 0.0, 1.0)
    q = np.floor(254.0 * u + 0.5).astype(np.int64)
    out = np.empty(u.shape + (3,), dtype=np.uint8)
    out[..., 0] = 1 + q
    out[..., 1] = 255 - q
    out[..., 2] = 128
    return out


def encode_input(probes: Sequence[Trajectory], grid: SpaceTimeGrid,
                 v_scale: float = DEFAULT_V_SCALE) -> ProbeInputTensor:
    """Average the recorded speed samples falling in each cell and map them to colours."""
    if not v_scale > 0:
        raise ValueError("v_scale must be positive")
    total = np.zeros(grid.shape)
    count = np.zeros(grid.shape, dtype=np.int64)
    for tr in probes:
        i, j, inside = grid.cell_indices(tr.t, tr.x)
        np.add.at(total, (i[inside], j[inside]), tr.v[inside])
        np.add.at(count, (i[inside], j[inside]), 1)
    channels = np.zeros(grid.shape + (3,), dtype=np.uint8)
    occ = count > 0
    channels[occ] = encode_speeds(total[occ] / count[occ], v_scale)
    return ProbeInputTensor(grid, channels)

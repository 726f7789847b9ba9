"""Sliding-window datasets and the constrained training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import SpaceTimeGrid, SpeedField, Trajectory
from .groundtruth import InterpolationParams, interpolate_speed_field
from .microsim import record_section, regime_scenario, simulate
from .nn.model import ConvModel, loss_and_gradients, predict_scaled
from .nn.optim import adam_init, adam_project_step
from .probes import DEFAULT_V_SCALE, ProbeInputTensor, encode_input, sample_probes

log = logging.getLogger(__name__)

REGIMES = ("free", "slow", "congested")
WINDOW = (80, 60)
DATASET_FORMAT = "kwtse-dataset"
DATASET_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class Frame:
    """Complete trajectories of one simulated run on a recording grid."""

    trajectories: Sequence[Trajectory]
    grid: SpaceTimeGrid
    regime: str

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")


@dataclass(frozen=True)
class Sample:
    input: ProbeInputTensor
    target: SpeedField
    regime: str
    penetration: float


@dataclass
class Dataset:
    """Window samples stored as stacked arrays.

    ``inputs`` is ``(N, nx, nt, 3)`` uint8, ``targets`` ``(N, nx, nt)`` float32 kmph.
    """

    inputs: np.ndarray
    targets: np.ndarray
    regimes: np.ndarray
    rates: np.ndarray
    dx: float = 10.0
    dt: float = 1.0

    def __post_init__(self) -> None:
        n = self.inputs.shape[0]
        if self.inputs.ndim != 4 or self.inputs.shape[-1] != 3 or self.inputs.dtype != np.uint8:
            raise ValueError("inputs must be (N, nx, nt, 3) uint8")
        if self.targets.shape != self.inputs.shape[:3]:
            raise ValueError("targets must be (N, nx, nt) matching inputs")
        if self.regimes.shape != (n,) or self.rates.shape != (n,):
            raise ValueError("one regime label and one rate per sample")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx], self.regimes[idx], self.rates[idx],
                       self.dx, self.dt)

    def sample(self, i: int) -> Sample:
        nx, nt = self.inputs.shape[1:3]
        grid = SpaceTimeGrid(0.0, 0.0, self.dx, self.dt, nx, nt)
        return Sample(ProbeInputTensor(grid, self.inputs[i]),
                      SpeedField(grid, self.targets[i].astype(float)),
                      str(self.regimes[i]), float(self.rates[i]))

    def scaled_inputs(self, idx=None) -> np.ndarray:
        x = self.inputs if idx is None else self.inputs[idx]
        return x.astype(np.float32) / np.float32(255.0)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.inputs for p in parts]),
                       np.concatenate([p.targets for p in parts]),
                       np.concatenate([p.regimes for p in parts]),
                       np.concatenate([p.rates for p in parts]), parts[0].dx, parts[0].dt)


def _empty(window: tuple[int, int], dx: float, dt: float) -> Dataset:
    h, w = window
    return Dataset(np.zeros((0, h, w, 3), np.uint8), np.zeros((0, h, w), np.float32),
                   np.zeros(0, dtype="<U9"), np.zeros(0), dx, dt)


def simulate_frame(regime: str, seed: int, *, duration: float = 720.0, warmup: float = 600.0,
                   road_length: float = 2000.0, section: tuple[float, float] = (700.0, 1500.0),
                   dx: float = 10.0, dt: float = 1.0) -> Frame:
    """Simulate a regime preset and keep the recording section after the warm-up.

    Trajectories are clipped to the section and to ``[warmup, warmup + duration]``
    so that penetration rates refer to vehicles actually observed.
    """
    scenario = regime_scenario(regime, warmup + duration, seed)
    trajs = record_section(simulate(scenario, road_length), *section)
    t_lo, t_hi = warmup, warmup + duration
    kept = []
    for tr in trajs:
        sel = (tr.t >= t_lo) & (tr.t <= t_hi)
        if sel.any():
            kept.append(Trajectory(tr.vehicle_id, tr.t[sel], tr.x[sel], tr.v[sel]))
    nx = int(round((section[1] - section[0]) / dx))
    grid = SpaceTimeGrid(0.0, t_lo, dx, dt, nx, int(round(duration / dt)))
    return Frame(kept, grid, regime)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def window_starts(nt: int, width: int, stride: int) -> np.ndarray:
    if nt < width:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, nt - width + 1, stride, dtype=np.int64)


def build_dataset(frames: Sequence[Frame], penetration_rates: Sequence[float], *,
                  window: tuple[int, int] = WINDOW, stride_t: int = 2, seeds: Sequence[int] = (0,),
                  shuffle_seed: int | None = 0, v_scale: float = DEFAULT_V_SCALE,
                  interp: InterpolationParams | None = None) -> Dataset:
    """Slice every (frame, rate, seed) combination into ``window`` samples.

    Probes are drawn once per frame, then the encoded input and the true field
    are cut into windows advancing ``stride_t`` columns. Frames shorter than
    the window are skipped. The result is shuffled with ``shuffle_seed``
    (``None`` keeps construction order).
    """
    if stride_t < 1:
        raise ValueError("stride_t must be at least 1")
    h, w = window
    parts = []
    dx = dt = None
    for fi, frame in enumerate(frames):
        g = frame.grid
        if dx is None:
            dx, dt = g.dx, g.dt
        elif (g.dx, g.dt) != (dx, dt):
            raise ValueError("all frames must share cell dimensions")
        if g.nx < h or g.nt < w:
            log.warning("frame %d (%dx%d) is smaller than the %dx%d window; skipped", fi, g.nx, g.nt, h, w)
            continue
        truth = interpolate_speed_field(frame.trajectories, g, interp).values.astype(np.float32)
        starts = window_starts(g.nt, w, stride_t)
        for ri, rate in enumerate(penetration_rates):
            for seed in seeds:
                probes = sample_probes(frame.trajectories, rate, derive_seed(seed, fi, ri))
                enc = encode_input(probes, g, v_scale).channels
                for i0 in range(0, g.nx - h + 1, h):
                    xs = np.stack([enc[i0:i0 + h, j:j + w] for j in starts])
                    ys = np.stack([truth[i0:i0 + h, j:j + w] for j in starts])
                    parts.append(Dataset(xs, ys, np.full(len(starts), frame.regime, dtype="<U9"),
                                         np.full(len(starts), float(rate)), g.dx, g.dt))
    if not parts:
        return _empty(window, dx or 10.0, dt or 1.0)
    data = Dataset.concat(parts)
    if shuffle_seed is not None:
        data = data.subset(np.random.default_rng(shuffle_seed).permutation(len(data)))
    return data


def mix_datasets(datasets: Sequence[Dataset], weights: Sequence[float], seed: int = 0) -> Dataset:
    """Draw from each dataset in proportion to ``weights`` without replacement.

    The total is the largest size for which no dataset is exhausted; per-set
    counts are rounded shares of that total.
    """
    if not datasets:
        raise ValueError("no datasets to mix")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(datasets),) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be nonnegative, not all zero, one per dataset")
    p = w / w.sum()
    sizes = np.array([len(d) for d in datasets], dtype=float)
    active = p > 0
    if np.any(sizes[active] == 0):
        raise ValueError("a dataset with positive weight is empty")
    total = float(np.min(sizes[active] / p[active]))
    counts = np.minimum(np.floor(p * total + 0.5), sizes).astype(np.int64)
    rng = np.random.default_rng(seed)
    parts = []
    for d, k in zip(datasets, counts):
        if k > 0:
            parts.append(d.subset(np.sort(rng.choice(len(d), size=k, replace=False))))
    mixed = Dataset.concat(parts)
    return mixed.subset(rng.permutation(len(mixed)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 300
    learning_rate: float = 1e-3
    seed: int = 0
    v_scale: float = DEFAULT_V_SCALE
    shuffle: bool = True
    val_fraction: float = 0.1
    deterministic: bool = True
    chunk: int = 8

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_rmse_kmph: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.train_loss, self.val_loss, self.val_rmse_kmph)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/validation index sets (at least one training sample)."""
    perm = np.random.default_rng(derive_seed(seed, 1)).permutation(n)
    n_val = int(round(n * val_fraction))
    n_val = min(n_val, n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def dataset_loss(model: ConvModel, data: Dataset, idx: np.ndarray, v_scale: float, chunk: int = 8) -> float:
    """Mean squared error in scaled units over the selected samples."""
    total, cells = 0.0, 0
    for s in range(0, idx.size, 64):
        sel = idx[s:s + 64]
        out = predict_scaled(model, data.scaled_inputs(sel), chunk)
        d = out.astype(np.float64) - data.targets[sel] / v_scale
        total += float(np.sum(d * d))
        cells += d.size
    return total / cells


def train(model: ConvModel, data: Dataset, config: TrainConfig = TrainConfig()) -> tuple[ConvModel, History]:
    """Projected-Adam training with a held-out validation split.

    Returns the parameters with the lowest validation loss (the final ones
    when there is no validation split) and the per-epoch history.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if abs(model.v_scale - config.v_scale) > 0:
        raise ValueError(f"model v_scale {model.v_scale} differs from config {config.v_scale}")
    tr_idx, va_idx = split_indices(len(data), config.val_fraction, config.seed)
    rng = np.random.default_rng(derive_seed(config.seed, 2))
    state = adam_init(model, config.learning_rate)
    hist = History()
    best, best_val = None, math.inf
    vs = config.v_scale
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(tr_idx) if config.shuffle else tr_idx
        run, seen = 0.0, 0
        for s in range(0, order.size, config.batch_size):
            b = order[s:s + config.batch_size]
            x = data.scaled_inputs(b)
            y = data.targets[b] / np.float32(vs)
            lval, grads = loss_and_gradients(model, x, y, config.chunk)
            if not math.isfinite(lval):
                raise TrainingDiverged(f"loss became {lval} at epoch {epoch}, batch starting {s}")
            adam_project_step(model, grads, state)
            run += lval * b.size
            seen += b.size
        train_loss = run / seen
        if va_idx.size:
            val = dataset_loss(model, data, va_idx, vs, config.chunk)
            if not math.isfinite(val):
                raise TrainingDiverged(f"validation loss became {val} at epoch {epoch}")
        else:
            val = math.nan
        hist.epoch.append(epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val)
        hist.val_rmse_kmph.append(math.sqrt(val) * vs if va_idx.size else math.nan)
        log.info("epoch %d train_loss %.6f val_loss %.6f", epoch, train_loss, val)
        if va_idx.size and val < best_val:
            best_val, best = val, model.copy()
    if best is None:
        return model, hist
    return best, hist


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_history_csv(hist: History, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_rmse_kmph"])
        for row in hist.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def save_dataset(data: Dataset, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "dx": data.dx, "dt": data.dt,
              "meta": meta or {}}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 inputs=data.inputs, targets=data.targets, regimes=data.regimes, rates=data.rates)
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["header"].tobytes().decode())
            if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
                raise ValueError(f"{path}: not a supported dataset cache")
            return Dataset(z["inputs"], z["targets"], z["regimes"], z["rates"], header["dx"], header["dt"])
    except (OSError, KeyError, EOFError) as exc:
        raise ValueError(f"{path}: cannot read dataset cache ({exc})") from exc


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)

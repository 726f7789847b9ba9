"""Averaging ensembles of probe-specific models."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import DEFAULT_V_CAP, SpeedField
from .nn.model import ConvModel, predict_scaled
from .nn.serialize import load_model
from .probes import ProbeInputTensor

MANIFEST_FORMAT = "kwtse-ensemble"


@dataclass(frozen=True)
class Ensemble:
    """Ordered ``(model, trained penetration rate)`` members."""

    members: tuple[tuple[ConvModel, float], ...]

    def __post_init__(self) -> None:
        members = tuple(self.members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        object.__setattr__(self, "members", members)

    @property
    def models(self) -> list[ConvModel]:
        return [m for m, _ in self.members]

    @property
    def rates(self) -> list[float]:
        return [r for _, r in self.members]


def predict_kmph(model: ConvModel, x: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Model output in kmph for inputs ``(N, H, W, 3)`` scaled to [0, 1]."""
    return predict_scaled(model, x, chunk) * np.float32(model.v_scale)


def ensemble_predict(ens: Ensemble, x: np.ndarray, weights: Sequence[float] | None = None,
                     chunk: int = 8) -> np.ndarray:
    """Elementwise mean of member predictions (kmph).

    With ``weights`` the mean is weighted; members are summed in list order.
    """
    if weights is None:
        w = np.full(len(ens.members), 1.0 / len(ens.members))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(ens.members),) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be nonnegative, not all zero, one per member")
        w = w / w.sum()
    if len(ens.members) == 1:
        return predict_kmph(ens.models[0], x, chunk)
    acc = None
    for model, wk in zip(ens.models, w):
        out = predict_kmph(model, x, chunk).astype(np.float64)
        if acc is None:
            acc = wk * out
        elif out.shape != acc.shape:
            raise ValueError(f"member output shape {out.shape} differs from {acc.shape}")
        else:
            acc += wk * out
    return acc


def write_manifest(members: Sequence[tuple[str | Path, float]], path: str | Path) -> Path:
    """Manifest listing member model files (relative to the manifest) and their rates."""
    path = Path(path)
    entries = []
    for model_path, rate in members:
        mp = Path(model_path)
        try:
            mp = mp.resolve().relative_to(path.resolve().parent)
        except ValueError:
            mp = mp.resolve()
        entries.append({"model": str(mp), "rate": float(rate)})
    path.write_text(json.dumps({"format": MANIFEST_FORMAT, "members": entries}, indent=2) + "\n")
    return path


def load_ensemble(path: str | Path) -> Ensemble:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: cannot read ensemble manifest ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT or not isinstance(doc.get("members"), list):
        raise ValueError(f"{path}: not an ensemble manifest")
    members = []
    for entry in doc["members"]:
        mp = Path(entry["model"])
        if not mp.is_absolute():
            mp = path.parent / mp
        members.append((load_model(mp), float(entry["rate"])))
    return Ensemble(tuple(members))


def reconstruct(predictor: ConvModel | Ensemble, tensor: ProbeInputTensor) -> SpeedField:
    """Dense speed field for one encoded probe input.

    Outputs are clipped to the field's admissible range ``[0, DEFAULT_V_CAP]``.
    """
    x = tensor.scaled()[None]
    if isinstance(predictor, Ensemble):
        out = ensemble_predict(predictor, x)[0]
    else:
        out = predict_kmph(predictor, x)[0]
    return SpeedField(tensor.grid, np.clip(out.astype(float), 0.0, DEFAULT_V_CAP))

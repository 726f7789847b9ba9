"""Model checkpoints: a single ``.npz`` with a JSON header and raw weight arrays."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from ..masks import KernelMask, WaveParams
from .model import ConvLayer, ConvModel

FORMAT = "kwtse-model"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or internally inconsistent checkpoint."""


def save_model(model: ConvModel, path: str | Path) -> Path:
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "waves": None if model.waves is None else
        {"c_v_max": model.waves.c_v_max, "c_v_min": model.waves.c_v_min, "c_w": model.waves.c_w},
        "dx": model.dx,
        "dt": model.dt,
        "v_scale": model.v_scale,
        "n_encoder": model.n_encoder,
        "n_layers": len(model.layers),
        "meta": model.meta,
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, layer in enumerate(model.layers):
        arrays[f"w{k}"] = layer.weight
        arrays[f"b{k}"] = layer.bias
        arrays[f"m{k}"] = layer.mask.cells
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_model(path: str | Path) -> ConvModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if "header" not in data:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(data["header"].tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    layers = []
    for k in range(header["n_layers"]):
        try:
            w, b, m = data[f"w{k}"], data[f"b{k}"], data[f"m{k}"]
        except KeyError as exc:
            raise CheckpointError(f"{path}: layer {k} is missing") from exc
        try:
            layers.append(ConvLayer(w, b, KernelMask(m)))
        except ValueError as exc:
            raise CheckpointError(f"{path}: layer {k}: {exc}") from exc
        if np.any(w[:, :, ~m] != 0):
            raise CheckpointError(f"{path}: layer {k} has weights outside its mask")
    waves = header["waves"]
    try:
        return ConvModel(layers, header["kind"], None if waves is None else WaveParams(**waves),
                         header["dx"], header["dt"], header["v_scale"], header["n_encoder"],
                         header.get("meta", {}))
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

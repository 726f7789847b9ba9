"""Encoder-decoder CNN with masked kernels, loss and reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..masks import KernelMask, WaveParams, build_anisotropic_mask, build_isotropic_mask
from . import layers as L

# (kernel height, kernel width, filters); three encoder, three decoder, one output layer
DEFAULT_LAYERS: tuple[tuple[int, int, int], ...] = (
    (5, 5, 40), (7, 7, 48), (7, 7, 32),
    (5, 5, 48), (5, 5, 40), (9, 9, 56),
    (7, 7, 1),
)
N_ENCODER = 3
MIN_INPUT_SIDE = 16
DEFAULT_V_SCALE = 128.0


@dataclass
class ConvLayer:
    weight: np.ndarray  # (C_out, C_in, k_h, k_w)
    bias: np.ndarray    # (C_out,)
    mask: KernelMask

    def __post_init__(self) -> None:
        c_out, _, kh, kw = self.weight.shape
        if self.mask.shape != (kh, kw):
            raise ValueError(f"mask {self.mask.shape} does not fit kernel {(kh, kw)}")
        if self.bias.shape != (c_out,):
            raise ValueError("bias length must equal output channels")

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def off_support(self) -> np.ndarray:
        return ~self.mask.cells

    def n_params(self) -> int:
        return self.mask.cardinality * self.c_in * self.c_out + self.c_out


@dataclass
class ConvModel:
    """Encoder (conv-ReLU-pool) x3, decoder (conv-ReLU-upsample-crop) x3, output conv-ReLU.

    ``kind`` is ``"isotropic"`` or ``"anisotropic"``; ``waves``/``dx``/``dt``
    record the geometry the masks were built from.
    """

    layers: list[ConvLayer]
    kind: str = "isotropic"
    waves: WaveParams | None = None
    dx: float = 10.0
    dt: float = 1.0
    v_scale: float = DEFAULT_V_SCALE
    n_encoder: int = N_ENCODER
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.layers) != 2 * self.n_encoder + 1:
            raise ValueError("model needs 2*n_encoder + 1 conv layers")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.c_out != nxt.c_in:
                raise ValueError("channel counts of consecutive layers disagree")
        if self.layers[-1].c_out != 1:
            raise ValueError("output layer must have a single channel")

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weight.dtype

    def copy(self) -> "ConvModel":
        layers = [ConvLayer(l.weight.copy(), l.bias.copy(), l.mask) for l in self.layers]
        return ConvModel(layers, self.kind, self.waves, self.dx, self.dt, self.v_scale,
                         self.n_encoder, dict(self.meta))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out


def glorot_init(rng: np.random.Generator, c_out: int, c_in: int, mask: KernelMask,
                dtype=np.float32) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) with the mask support as receptive field."""
    s = mask.cardinality
    limit = np.sqrt(6.0 / (s * c_in + s * c_out))
    w = rng.uniform(-limit, limit, size=(c_out, c_in) + mask.shape)
    w[:, :, ~mask.cells] = 0.0
    return w.astype(dtype)


def build_model(kind: str = "isotropic", *, seed: int = 0, in_channels: int = 3,
                layer_spec: tuple[tuple[int, int, int], ...] = DEFAULT_LAYERS,
                waves: WaveParams | None = None, dx: float = 10.0, dt: float = 1.0,
                v_scale: float = DEFAULT_V_SCALE, dtype=np.float32) -> ConvModel:
    if kind not in ("isotropic", "anisotropic"):
        raise ValueError(f"unknown kernel kind {kind!r}")
    waves = waves or WaveParams()
    rng = np.random.default_rng(seed)
    layers = []
    c_in = in_channels
    for kh, kw, c_out in layer_spec:
        if kind == "anisotropic":
            mask = build_anisotropic_mask(kh, kw, waves, dx, dt)
        else:
            mask = build_isotropic_mask(kh, kw)
        w = glorot_init(rng, c_out, c_in, mask, dtype)
        layers.append(ConvLayer(w, np.zeros(c_out, dtype=dtype), mask))
        c_in = c_out
    n_enc = (len(layer_spec) - 1) // 2
    return ConvModel(layers, kind, waves if kind == "anisotropic" else None, dx, dt, v_scale, n_enc)


def count_params(model: ConvModel) -> int:
    return sum(layer.n_params() for layer in model.layers)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward_raw(model: ConvModel, x: np.ndarray, keep_tape: bool = False):
    """Network output ``(N, H, W)`` in scaled units for input ``(N, H, W, C)`` in [0, 1]."""
    if x.ndim != 4:
        raise ValueError("input must be (N, H, W, C)")
    if x.shape[1] < MIN_INPUT_SIDE or x.shape[2] < MIN_INPUT_SIDE:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} is smaller than "
                         f"{MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}")
    x = x.astype(model.dtype, copy=False)
    tape = [] if keep_tape else None
    ne = model.n_encoder
    convs = model.layers
    sizes = []
    h = x
    for i, layer in enumerate(convs):
        h, c = L.conv_forward(h, layer.weight, layer.bias, layer.mask.cells, need_input_grad=i > 0)
        if keep_tape:
            tape.append(("conv", i, c))
        h, c = L.relu_forward(h)
        if keep_tape:
            tape.append(("relu", c))
        if i < ne:
            sizes.append(h.shape[1:3])
            h, c = L.maxpool2_forward(h)
            if keep_tape:
                tape.append(("pool", c))
        elif i < 2 * ne:
            h, c = L.upsample2_forward(h)
            if keep_tape:
                tape.append(("up", c))
            th, tw = sizes[2 * ne - 1 - i]
            h, c = L.crop_forward(h, th, tw)
            if keep_tape:
                tape.append(("crop", c))
    return h[..., 0], tape


def backward(model: ConvModel, tape, dout: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients ``[(dweight, dbias), ...]`` per conv layer given d(loss)/d(output)."""
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.layers)
    g = dout[..., None]
    for entry in reversed(tape):
        op = entry[0]
        if op == "conv":
            _, i, cache = entry
            g, dw, db = L.conv_backward(g, cache)
            grads[i] = (dw, db)
        elif op == "relu":
            g = L.relu_backward(g, entry[1])
        elif op == "pool":
            g = L.maxpool2_backward(g, entry[1])
        elif op == "up":
            g = L.upsample2_backward(g, entry[1])
        elif op == "crop":
            g = L.crop_backward(g, entry[1])
    return grads


def loss(estimate: np.ndarray, target: np.ndarray) -> float:
    """Mean squared difference over all cells."""
    estimate = np.asarray(estimate)
    target = np.asarray(target)
    if estimate.shape != target.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {target.shape}")
    d = estimate.astype(np.float64) - target
    return float(np.mean(d * d))


def loss_and_gradients(model: ConvModel, x: np.ndarray, y: np.ndarray, chunk: int = 8):
    """Mean-squared loss over a batch and its exact gradients.

    ``x`` is ``(N, H, W, C)`` in [0, 1], ``y`` is ``(N, H, W)`` in scaled units.
    Samples are processed in fixed-order chunks so memory stays bounded.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    n_cells = y.size
    total = 0.0
    acc = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        yb = y[start:start + chunk].astype(model.dtype, copy=False)
        out, tape = forward_raw(model, xb, keep_tape=True)
        diff = out - yb
        total += float(np.sum(diff.astype(np.float64) ** 2))
        grads = backward(model, tape, (2.0 / n_cells) * diff)
        for (aw, ab), (gw, gb) in zip(acc, grads):
            aw += gw
            ab += gb
    return total / n_cells, acc


def gradients(model: ConvModel, x: np.ndarray, y: np.ndarray, chunk: int = 8):
    return loss_and_gradients(model, x, y, chunk)[1]


def predict_scaled(model: ConvModel, x: np.ndarray, chunk: int = 8) -> np.ndarray:
    outs = [forward_raw(model, x[s:s + chunk])[0] for s in range(0, x.shape[0], chunk)]
    return np.concatenate(outs, axis=0)

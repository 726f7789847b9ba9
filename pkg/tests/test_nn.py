import numpy as np
import pytest

from kwtse.masks import KernelMask, build_anisotropic_mask, build_isotropic_mask
from kwtse.nn import (CheckpointError, ConvLayer, ConvModel, adam_init, adam_project_step,
                      build_model, count_params, forward_raw, load_model, loss, loss_and_gradients,
                      predict_scaled, save_model)
from kwtse.nn import layers as L

SMALL = ((3, 3, 4), (5, 5, 3), (3, 3, 4), (3, 3, 3), (3, 3, 4), (5, 5, 4), (3, 3, 1))


def _reference_conv(x, w, b, mask):
    n, h, wd, c_in = x.shape
    c_out, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, h, wd, c_out))
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                for c in range(c_out):
                    acc = b[c]
                    for k in range(c_in):
                        for a in range(kh):
                            for q in range(kw):
                                if mask[a, q]:
                                    acc += xp[s, i + a, j + q, k] * w[c, k, a, q]
                    out[s, i, j, c] = acc
    return out


@pytest.mark.parametrize("c_in,c_out,masked", [(2, 3, False), (2, 3, True), (8, 2, False), (8, 2, True)])
def test_conv_matches_loop_reference(c_in, c_out, masked):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 7, c_in))
    mask = build_anisotropic_mask(3, 5).cells if masked else np.ones((3, 5), bool)
    w = rng.normal(size=(c_out, c_in, 3, 5)) * mask
    b = rng.normal(size=c_out)
    out, _ = L.conv_forward(x, w, b, mask)
    np.testing.assert_allclose(out, _reference_conv(x, w, b, mask), rtol=0, atol=1e-12)


def test_conv_identity_and_box():
    x = np.random.default_rng(1).normal(size=(1, 6, 6, 1))
    out, _ = L.conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), np.ones((1, 1), bool))
    np.testing.assert_array_equal(out, x)
    ones = np.ones((1, 5, 5, 1))
    out, _ = L.conv_forward(ones, np.ones((1, 1, 3, 3)), np.zeros(1), np.ones((3, 3), bool))
    assert out[0, 2, 2, 0] == 9.0 and out[0, 0, 0, 0] == 4.0


def test_conv_is_translation_equivariant():
    rng = np.random.default_rng(2)
    x = np.zeros((1, 20, 20, 2))
    x[0, 6:10, 5:9] = rng.normal(size=(4, 4, 2))
    w = rng.normal(size=(3, 2, 5, 5))
    mask = np.ones((5, 5), bool)
    a, _ = L.conv_forward(x, w, np.zeros(3), mask)
    b, _ = L.conv_forward(np.roll(x, (3, 4), axis=(1, 2)), w, np.zeros(3), mask)
    np.testing.assert_allclose(np.roll(a, (3, 4), axis=(1, 2)), b, atol=1e-12)


def test_pointwise_and_resampling_layers():
    x = np.array([[-1.0, 2.0], [0.0, 3.0]]).reshape(1, 2, 2, 1)
    r, _ = L.relu_forward(x)
    assert r.ravel().tolist() == [0.0, 2.0, 0.0, 3.0]
    p, _ = L.maxpool2_forward(np.arange(15.0).reshape(1, 3, 5, 1))
    assert p.shape == (1, 2, 3, 1)
    assert p[0, :, :, 0].tolist() == [[6.0, 8.0, 9.0], [11.0, 13.0, 14.0]]
    u, _ = L.upsample2_forward(np.array([1.0, 2.0]).reshape(1, 1, 2, 1))
    assert u[0, :, :, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2]]
    c, _ = L.crop_forward(np.zeros((1, 6, 8, 1)), 5, 7)
    assert c.shape == (1, 5, 7, 1)
    with pytest.raises(ValueError):
        L.crop_forward(np.zeros((1, 4, 4, 1)), 5, 4)


def test_parameter_counts():
    iso = build_model("isotropic")
    ani = build_model("anisotropic")
    assert count_params(iso) == 443193
    assert count_params(ani) == 185465
    assert round(count_params(ani) / count_params(iso), 3) == 0.418
    tiny = ConvModel([ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), KernelMask(np.ones((1, 1), bool)))],
                     n_encoder=0)
    assert count_params(tiny) == 2


@pytest.mark.parametrize("shape", [(80, 60), (40, 1140), (17, 23)])
def test_output_shape_matches_input(shape):
    m = build_model("anisotropic", seed=1, layer_spec=SMALL)
    x = np.random.default_rng(0).uniform(size=(1,) + shape + (3,))
    out, _ = forward_raw(m, x)
    assert out.shape == (1,) + shape
    assert out.min() >= 0


def test_undersized_input_rejected():
    m = build_model("isotropic", layer_spec=SMALL)
    with pytest.raises(ValueError):
        forward_raw(m, np.zeros((1, 15, 40, 3)))


def test_zero_weights_give_zero_output():
    m = build_model("isotropic", layer_spec=SMALL)
    for layer in m.layers:
        layer.weight[:] = 0
    assert not predict_scaled(m, np.ones((2, 16, 16, 3))).any()


def test_loss_examples():
    assert loss(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    assert loss(np.array([1.0, 3.0]), np.array([1.0, 1.0])) == 2.0
    with pytest.raises(ValueError):
        loss(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("kind", ["isotropic", "anisotropic"])
def test_gradients_match_finite_differences(kind):
    m = build_model(kind, seed=3, layer_spec=SMALL, dtype=np.float64)
    # positive biases keep pre-activations away from the ReLU kink at this step size
    for layer in m.layers:
        layer.bias[:] = 0.5
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(3, 16, 18, 3))
    y = rng.uniform(size=(3, 16, 18))
    _, grads = loss_and_gradients(m, x, y, chunk=2)
    h = 1e-4
    checked = 0
    for k, layer in enumerate(m.layers):
        support = np.argwhere(layer.mask.cells)
        for _ in range(5):
            c_o, c_i = rng.integers(layer.c_out), rng.integers(layer.c_in)
            a, b = support[rng.integers(len(support))]
            idx = (c_o, c_i, a, b)
            orig = layer.weight[idx]
            layer.weight[idx] = orig + h
            lp, _ = loss_and_gradients(m, x, y)
            layer.weight[idx] = orig - h
            lm, _ = loss_and_gradients(m, x, y)
            layer.weight[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads[k][0][idx]) <= 1e-6 + 1e-4 * abs(fd)
            checked += 1
        # masked weights receive no gradient
        assert not grads[k][0][:, :, ~layer.mask.cells].any()
    assert checked >= 30


def test_adam_zero_gradient_leaves_parameters():
    m = build_model("anisotropic", seed=5, layer_spec=SMALL)
    before = [p.copy() for p in m.parameters()]
    st = adam_init(m, lr=1e-2)
    zero = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in m.layers]
    for _ in range(3):
        adam_project_step(m, zero, st)
    for a, b in zip(before, m.parameters()):
        np.testing.assert_array_equal(a, b)


def test_adam_projection_and_plain_update():
    m = build_model("anisotropic", seed=6, layer_spec=SMALL, dtype=np.float64)
    ref = m.copy()
    st = adam_init(m, lr=1e-2)
    rng = np.random.default_rng(7)
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    mom = [np.zeros_like(p) for p in ref.parameters()]
    vel = [np.zeros_like(p) for p in ref.parameters()]
    for step in range(1, 4):
        grads = [(rng.normal(size=l.weight.shape), rng.normal(size=l.bias.shape)) for l in m.layers]
        adam_project_step(m, grads, st)
        flat = [g for pair in grads for g in pair]
        for p, g, mm, vv in zip(ref.parameters(), flat, mom, vel):
            mm[:] = b1 * mm + (1 - b1) * g
            vv[:] = b2 * vv + (1 - b2) * g * g
            p -= lr * (mm / (1 - b1 ** step)) / (np.sqrt(vv / (1 - b2 ** step)) + eps)
        for layer in m.layers:
            assert not layer.weight[:, :, ~layer.mask.cells].any()
    # on the support the projected update equals plain Adam
    for lm, lr_ in zip(m.layers, ref.layers):
        on = lm.mask.cells
        np.testing.assert_allclose(lm.weight[:, :, on], lr_.weight[:, :, on], atol=1e-12)
        np.testing.assert_allclose(lm.bias, lr_.bias, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = build_model("anisotropic", seed=8, layer_spec=SMALL)
    m.meta["note"] = "x"
    p = save_model(m, tmp_path / "m.npz")
    back = load_model(p)
    assert back.kind == "anisotropic" and back.waves == m.waves and back.meta == {"note": "x"}
    for a, b in zip(m.parameters(), back.parameters()):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    x = np.random.default_rng(0).uniform(size=(1, 16, 16, 3))
    np.testing.assert_array_equal(predict_scaled(m, x), predict_scaled(back, x))


def test_checkpoint_errors(tmp_path):
    m = build_model("anisotropic", seed=8, layer_spec=SMALL)
    p = save_model(m, tmp_path / "m.npz")
    raw = p.read_bytes()
    bad = tmp_path / "cut.npz"
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_model(bad)
    m.layers[0].weight[:, :, ~m.layers[0].mask.cells] = 1.0
    save_model(m, tmp_path / "leak.npz")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "leak.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "junk.npz")


def test_mask_shapes_are_enforced():
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((1, 1, 3, 3)), np.zeros(1), build_isotropic_mask(5, 5))

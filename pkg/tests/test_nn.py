import struct

import numpy as np
import pytest
import torch

from lutstyle import nn as tnn
from lutstyle.lut import Lut3d, apply_lut


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for k in range(o):
            for y in range(oh):
                for xx in range(ow):
                    for ch in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                out[i, k, y, xx] += (xp[i, ch, y * stride + dy, xx * stride + dx]
                                                     * w[k, ch, dy, dx])
                    out[i, k, y, xx] += b[k]
    return out


@pytest.mark.parametrize("stride, pad", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_matches_loops(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = tnn.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride, pad)
    np.testing.assert_allclose(got.numpy(), naive_conv(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        tnn.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(3, 3, 3, 3))
    with pytest.raises(ValueError):
        tnn.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 3, 3), torch.zeros(3))


def test_resize_half_pixel_sampling():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(5, 7))
    out = tnn.resize_bilinear(torch.from_numpy(src)[None, None], 3, 4)[0, 0].numpy()

    def sample(y, x):
        y = min(max(y, 0), 4)
        x = min(max(x, 0), 6)
        y0, x0 = min(int(y), 3), min(int(x), 5)
        fy, fx = y - y0, x - x0
        return ((1 - fy) * (1 - fx) * src[y0, x0] + (1 - fy) * fx * src[y0, x0 + 1]
                + fy * (1 - fx) * src[y0 + 1, x0] + fy * fx * src[y0 + 1, x0 + 1])

    want = [[sample((i + 0.5) * 5 / 3 - 0.5, (j + 0.5) * 7 / 4 - 0.5) for j in range(4)]
            for i in range(3)]
    np.testing.assert_allclose(out, want, atol=1e-12)
    same = torch.randn(1, 2, 4, 4)
    assert tnn.resize_bilinear(same, 4, 4) is same


def test_adain_two_pixel():
    content = torch.tensor([[[[0.0, 2.0]]]])
    style = torch.tensor([[[[1.0, 3.0]]]])
    # Both standard deviations carry the same eps, so they cancel for equal spreads.
    np.testing.assert_allclose(tnn.adain(content, style).numpy().ravel(), [1.0, 3.0], rtol=1e-6)


def test_adain_matches_moments():
    rng = np.random.default_rng(2)
    c = rng.normal(2, 3, (2, 4, 5, 5))
    s = rng.normal(-1, 0.5, (2, 4, 6, 3))
    out = tnn.adain(torch.from_numpy(c), torch.from_numpy(s), eps=0.0).numpy()
    np.testing.assert_allclose(out.mean(axis=(2, 3)), s.mean(axis=(2, 3)), atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(2, 3)), s.std(axis=(2, 3)), atol=1e-10)
    with pytest.raises(ValueError):
        tnn.adain(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 2, 2))


def test_lut_tensor_matches_numpy_apply():
    rng = np.random.default_rng(3)
    tables = rng.uniform(0, 1, (2, 5, 5, 5, 3)).astype(np.float32)
    imgs = rng.uniform(0, 1, (2, 3, 6, 7)).astype(np.float32)
    got = tnn.apply_lut_tensor(torch.from_numpy(tables), torch.from_numpy(imgs)).numpy()
    for i in range(2):
        want = apply_lut(Lut3d(tables[i]), imgs[i].transpose(1, 2, 0)).transpose(2, 0, 1)
        np.testing.assert_allclose(got[i], want, atol=1e-6)


def central_diff(f, x, h=1e-3):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, tol=1e-3):
    err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8)
    assert err <= tol, err


def test_lut_lookup_gradients():
    rng = np.random.default_rng(4)
    # Interior table values and pixels away from cell boundaries keep every
    # finite-difference probe on one smooth piece.
    tables = rng.uniform(0.2, 0.8, (1, 3, 3, 3, 3))
    imgs = rng.uniform(0.05, 0.95, (1, 3, 2, 3))
    imgs[np.abs(imgs - 0.5) < 0.02] += 0.05
    probe = rng.normal(size=imgs.shape)

    def loss(t, x):
        return float((tnn.apply_lut_tensor(torch.from_numpy(t), torch.from_numpy(x)).numpy() * probe).sum())

    t = torch.from_numpy(tables.copy()).requires_grad_()
    x = torch.from_numpy(imgs.copy()).requires_grad_()
    (tnn.apply_lut_tensor(t, x) * torch.from_numpy(probe)).sum().backward()
    assert_grad_close(t.grad.numpy(), central_diff(lambda v: loss(v, imgs), tables.copy()))
    assert_grad_close(x.grad.numpy(), central_diff(lambda v: loss(tables, v), imgs.copy()))


def test_adain_and_conv_gradients():
    torch.manual_seed(0)
    c = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    s = torch.randn(1, 2, 4, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: tnn.adain(a, b), (c, s), eps=1e-3, atol=1e-5, rtol=1e-3)
    assert torch.autograd.gradcheck(lambda a, k: tnn.conv2d(a, k, padding=1), (c, w), eps=1e-3, atol=1e-5, rtol=1e-3)


def test_adam_first_step_closed_form():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = tnn.build_optimizer([p], lr=0.01)
    p.grad = torch.tensor([0.5], dtype=torch.float64)
    opt.step()
    # m_hat = g and v_hat = g^2 after bias correction.
    assert p.item() == pytest.approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8), abs=1e-15)


def test_optimizer_skips_frozen():
    a = torch.nn.Linear(2, 2)
    b = torch.nn.Linear(2, 2)
    tnn.freeze(b)
    opt = tnn.build_optimizer(list(a.parameters()) + list(b.parameters()))
    assert sum(len(g["params"]) for g in opt.param_groups) == 2
    with pytest.raises(ValueError):
        tnn.build_optimizer(b.parameters())


def test_mrsw_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32),
               "scalar": np.float32(1.5).reshape(()),
               "ü": rng.normal(size=(4,)).astype(np.float32)}
    tnn.save_checkpoint(tmp_path / "w.mrsw", tensors)
    back = tnn.load_checkpoint(tmp_path / "w.mrsw")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k])
        assert np.array_equal(back[k], tensors[k])


def test_mrsw_layout():
    data = tnn.encode_tensors({"x": np.array([1.0], np.float32)})
    assert data == (b"MRSW" + struct.pack("<III", 1, 1, 1) + b"x"
                    + struct.pack("<II", 1, 1) + b"\x00\x00\x80\x3f")


def test_mrsw_errors_carry_offsets():
    good = tnn.encode_tensors({"x": np.array([1.0, 2.0], np.float32)})
    with pytest.raises(tnn.FormatError) as e:
        tnn.decode_tensors(b"XXXX" + good[4:])
    assert e.value.offset == 0
    with pytest.raises(tnn.FormatError) as e:
        tnn.decode_tensors(good[:4] + struct.pack("<I", 9) + good[8:])
    assert e.value.offset == 4
    with pytest.raises(tnn.FormatError) as e:
        tnn.decode_tensors(good[:-2])
    assert e.value.offset == len(good) - 8
    with pytest.raises(tnn.FormatError) as e:
        tnn.decode_tensors(good + b"\x00")
    assert e.value.offset == len(good)
    nan = good[:-4] + struct.pack("<f", float("nan"))
    with pytest.raises(tnn.FormatError) as e:
        tnn.decode_tensors(nan)
    assert e.value.offset == len(good) - 8


def test_load_module_state_checks_shapes():
    m = torch.nn.Linear(2, 3)
    state = {k: v.numpy() for k, v in m.state_dict().items()}
    state["bias"] = np.zeros(4, np.float32)
    with pytest.raises(ValueError):
        tnn.load_module_state(m, state)
    with pytest.raises(KeyError):
        tnn.load_module_state(m, {"weight": state["weight"]})

import struct

import numpy as np
import pytest
import torch

from lutstyle import prior_mapper as pm
from lutstyle.irstyle import IRStyleModel, transfer
from lutstyle.nn import FormatError

SMALL = [(2, 4, 4), (3, 2, 2), (2, 2, 2), (1, 1, 1)]


def small_file(rng, meta=None):
    return pm.PriorFeatureFile([rng.normal(size=s).astype(np.float32) for s in SMALL], meta or {})


def test_mrsf_bytes():
    pf = pm.PriorFeatureFile([np.ones((1, 1, 1), np.float32)] * 4)
    data = pm.encode_feature_file(pf)
    one = struct.pack("<4I", 3, 1, 1, 1) + b"\x00\x00\x80\x3f"
    assert data == b"MRSF" + struct.pack("<II", 1, 4) + one * 4


def test_mrsf_roundtrip(tmp_path):
    pf = small_file(np.random.default_rng(0), {"prompt": "warm sunset", "seed": "7"})
    pm.write_feature_file(tmp_path / "p.mrsf", pf)
    back = pm.read_feature_file(tmp_path / "p.mrsf")
    assert back.metadata == pf.metadata
    assert all(np.array_equal(a, b) for a, b in zip(back.tensors, pf.tensors))
    assert back.shapes() == SMALL


def test_mrsf_errors_carry_offsets():
    data = pm.encode_feature_file(small_file(np.random.default_rng(1), {"k": "v"}))
    with pytest.raises(FormatError) as e:
        pm.decode_feature_file(b"MRSW" + data[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        pm.decode_feature_file(data[:8] + struct.pack("<I", 3) + data[12:])
    assert e.value.offset == 8
    with pytest.raises(FormatError) as e:
        pm.decode_feature_file(data[:20])
    assert e.value.offset == 16
    body = pm.encode_feature_file(small_file(np.random.default_rng(1)))
    with pytest.raises(FormatError) as e:
        pm.decode_feature_file(body + b"JUNK")
    assert e.value.offset == len(body)


def test_zero_mapper_outputs_zero_at_target_shapes():
    mapper = pm.PriorMapper(SMALL)
    for p in mapper.parameters():
        torch.nn.init.zeros_(p)
    out = pm.map_prior_features(small_file(np.random.default_rng(2)), mapper)
    assert [tuple(o.shape[1:]) for o in out] == [(16, 128, 128), (32, 64, 64), (64, 32, 32), (128, 16, 16)]
    assert all(torch.count_nonzero(o) == 0 for o in out)


def test_mapper_matches_manual_conv_chain():
    torch.manual_seed(3)
    mapper = pm.PriorMapper(SMALL, [(3, 8, 8), (2, 2, 2), (2, 3, 3), (1, 2, 2)])
    pf = small_file(np.random.default_rng(3))
    out = pm.map_prior_features(pf, mapper)
    for x, block, o, (_, h, w) in zip(pf.as_batch(), mapper.blocks, out, mapper.target_shapes):
        a = torch.relu(torch.nn.functional.conv2d(x, block[0].weight, block[0].bias, padding=1))
        b = torch.nn.functional.conv2d(a, block[2].weight, block[2].bias, padding=1)
        if b.shape[-2:] != (h, w):
            b = torch.nn.functional.interpolate(b, size=(h, w), mode="bilinear", align_corners=False)
        np.testing.assert_allclose(o.numpy(), b.detach().numpy(), atol=1e-6)
    with pytest.raises(ValueError):
        mapper([torch.zeros(1, *s) for s in SMALL[::-1]])


def test_blend_properties():
    rng = np.random.default_rng(4)
    a = [torch.from_numpy(rng.normal(size=(1, 2, 3, 3))) for _ in range(2)]
    b = [torch.from_numpy(rng.normal(size=(1, 2, 3, 3))) for _ in range(2)]
    assert all(torch.equal(x, y) for x, y in zip(pm.blend_style_features(a, b, 1.0), a))
    assert all(torch.equal(x, y) for x, y in zip(pm.blend_style_features(a, b, 0.0), b))
    half = pm.blend_style_features(a, b, 0.5)
    assert all(torch.allclose(h, (x + y) / 2) for h, x, y in zip(half, a, b))
    with pytest.raises(ValueError):
        pm.blend_style_features(a, b, 1.5)
    with pytest.raises(ValueError):
        pm.blend_style_features(a, b[:1], 0.5)


def test_mapper_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(5)
    mapper = pm.PriorMapper(SMALL)
    pm.save_mapper(tmp_path / "m.mrsw", mapper)
    back = pm.load_mapper(tmp_path / "m.mrsw")
    assert back.in_shapes == mapper.in_shapes and back.target_shapes == mapper.target_shapes
    assert all(torch.equal(x, y) for x, y in zip(mapper.state_dict().values(), back.state_dict().values()))


@pytest.fixture(scope="module")
def tiny_setup():
    torch.manual_seed(6)
    model = IRStyleModel("interaction-dual", lut_size=9, basis_count=4)
    with torch.no_grad():
        for head in (model.head_content, model.head_style):
            head.fc.weight.normal_(0, 0.5)
    rng = np.random.default_rng(6)
    contents = [rng.uniform(0, 1, (256, 256, 3)).astype(np.float32) for _ in range(2)]
    styles = [rng.uniform(0, 1, (256, 256, 3)).astype(np.float32) ** 2 for _ in range(2)]
    return model, pm.make_self_distill_triplets(model, contents, styles)


def test_triplets_hold_the_image_transfer(tiny_setup):
    model, triplets = tiny_setup
    assert triplets[0].priors.metadata["source"] == "self-distill"
    assert triplets[0].priors.shapes() == [(16, 128, 128), (32, 64, 64), (64, 32, 32), (128, 16, 16)]
    with pytest.raises(ValueError):
        pm.Triplet(triplets[0].content, triplets[0].priors, triplets[0].target[:10])


def test_mapper_step_keeps_image_model_frozen(tiny_setup):
    model, triplets = tiny_setup
    before = {k: v.clone() for k, v in model.state_dict().items()}
    torch.manual_seed(7)
    trainer = pm.MapperTrainer(pm.PriorMapper(triplets[0].priors.shapes()), model, lr=1e-3)
    m_before = [p.clone() for p in trainer.mapper.parameters()]
    hist = pm.train_mapper(trainer, triplets, steps=2, batch=2)
    assert len(hist) == 2 and hist[0]["teach"] > 0
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert any(not torch.equal(a, b) for a, b in zip(m_before, trainer.mapper.parameters()))


def test_blend_endpoints_reproduce_single_references(tiny_setup):
    model, triplets = tiny_setup
    torch.manual_seed(8)
    mapper = pm.PriorMapper(triplets[0].priors.shapes())
    content = triplets[0].content
    style = np.random.default_rng(9).uniform(0, 1, (300, 200, 3)).astype(np.float32)
    priors = triplets[1].priors
    image_only = transfer(content, style, model).output
    text_only = pm.mapped_transfer(content, priors, mapper, model).output
    assert np.array_equal(pm.mapped_transfer(content, priors, mapper, model, style, 1.0).output, image_only)
    assert np.array_equal(pm.mapped_transfer(content, priors, mapper, model, style, 0.0).output, text_only)

import numpy as np
import pytest
import torch

from denoise_transformer import imagepipe as ip
from denoise_transformer.cadt import StackConfig
from denoise_transformer.errors import ShapeError
from denoise_transformer.model import DenoiserModel, ModelConfig, forward_blind, full_inference

TINY = StackConfig(groups=1, units_per_group=1, embed_dim=8, window=4, heads=2)


def model_for(mode="grey", s=4, p=1, sne=True, seed=0, randomize=0.0):
    m = DenoiserModel.build(ModelConfig(TINY, mode, sne, mask_stride=s, pd_factor=p), seed)
    if randomize:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for t in m.params.entries.values():
                t.add_(torch.randn(t.shape, generator=g) * randomize)
    return m


def zero_model(mode="grey", s=4, p=1):
    return DenoiserModel.zeros(ModelConfig(TINY, mode, True, mask_stride=s, pd_factor=p))


def img(seed, h, w, c=1):
    return np.random.default_rng(seed).random((h, w, c)).astype(np.float32)


def test_zero_model_stage2_equals_blind():
    blind = torch.rand(4, 8, 8, 1)
    s1, s2 = forward_blind(zero_model(), blind)
    assert torch.equal(s1, blind) and torch.equal(s2, blind)


def test_sne_disabled_stage2_is_stage1():
    m = model_for(sne=False, randomize=0.1)
    s1, s2 = forward_blind(m, torch.rand(3, 8, 8, 1))
    assert s2 is s1
    assert not any(n.startswith("sne.") for n in m.params.names())


def test_forward_shapes():
    m = model_for(mode="synthetic-srgb", randomize=0.1)
    x = torch.rand(5, 12, 8, 3)
    s1, s2 = forward_blind(m, x)
    assert s1.shape == x.shape and s2.shape == x.shape


@pytest.mark.parametrize("s,p", [(4, 1), (2, 2), (1, 1), (4, 2)])
def test_zero_model_constant_identity(s, p):
    x = np.full((16, 16, 1), 0.4213, dtype=np.float32)
    assert np.array_equal(full_inference(x, zero_model(s=s, p=p)), x)


@pytest.mark.parametrize("s,p", [(4, 1), (2, 2)])
def test_zero_model_returns_fill(s, p):
    x = img(1, 16, 16)
    fill = ip.pd_merge([ip.neighbor_mean(sub) for sub in ip.pd_split(x, p)], p)
    np.testing.assert_allclose(full_inference(x, zero_model(s=s, p=p)), fill, atol=1e-6, rtol=0)


def test_zero_model_raw_constant_identity():
    x = np.full((16, 16, 1), 0.25, dtype=np.float32)
    assert np.array_equal(full_inference(x, zero_model("raw-bayer", s=2)), x)


def test_full_inference_deterministic_and_clamped():
    m = model_for(randomize=2.0)
    x = img(2, 16, 16)
    a, b = full_inference(x, m), full_inference(x, m)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_divisibility_error():
    with pytest.raises(ShapeError):
        full_inference(img(3, 18, 16), zero_model(s=4))
    with pytest.raises(ShapeError):
        full_inference(img(3, 16, 16, 3), zero_model())


def test_p1_matches_direct_pipeline():
    m = model_for(randomize=0.1)
    for seed in range(3):
        x = img(seed, 16, 16)
        st = ip.mask_map(x, 4)
        with torch.no_grad():
            out = forward_blind(m, torch.from_numpy(st.blinds))[1].numpy()
        ref = np.clip(ip.collect_blind(out, st), 0, 1)
        np.testing.assert_array_equal(full_inference(x, m), ref)


def test_chunking_does_not_change_output():
    m = model_for(randomize=0.1)
    x = img(4, 16, 16)
    np.testing.assert_allclose(full_inference(x, m, chunk=3), full_inference(x, m), atol=1e-6, rtol=0)


def test_blind_spot_provenance_8x8():
    m = model_for(randomize=0.1)
    _, trace = full_inference(img(5, 8, 8), m, return_trace=True)
    assert trace["masked"].all()
    assert sorted(np.unique(trace["source"])) == list(range(16))


@pytest.mark.parametrize("p", [1, 2])
def test_output_pixel_ignores_own_input(p):
    m = model_for(s=2 if p == 2 else 4, p=p, randomize=0.2)
    x = img(6, 16, 16)
    base = full_inference(x, m)
    rng = np.random.default_rng(7)
    for _ in range(10):
        r, c = rng.integers(0, 16, 2)
        y = x.copy()
        y[r, c] = 1.0 - y[r, c]
        assert full_inference(y, m)[r, c] == base[r, c]


def test_model_config_round_trip():
    cfg = ModelConfig(TINY, "raw-bayer", False, 2.0, 2, 2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.image_channels == 4 and cfg.input_channels == 1

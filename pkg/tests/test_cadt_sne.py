import pytest
import torch

from denoise_transformer.cadt import (StackConfig, cadt_forward, encoder_forward, init_encoder,
                                      init_lfe, init_stack, lfe_forward, lfe_widths, stack_forward)
from denoise_transformer.errors import ConfigError
from denoise_transformer.sne import init_sne, sne_forward
from denoise_transformer.tensorcore import (ParamStore, Scope, conv2d, grad_check, layer_norm,
                                            leaky_relu)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def randomize(store, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for t in store.entries.values():
            t.copy_(torch.randn(t.shape, generator=g, dtype=t.dtype) * scale)
    return store


def unit_store(cfg, seed=0, dtype=D):
    s = ParamStore(dtype)
    init_encoder(s, "u.global", cfg, seed)
    init_lfe(s, "u.local", cfg.embed_dim, seed)
    return s


def test_encoder_zero_weights_is_identity():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = unit_store(cfg).zero_()
    e = rand(1, 8, 8, 16)
    assert torch.equal(encoder_forward(e, s.scope("u.global"), 4, 2), e)


def test_encoder_shape():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = unit_store(cfg)
    assert encoder_forward(rand(1, 8, 8, 16), s.scope("u.global"), 4, 2, 2.0).shape == (1, 8, 8, 16)


def test_encoder_gradient():
    cfg = StackConfig(1, 1, 8, 2, 2)
    s = randomize(unit_store(cfg), 1)
    inputs = {"E": rand(1, 4, 4, 8, seed=2), **{k: v for k, v in s.items() if ".global." in k}}
    rep = grad_check(lambda t: encoder_forward(t["E"], Scope(t, "u.global"), 2, 2), inputs, eps=1e-6)
    assert rep.ok, rep.errors


def test_lfe_zero_weights():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = unit_store(cfg).zero_()
    assert not lfe_forward(rand(1, 8, 8, 16), s.scope("u.local")).any()


def plain_lfe(e, p):
    """Local branch with ordinary convolutions in the deformable slots."""
    x = layer_norm(e, -1, p["ln.gain"], p["ln.shift"])
    x = conv2d(x, p["reduce.weight"], p["reduce.bias"])
    x = leaky_relu(conv2d(x, p["mid.weight"], p["mid.bias"]), 0.2)
    x = leaky_relu(conv2d(x, p["deform1.weight"], p["deform1.bias"]), 0.2)
    x = leaky_relu(conv2d(x, p["deform2.weight"], p["deform2.bias"]), 0.2)
    return conv2d(x, p["expand.weight"], p["expand.bias"])


def test_lfe_zero_offsets_equal_plain_convs():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = unit_store(cfg, seed=3)
    p = s.scope("u.local")
    assert not p["deform1.offset.weight"].any()
    e = rand(2, 8, 8, 16, seed=4)
    torch.testing.assert_close(lfe_forward(e, p), plain_lfe(e, p), atol=1e-6, rtol=0)


def test_lfe_channel_schedule():
    cfg = StackConfig(1, 1, 16, 4, 2)
    out, mids = lfe_forward(rand(1, 8, 8, 16), unit_store(cfg).scope("u.local"), return_intermediates=True)
    assert mids["reduction"].shape[-1] == 2
    assert mids["mid"].shape[-1] == 4
    assert mids["local"].shape[-1] == 8
    assert out.shape == (1, 8, 8, 16)


def test_lfe_gradient():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = randomize(unit_store(cfg), 5)
    inputs = {"E": rand(1, 4, 4, 16, seed=6), **{k: v for k, v in s.items() if ".local." in k}}
    rep = grad_check(lambda t: lfe_forward(t["E"], Scope(t, "u.local")), inputs, eps=1e-6)
    assert rep.ok, rep.errors


def test_lfe_width_rounding_and_minimum():
    assert lfe_widths(60) == (7, 15, 30)
    assert lfe_widths(16) == (2, 4, 8)
    with pytest.raises(ConfigError):
        lfe_forward(rand(1, 4, 4, 4), {})
    with pytest.raises(ConfigError):
        StackConfig(1, 1, 6, 4, 2)


def test_cadt_branch_decomposition():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = randomize(unit_store(cfg), 7)
    e = rand(2, 8, 8, 16, seed=8)
    p = s.scope("u")
    full = cadt_forward(e, p, cfg)
    enc = encoder_forward(e, p.scope("global"), 4, 2, 2.0)
    loc = lfe_forward(e, p.scope("local"))
    torch.testing.assert_close(full, enc + loc, atol=1e-6, rtol=0)
    torch.testing.assert_close(full - loc, enc, atol=1e-6, rtol=0)


def test_cadt_local_disabled_is_encoder():
    cfg = StackConfig(1, 1, 16, 4, 2, enable_local=False)
    s = randomize(unit_store(StackConfig(1, 1, 16, 4, 2)), 9)
    e = rand(1, 8, 8, 16, seed=10)
    assert torch.equal(cadt_forward(e, s.scope("u"), cfg), encoder_forward(e, s.scope("u.global"), 4, 2, 2.0))


def test_cadt_zero_lfe_is_encoder():
    cfg = StackConfig(1, 1, 16, 4, 2)
    s = randomize(unit_store(cfg), 11)
    with torch.no_grad():
        for k, t in s.items():
            if ".local." in k:
                t.zero_()
    e = rand(1, 8, 8, 16, seed=12)
    torch.testing.assert_close(cadt_forward(e, s.scope("u"), cfg),
                               encoder_forward(e, s.scope("u.global"), 4, 2, 2.0), atol=0, rtol=0)


def test_stack_zero_weights_zero_noise():
    cfg = StackConfig(1, 2, 16, 4, 2)
    s = init_stack(ParamStore(), cfg, 3, 0).zero_()
    assert not stack_forward(torch.rand(2, 16, 16, 3), s, cfg).any()


def test_paper_stack_builds_18_units():
    cfg = StackConfig()
    assert (cfg.groups, cfg.units_per_group, cfg.embed_dim) == (3, 6, 60)
    s = init_stack(ParamStore(), cfg, 4, 0)
    units = {k.split(".global")[0] for k in s.names() if ".global." in k}
    assert len(units) == 18 and cfg.num_units == 18


def test_stack_tiny_deterministic():
    cfg = StackConfig(1, 2, 16, 4, 2)
    s = randomize(init_stack(ParamStore(), cfg, 3, 0), 13, 0.1)
    x = torch.rand(4, 64, 64, 3, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        a, b = stack_forward(x, s, cfg), stack_forward(x, s, cfg)
    assert a.shape == x.shape and torch.equal(a, b)


def test_stack_pads_to_window():
    cfg = StackConfig(1, 1, 8, 4, 2)
    s = randomize(init_stack(ParamStore(), cfg, 1, 0), 14, 0.1)
    with torch.no_grad():
        assert stack_forward(torch.rand(2, 10, 6, 1), s, cfg).shape == (2, 10, 6, 1)


def test_stack_gradient_tiny():
    cfg = StackConfig(1, 1, 8, 2, 2)
    s = randomize(init_stack(ParamStore(D), cfg, 1, 0), 15, 0.4)
    inputs = {"x": rand(1, 4, 4, 1, seed=16), **dict(s.items())}
    rep = grad_check(lambda t: stack_forward(t["x"], t, cfg), inputs, eps=1e-6)
    assert rep.ok, {k: v for k, v in rep.errors.items() if v > rep.tol}


# SNE

def sne_store(c, seed=0, random=True):
    s = init_sne(ParamStore(D), c, 2.0, seed)
    return randomize(s, seed + 100) if random else s


def test_sne_zero_mlp_gives_zero_noise():
    s = sne_store(3)
    with torch.no_grad():
        for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
            s[f"sne.mlp.{k}"].zero_()
    x = rand(2, 8, 8, 3)
    noise = sne_forward(x, s)
    assert not noise.any()
    assert torch.equal(x - noise, x)


def test_sne_untrained_outputs_zero():
    assert not sne_forward(rand(1, 8, 8, 3), sne_store(3, random=False)).any()


def test_sne_constant_channels_give_mlp_bias():
    s = sne_store(3, 1)
    with torch.no_grad():
        s["sne.ln.shift"].zero_()
    x = torch.ones(2, 5, 6, 3, dtype=D) * torch.tensor([0.2, 0.5, 0.9], dtype=D)
    p = s.scope("sne.mlp")
    expected = leaky_relu(p["fc1.bias"], 0.2) @ p["fc2.weight"] + p["fc2.bias"]
    torch.testing.assert_close(sne_forward(x, s), expected.expand(2, 5, 6, 3), atol=1e-12, rtol=0)


def test_sne_gradient():
    s = sne_store(3, 2)
    rep = grad_check(lambda t: sne_forward(t["x"], t), {"x": rand(1, 4, 4, 3, seed=3), **dict(s.items())},
                     eps=1e-6)
    assert rep.ok, rep.errors


def test_sne_spatial_permutation_equivariance():
    s = sne_store(3, 4)
    x = rand(2, 6, 5, 3, seed=5)
    perm = torch.randperm(30, generator=torch.Generator().manual_seed(6))
    permute = lambda t: t.reshape(2, 30, 3)[:, perm].reshape(2, 6, 5, 3)
    torch.testing.assert_close(sne_forward(permute(x), s), permute(sne_forward(x, s)), atol=1e-12, rtol=0)


def test_sne_deterministic_and_shape():
    s = sne_store(4, 7)
    x = rand(3, 8, 4, 4)
    a = sne_forward(x, s)
    assert a.shape == x.shape and torch.equal(a, sne_forward(x, s))

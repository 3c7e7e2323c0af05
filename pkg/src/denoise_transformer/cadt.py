"""Context-aware transformer units and the hierarchical noise-extraction stack.

Each unit adds a window-attention encoder (global branch) and a convolutional
local feature extractor with two deformable layers (local branch). Units are
chained inside groups; every group carries an additive residual. Parameter
names follow ``group{g}.unit{u}.{global|local}.{layer}``.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .tensorcore import (ParamStore, Scope, conv2d, deformable_conv2d, init_param, layer_norm,
                         leaky_relu, mlp, window_msa)

SLOPE = 0.2


@dataclass(frozen=True)
class StackConfig:
    groups: int = 3
    units_per_group: int = 6
    embed_dim: int = 60
    window: int = 8
    heads: int = 6
    mlp_ratio: float = 2.0
    enable_global: bool = True
    enable_local: bool = True

    def __post_init__(self):
        if self.groups < 1 or self.units_per_group < 1:
            raise ConfigError("groups and units_per_group must be >= 1")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.enable_local and self.embed_dim < 8:
            raise ConfigError(f"embed_dim {self.embed_dim} must be >= 8 for the local branch")

    @property
    def num_units(self) -> int:
        return self.groups * self.units_per_group

    def unit_prefixes(self) -> list[str]:
        return [f"group{g}.unit{u}" for g in range(self.groups) for u in range(self.units_per_group)]


def _conv(store, name, cin, cout, seed, k=3, init="uniform"):
    init_param(store, f"{name}.weight", (k, k, cin, cout), init, seed, fan_in=k * k * cin)
    init_param(store, f"{name}.bias", (cout,), init, seed, fan_in=k * k * cin)


def _linear(store, name, cin, cout, seed):
    init_param(store, f"{name}.weight", (cin, cout), "normal", seed)
    init_param(store, f"{name}.bias", (cout,), "zeros", seed)


def _norm(store, name, shape, seed):
    init_param(store, f"{name}.gain", shape, "ones", seed)
    init_param(store, f"{name}.shift", shape, "zeros", seed)


def init_encoder(store: ParamStore, prefix: str, cfg: StackConfig, seed: int) -> None:
    c = cfg.embed_dim
    hidden = round(cfg.mlp_ratio * c)
    _norm(store, f"{prefix}.ln1", (c,), seed)
    _linear(store, f"{prefix}.msa.qkv", c, 3 * c, seed)
    _linear(store, f"{prefix}.msa.proj", c, c, seed)
    init_param(store, f"{prefix}.msa.rel_bias", ((2 * cfg.window - 1) ** 2, cfg.heads), "normal", seed)
    _norm(store, f"{prefix}.ln2", (c,), seed)
    _linear(store, f"{prefix}.mlp.fc1", c, hidden, seed)
    _linear(store, f"{prefix}.mlp.fc2", hidden, c, seed)


def lfe_widths(embed_dim: int) -> tuple[int, int, int]:
    """Channel widths C/8, C/4, C/2 of the local branch, rounded down."""
    if embed_dim < 8:
        raise ConfigError(f"local branch needs embed_dim >= 8, got {embed_dim}")
    return embed_dim // 8, embed_dim // 4, embed_dim // 2


def init_lfe(store: ParamStore, prefix: str, embed_dim: int, seed: int) -> None:
    c = embed_dim
    c8, c4, c2 = lfe_widths(c)
    _norm(store, f"{prefix}.ln", (c,), seed)
    _conv(store, f"{prefix}.reduce", c, c8, seed)
    _conv(store, f"{prefix}.mid", c8, c4, seed)
    _conv(store, f"{prefix}.deform1", c4, c4, seed)
    _conv(store, f"{prefix}.deform1.offset", c4, 18, seed, init="zeros")
    _conv(store, f"{prefix}.deform2", c4, c2, seed)
    _conv(store, f"{prefix}.deform2.offset", c4, 18, seed, init="zeros")
    _conv(store, f"{prefix}.expand", c2, c, seed)


def init_stack(store: ParamStore, cfg: StackConfig, image_channels: int, seed: int) -> ParamStore:
    _conv(store, "head", image_channels, cfg.embed_dim, seed)
    for prefix in cfg.unit_prefixes():
        if cfg.enable_global:
            init_encoder(store, f"{prefix}.global", cfg, seed)
        if cfg.enable_local:
            init_lfe(store, f"{prefix}.local", cfg.embed_dim, seed)
    # zero tail: an untrained stack predicts no noise, so stage one starts at the blind input
    _conv(store, "tail", cfg.embed_dim, image_channels, seed, init="zeros")
    return store


def encoder_forward(e: torch.Tensor, p: Mapping[str, torch.Tensor], window: int, heads: int,
                    mlp_ratio: float | None = None) -> torch.Tensor:
    """Pre-norm window-attention block: attention residual, then MLP residual."""
    e = window_msa(layer_norm(e, -1, p["ln1.gain"], p["ln1.shift"]), Scope(p, "msa"), window, heads) + e
    return mlp(layer_norm(e, -1, p["ln2.gain"], p["ln2.shift"]), Scope(p, "mlp"), mlp_ratio, SLOPE) + e


def lfe_forward(e: torch.Tensor, p: Mapping[str, torch.Tensor], return_intermediates: bool = False):
    """Local feature extractor: C -> C/8 -> C/4 -> C/4 (deform) -> C/2 (deform) -> C.

    Widths round down, so C=60 runs 60 -> 7 -> 15 -> 15 -> 30 -> 60.

    The reduction and expansion convolutions have no activation; the three in
    between are followed by LeakyReLU. Deformable offsets come from a 3x3
    convolution on the same input as the deformable layer.
    """
    lfe_widths(e.shape[-1])
    x = layer_norm(e, -1, p["ln.gain"], p["ln.shift"])
    f_reduction = conv2d(x, p["reduce.weight"], p["reduce.bias"])
    f_mid = leaky_relu(conv2d(f_reduction, p["mid.weight"], p["mid.bias"]), SLOPE)
    off1 = conv2d(f_mid, p["deform1.offset.weight"], p["deform1.offset.bias"])
    d1 = leaky_relu(deformable_conv2d(f_mid, p["deform1.weight"], off1, p["deform1.bias"]), SLOPE)
    off2 = conv2d(d1, p["deform2.offset.weight"], p["deform2.offset.bias"])
    f_local = leaky_relu(deformable_conv2d(d1, p["deform2.weight"], off2, p["deform2.bias"]), SLOPE)
    f_expansion = conv2d(f_local, p["expand.weight"], p["expand.bias"])
    if return_intermediates:
        return f_expansion, {"reduction": f_reduction, "mid": f_mid, "local": f_local,
                             "expansion": f_expansion}
    return f_expansion


def cadt_forward(e: torch.Tensor, p: Mapping[str, torch.Tensor], cfg: StackConfig) -> torch.Tensor:
    """Fuse both branches by addition.

    With the global branch disabled the unit keeps an identity path, so the
    local branch acts as a residual.
    """
    if cfg.enable_global:
        out = encoder_forward(e, Scope(p, "global"), cfg.window, cfg.heads, cfg.mlp_ratio)
    else:
        out = e
    if cfg.enable_local:
        out = out + lfe_forward(e, Scope(p, "local"))
    return out


def stack_forward(blind: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: StackConfig) -> torch.Tensor:
    """Predict the residual noise of a batch of blind images (NHWC, same shape out)."""
    n, h, w, _ = blind.shape
    ph, pw = -h % cfg.window, -w % cfg.window
    x = blind
    if ph or pw:
        x = F.pad(x.permute(0, 3, 1, 2), (0, pw, 0, ph), mode="replicate").permute(0, 2, 3, 1)
    feat = conv2d(x, params["head.weight"], params["head.bias"])
    for g in range(cfg.groups):
        skip = feat
        for u in range(cfg.units_per_group):
            feat = cadt_forward(feat, Scope(params, f"group{g}.unit{u}"), cfg)
        feat = feat + skip
    noise = conv2d(feat, params["tail.weight"], params["tail.bias"])
    return noise[:, :h, :w]

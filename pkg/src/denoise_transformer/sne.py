"""Secondary noise extractor: spatial LayerNorm per channel, then a channel-mixing MLP."""
from __future__ import annotations

from collections.abc import Mapping

import torch

from .errors import ShapeError
from .tensorcore import ParamStore, Scope, init_param, layer_norm, mlp

PREFIX = "sne"


def init_sne(store: ParamStore, channels: int, hidden_ratio: float, seed: int) -> ParamStore:
    hidden = max(1, round(hidden_ratio * channels))
    init_param(store, f"{PREFIX}.ln.gain", (channels, 1), "ones", seed)
    init_param(store, f"{PREFIX}.ln.shift", (channels, 1), "zeros", seed)
    init_param(store, f"{PREFIX}.mlp.fc1.weight", (channels, hidden), "uniform", seed, fan_in=channels)
    init_param(store, f"{PREFIX}.mlp.fc1.bias", (hidden,), "zeros", seed)
    # last layer starts at zero so an untrained extractor leaves stage one untouched
    init_param(store, f"{PREFIX}.mlp.fc2.weight", (hidden, channels), "zeros", seed)
    init_param(store, f"{PREFIX}.mlp.fc2.bias", (channels,), "zeros", seed)
    return store


def sne_forward(x: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Residual noise estimate for a stage-one image batch ``x`` (NHWC).

    ``params`` holds the ``sne.*`` entries.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC batch, got shape {tuple(x.shape)}")
    n, h, w, c = x.shape
    if h * w == 0:
        raise ShapeError("empty spatial extent")
    p = Scope(params, PREFIX)
    flat = x.permute(0, 3, 1, 2).reshape(n, c, h * w)
    normed = layer_norm(flat, -1, p["ln.gain"], p["ln.shift"])
    mixed = mlp(normed.transpose(1, 2), Scope(p, "mlp"))
    return mixed.reshape(n, h, w, c)

"""End-to-end denoiser: PD split, blind-spot masking, two residual stages,
blind-spot collection and PD merge."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from . import imagepipe as ip
from .cadt import StackConfig, init_stack, stack_forward
from .errors import ConfigError, ShapeError
from .sne import init_sne, sne_forward
from .tensorcore import ParamStore

MODES = ("synthetic-srgb", "raw-bayer", "grey")
MODE_COLORSPACE = {"synthetic-srgb": "srgb", "raw-bayer": "raw-bayer", "grey": "grey"}


@dataclass(frozen=True)
class ModelConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    mode: str = "synthetic-srgb"
    sne_enabled: bool = True
    sne_hidden_ratio: float = 2.0
    mask_stride: int = 4
    pd_factor: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mask_stride < 1:
            raise ConfigError(f"mask_stride must be >= 1, got {self.mask_stride}")
        if self.pd_factor < 1:
            raise ConfigError(f"pd_factor must be >= 1, got {self.pd_factor}")

    @property
    def image_channels(self) -> int:
        return {"synthetic-srgb": 3, "raw-bayer": 4, "grey": 1}[self.mode]

    @property
    def input_channels(self) -> int:
        """Channels of the files the model consumes (before Bayer packing)."""
        return 1 if self.mode == "raw-bayer" else self.image_channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        stack = d.pop("stack", {})
        return cls(stack=StackConfig(**stack), **d)


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: ParamStore

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> "DenoiserModel":
        store = ParamStore(dtype)
        init_stack(store, config.stack, config.image_channels, seed)
        if config.sne_enabled:
            init_sne(store, config.image_channels, config.sne_hidden_ratio, seed)
        return cls(config, store)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DenoiserModel":
        model = cls.build(config)
        model.params.zero_()
        return model

    def forward_blind(self, blind: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return forward_blind(self, blind)

    def __call__(self, noisy: np.ndarray) -> np.ndarray:
        return full_inference(noisy, self)


def forward_blind(model: DenoiserModel, blind: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(stage1, stage2)`` for a batch of blind images (NHWC)."""
    stage1 = blind - stack_forward(blind, model.params, model.config.stack)
    if not model.config.sne_enabled:
        return stage1, stage1
    return stage1, stage1 - sne_forward(stage1, model.params)


def to_packed(img: np.ndarray, mode: str) -> np.ndarray:
    return ip.bayer_split(img) if mode == "raw-bayer" else img


def from_packed(img: np.ndarray, mode: str) -> np.ndarray:
    return ip.bayer_merge(img) if mode == "raw-bayer" else img


def blind_batch(packed: np.ndarray, pd_factor: int, stride: int) -> tuple[np.ndarray, list[ip.BlindStack]]:
    """PD-split a packed image and mask every sub-image; blinds come back stacked."""
    stacks = [ip.mask_map(sub, stride) for sub in ip.pd_split(packed, pd_factor)]
    return np.concatenate([st.blinds for st in stacks]), stacks


@torch.no_grad()
def full_inference(noisy: np.ndarray, model: DenoiserModel, chunk: int = 64,
                   return_trace: bool = False):
    """Denoise one ``H x W x C`` image in ``[0, 1]``; output is clamped to ``[0, 1]``.

    With ``return_trace`` a second value is returned: for every pixel of the
    packed image, the flat index (into the forward batch) of the blind image
    it was read from, and whether that blind input had the pixel masked.
    """
    cfg = model.config
    if noisy.ndim != 3 or noisy.shape[-1] != cfg.input_channels:
        raise ShapeError(f"expected HxWx{cfg.input_channels} image for mode {cfg.mode}, got {noisy.shape}")
    packed = to_packed(noisy, cfg.mode)
    p, s = cfg.pd_factor, cfg.mask_stride
    h, w, _ = packed.shape
    if h % (p * s) or w % (p * s):
        raise ShapeError(f"image {h}x{w} (packed) not divisible by pd_factor*mask_stride = {p * s}")
    blinds, stacks = blind_batch(packed.astype(np.float32), p, s)
    dtype = model.params.dtype
    outs = []
    for start in range(0, len(blinds), chunk):
        batch = torch.from_numpy(blinds[start:start + chunk]).to(dtype)
        outs.append(forward_blind(model, batch)[1].numpy())
    out = np.concatenate(outs)
    per = s * s
    subs = [ip.collect_blind(out[i * per:(i + 1) * per], st) for i, st in enumerate(stacks)]
    merged = np.clip(ip.pd_merge(subs, p), 0.0, 1.0)
    result = from_packed(merged, cfg.mode).astype(np.float32)
    if not return_trace:
        return result
    sub_index = ip.pd_merge([np.full(subs[0].shape[:2] + (1,), i) for i in range(p * p)], p)[..., 0]
    owner = ip.pd_merge([st.owner()[..., None] for st in stacks], p)[..., 0]
    source = sub_index * per + owner
    rows, cols = np.indices((h, w))
    masked = np.zeros((h, w), dtype=bool)
    for r, c in zip(rows.ravel(), cols.ravel()):
        i, k = divmod(source[r, c], per)
        masked[r, c] = stacks[i].masks[k][r // p, c // p]
    return result, {"source": source, "masked": masked}

"""Differentiable operators, parameter storage and the optimizer.

All image-shaped tensors are NHWC. Operators are pure functions of their
inputs; learnable weights live in a :class:`ParamStore` and are passed in by
name. Backward passes come from torch autograd.
"""
from __future__ import annotations

import functools
import math
import zlib
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ShapeError, StateError

LN_EPS = 1e-6


class ParamStore:
    """Named learnable tensors; each tensor's ``.grad`` is its gradient slot."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self.entries: dict[str, torch.Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value, dtype=self.dtype).detach().clone()
        t.requires_grad_(True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self.entries, prefix)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.entries.values())

    def astype(self, dtype: torch.dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self.entries.items():
            out.add(name, t.detach())
        out.step_count = self.step_count
        return out

    def zero_(self) -> "ParamStore":
        with torch.no_grad():
            for t in self.entries.values():
                t.zero_()
        return self


class Scope(Mapping):
    """Read-only view of a parameter mapping under a dotted prefix."""

    def __init__(self, params: Mapping[str, torch.Tensor], prefix: str):
        self._params = params
        self._prefix = prefix

    def _key(self, name: str) -> str:
        return f"{self._prefix}.{name}" if self._prefix else name

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[self._key(name)]

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self._key(name) in self._params

    def __iter__(self):
        head = self._prefix + "." if self._prefix else ""
        return (k[len(head):] for k in self._params if k.startswith(head))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self._params, self._key(prefix))


def _check_nhwc(x: torch.Tensor, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be NHWC (4 axes), got shape {tuple(x.shape)}")


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Zero-padded 2-D convolution.

    ``weight`` has shape ``(kh, kw, c_in, c_out)``. With stride 1 the spatial
    size is preserved (odd kernels).
    """
    _check_nhwc(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be (kh, kw, cin, cout), got {tuple(weight.shape)}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, weight expects {cin}")
    if bias is not None and tuple(bias.shape) != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({cout},)")
    y = F.conv2d(x.permute(0, 3, 1, 2), weight.permute(3, 2, 0, 1).contiguous(), bias,
                 stride=stride, padding=(kh // 2, kw // 2))
    return y.permute(0, 2, 3, 1)


def deformable_conv2d(x: torch.Tensor, weight: torch.Tensor, offsets: torch.Tensor,
                      bias: torch.Tensor | None = None) -> torch.Tensor:
    """Deformable convolution with bilinear sampling and zero padding.

    ``offsets`` is ``(N, H, W, 2*kh*kw)``: a ``(dy, dx)`` pair per kernel tap,
    taps in row-major kernel order. Tap ``(i, j)`` at output ``(y, x)`` samples
    the input at ``(y + i - kh//2 + dy, x + j - kw//2 + dx)``.
    """
    _check_nhwc(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be (kh, kw, cin, cout), got {tuple(weight.shape)}")
    n, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    k = kh * kw
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    if tuple(offsets.shape) != (n, h, w, 2 * k):
        raise ShapeError(f"offsets shape {tuple(offsets.shape)} != {(n, h, w, 2 * k)}")
    off = offsets.reshape(n, h, w, k, 2)
    ty, tx = _tap_grid(kh, kw, x.device)
    ys = torch.arange(h, device=x.device, dtype=x.dtype).view(1, h, 1, 1)
    xs = torch.arange(w, device=x.device, dtype=x.dtype).view(1, 1, w, 1)
    py = ys + ty.to(x.dtype) + off[..., 0]
    px = xs + tx.to(x.dtype) + off[..., 1]
    # grid_sample coordinates with align_corners=False: pixel p sits at (2p+1)/size - 1
    grid = torch.stack(((2 * px + 1) / w - 1, (2 * py + 1) / h - 1), dim=-1)
    cols = F.grid_sample(x.permute(0, 3, 1, 2), grid.reshape(n, h, w * k, 2),
                         mode="bilinear", padding_mode="zeros", align_corners=False)
    cols = cols.reshape(n, c, h, w, k)
    y = torch.einsum("nchwk,kco->nhwo", cols, weight.reshape(k, cin, cout))
    if bias is not None:
        y = y + bias
    return y


@functools.lru_cache(maxsize=None)
def _tap_grid(kh: int, kw: int, device) -> tuple[torch.Tensor, torch.Tensor]:
    iy, ix = torch.meshgrid(torch.arange(kh) - kh // 2, torch.arange(kw) - kw // 2, indexing="ij")
    return iy.reshape(-1).to(device), ix.reshape(-1).to(device)


def layer_norm(x: torch.Tensor, axis: int = -1, gain: torch.Tensor | None = None,
               shift: torch.Tensor | None = None, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize ``x`` to zero mean, unit variance along ``axis``.

    ``gain`` and ``shift`` must broadcast against ``x``.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d input")
    c = x.shape[axis]
    if (axis in (-1, x.ndim - 1) and gain is not None and shift is not None
            and gain.shape == (c,) and shift.shape == (c,)):
        return F.layer_norm(x, (c,), gain, shift, eps)
    mean = x.mean(dim=axis, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axis, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if shift is not None:
        y = y + shift
    return y


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def mlp(x: torch.Tensor, params: Mapping[str, torch.Tensor], hidden_ratio: float | None = None,
        slope: float = 0.2) -> torch.Tensor:
    """Two affine layers over the last axis with a LeakyReLU between them.

    Expects ``fc1.weight (cin, hidden)``, ``fc1.bias``, ``fc2.weight (hidden, cout)``
    and ``fc2.bias`` in ``params``.
    """
    w1, b1, w2, b2 = params["fc1.weight"], params["fc1.bias"], params["fc2.weight"], params["fc2.bias"]
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"mlp shapes inconsistent: x {tuple(x.shape)}, fc1 {tuple(w1.shape)}, "
                         f"fc2 {tuple(w2.shape)}")
    if hidden_ratio is not None and w1.shape[1] != round(hidden_ratio * w1.shape[0]):
        raise ShapeError(f"hidden width {w1.shape[1]} != {hidden_ratio} x {w1.shape[0]}")
    return leaky_relu(x @ w1 + b1, slope) @ w2 + b2


@functools.lru_cache(maxsize=None)
def relative_position_index(window: int) -> torch.Tensor:
    """Index into a ``(2w-1)^2`` bias table for every (query, key) pair of a window."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    n, h, w, c = x.shape
    x = x.reshape(n, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, n: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.reshape(n, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


def window_msa(x: torch.Tensor, params: Mapping[str, torch.Tensor], window: int, heads: int,
               return_attention: bool = False):
    """Multi-head self-attention inside non-overlapping ``window x window`` tiles.

    Parameters: ``qkv.weight (C, 3C)``, ``qkv.bias``, ``proj.weight (C, C)``,
    ``proj.bias`` and ``rel_bias ((2w-1)^2, heads)``, a learnable bias added to
    the attention logits per relative offset.
    """
    _check_nhwc(x)
    n, h, w, c = x.shape
    if window < 1 or h % window or w % window:
        raise ConfigError(f"feature map {h}x{w} not divisible by window {window}")
    if heads < 1 or c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    hd = c // heads
    t = window * window
    win = window_partition(x, window)
    qkv = win @ params["qkv.weight"] + params["qkv.bias"]
    qkv = qkv.reshape(-1, t, 3, heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    bias = params["rel_bias"][relative_position_index(window).to(x.device)].permute(2, 0, 1)
    if return_attention:
        logits = (q @ k.transpose(-2, -1)) * (hd ** -0.5) + bias.unsqueeze(0)
        attn = torch.softmax(logits, dim=-1)
        out = attn @ v
    else:
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias.unsqueeze(0).to(q.dtype))
    out = out.transpose(1, 2).reshape(-1, t, c)
    out = out @ params["proj.weight"] + params["proj.bias"]
    y = window_reverse(out, window, n, h, w)
    if return_attention:
        return y, attn
    return y


@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@torch.no_grad()
def adam_step(params: ParamStore, state: OptimizerState) -> ParamStore:
    """One Adam update with decoupled weight decay, in place."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    t = params.step_count + 1
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = torch.zeros_like(p)
            state.second_moment[name] = torch.zeros_like(p)
        v = state.second_moment[name]
        if state.weight_decay:
            p.mul_(1 - lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(state.epsilon)
        p.addcdiv_(m, denom, value=-lr / bc1)
    params.step_count = t
    return params


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def flagged(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(op: Callable[[dict[str, torch.Tensor]], torch.Tensor],
               inputs: Mapping[str, torch.Tensor], eps: float = 1e-3, tol: float = 1e-4,
               seed: int = 0, max_entries: int | None = None, refine: int = 2) -> GradCheckReport:
    """Compare autograd gradients of ``op`` with central finite differences.

    The output is reduced to a scalar as ``sum(out * r)`` for a fixed random
    ``r``. Per input, the error is the largest elementwise
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * scale)`` where
    ``scale`` is the largest gradient magnitude of that input.

    Piecewise-linear operators (LeakyReLU, bilinear sampling) have kinks; a
    central difference that straddles one is wrong even for a correct
    gradient. Entries above ``tol`` are therefore re-measured with steps
    ``eps/10, eps/100, ...`` (``refine`` times) and keep their closest
    estimate. A wrong backward stays wrong at every step size.
    """
    gen = torch.Generator().manual_seed(seed)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in inputs.items()}
    out = op(leaves)
    if not torch.isfinite(out).all():
        raise NumericalError("operator produced non-finite output")
    cot = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    grads = torch.autograd.grad((out * cot).sum(), list(leaves.values()), allow_unused=True)

    plain = {k: v.detach().clone().contiguous() for k, v in inputs.items()}

    def f() -> float:
        with torch.no_grad():
            val = (op(plain) * cot).sum()
        if not torch.isfinite(val):
            raise NumericalError("operator produced non-finite output under perturbation")
        return val.item()

    def central(flat: torch.Tensor, i: int, h: float) -> float:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    errors: dict[str, float] = {}
    for (name, value), g in zip(plain.items(), grads):
        analytic = torch.zeros_like(value) if g is None else g.detach().reshape(value.shape)
        if not torch.isfinite(analytic).all():
            raise NumericalError(f"non-finite analytic gradient for {name!r}")
        flat = value.view(-1)
        idx = list(range(flat.numel()))
        if max_entries is not None and flat.numel() > max_entries:
            idx = torch.randperm(flat.numel(), generator=gen)[:max_entries].tolist()
        if not idx:
            errors[name] = 0.0
            continue
        a = analytic.reshape(-1)[idx].to(torch.float64)
        n = torch.tensor([central(flat, i, eps) for i in idx], dtype=torch.float64)
        scale = max(a.abs().max().item(), n.abs().max().item())
        if scale == 0.0:
            errors[name] = 0.0
            continue

        def rel(a_, n_):
            return (a_ - n_).abs() / torch.maximum(torch.maximum(a_.abs(), n_.abs()),
                                                   torch.tensor(1e-3 * scale, dtype=torch.float64))

        err = rel(a, n)
        for j in torch.nonzero(err > tol).flatten().tolist():
            h = eps
            for _ in range(refine):
                h /= 10
                retry = rel(a[j:j + 1], torch.tensor([central(flat, idx[j], h)], dtype=torch.float64))
                err[j] = torch.minimum(err[j], retry[0])
        errors[name] = err.max().item()
    if any(math.isnan(e) for e in errors.values()):
        raise NumericalError("NaN in gradient comparison")
    return GradCheckReport(errors, tol)


def _name_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 63)


def init_param(store: ParamStore, name: str, shape: tuple[int, ...], init: str = "uniform",
               seed: int = 0, fan_in: int | None = None, std: float = 0.02) -> torch.Tensor:
    """Add a parameter drawn from a generator keyed on ``(seed, name)``.

    Keying on the name makes a parameter's initial value independent of which
    other parameters exist, so ablation variants share their common weights.

    init: ``zeros``, ``ones``, ``normal`` (std ``std``) or ``uniform``
    (bound ``1/sqrt(fan_in)``).
    """
    gen = torch.Generator().manual_seed(_name_seed(seed, name))
    if init == "zeros":
        value = torch.zeros(shape, dtype=torch.float64)
    elif init == "ones":
        value = torch.ones(shape, dtype=torch.float64)
    elif init == "normal":
        value = torch.randn(shape, generator=gen, dtype=torch.float64) * std
    elif init == "uniform":
        if not fan_in:
            raise ConfigError(f"uniform init of {name!r} needs fan_in")
        bound = 1.0 / math.sqrt(fan_in)
        value = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    else:
        raise ConfigError(f"unknown init {init!r}")
    return store.add(name, value)

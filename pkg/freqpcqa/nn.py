"""
Hybrid deformable-convolution / depthwise-convolution / transformer regressor

Stages, each with R_i repeats at width D_i:
    1. DeformConv stem, stride 1          (grid G)
    2. DepthConv stage, stride-2 entry     (G/2)
    3. DepthConv stage, stride-2 entry     (G/4)
    4. Transformer stage, pooled entry     (G/8)
    5. Transformer stage, pooled entry     (G/16)
followed by global average pooling and a single-output linear head.
The stem output is concatenated with the raw input features before
stage 2 unless ``stem_concat`` is off.
"""

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import autodiff as ad
from . import checkpoint
from .autodiff import Parameter, Tensor
from .errors import CheckpointError, DataError, ShapeError
from .features import Ablation

logger = logging.getLogger(__name__)

REFERENCE_PARAMETER_COUNT = 8_000_000
STAGE_NAMES = ("stem", "stage2", "stage3", "stage4", "stage5")


class ModelConfig(BaseModel):
    """Stage plan of the regressor; ``scale`` shrinks widths for desk-scale runs"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    repeats: Tuple[int, int, int, int, int] = (3, 3, 6, 14, 2)
    widths: Tuple[int, int, int, int, int] = (64, 96, 128, 128, 512)
    head_dim: int = Field(default=32, ge=1)
    kernel: int = Field(default=3, ge=1)
    input_channels: int = Field(default=9, ge=1)
    grid: int = Field(default=32, ge=1)
    scale: float = Field(default=1.0, gt=0)
    expansion: int = Field(default=4, ge=1)
    stem_concat: bool = True
    output_bias: float = 3.0

    @field_validator("scale", mode="before")
    @classmethod
    def _parse_fraction(cls, value):
        if isinstance(value, str):
            return float(Fraction(value.strip()))
        if isinstance(value, Fraction):
            return float(value)
        return value

    @field_validator("repeats", "widths")
    @classmethod
    def _positive(cls, value):
        if any(v < 1 for v in value):
            raise ValueError("repeats and widths must be positive")
        return value

    @model_validator(mode="after")
    def _check_plan(self) -> "ModelConfig":
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        head = self.scaled_head_dim
        for stage in (3, 4):
            width = self.scaled_widths[stage]
            if width % head:
                raise ValueError(
                    f"{STAGE_NAMES[stage]} width {width} is not divisible by head size {head}"
                )
        return self

    @property
    def scaled_widths(self) -> Tuple[int, ...]:
        return tuple(max(1, int(round(w * self.scale))) for w in self.widths)

    @property
    def scaled_head_dim(self) -> int:
        return max(1, int(round(self.head_dim * self.scale)))

    @property
    def stage_grids(self) -> Tuple[int, ...]:
        grids = [self.grid]
        for _ in range(4):
            grids.append(math.ceil(grids[-1] / 2))
        return tuple(grids)


# ==============================================================================
# Module plumbing
# ==============================================================================

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until inside +/- bound standard deviations"""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


class Module:
    """Container of parameters, buffers and sub-modules, walked in definition order"""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = OrderedDict()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place"""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for module in self.modules():
            for name in module._buffers:
                module._buffers[name] = module._buffers[name].astype(dtype)
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        """Copy arrays into parameters and buffers, checking names and shapes"""
        own = dict(self.named_parameters())
        buffers = {}
        for module_prefix, module in self._prefixed_modules():
            for name in module._buffers:
                buffers[module_prefix + name] = (module, name)
        expected = set(own) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            if missing or unexpected:
                raise CheckpointError(
                    f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
                )
        for name, value in state.items():
            if name in own:
                target = own[name]
                if target.shape != value.shape:
                    raise CheckpointError(
                        f"'{name}': checkpoint shape {value.shape} != model shape {target.shape}"
                    )
                target.data = np.array(value, dtype=target.dtype)
            elif name in buffers:
                module, key = buffers[name]
                if module._buffers[key].shape != value.shape:
                    raise CheckpointError(f"buffer '{name}' shape mismatch")
                module._buffers[key] = np.array(value, dtype=module._buffers[key].dtype)

    def _prefixed_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child._prefixed_modules(f"{prefix}{name}.")


# ==============================================================================
# Layers
# ==============================================================================

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(
            trunc_normal(rng, (out_channels, in_channels, kernel, kernel)), dtype=dtype
        )
        self.bias = Parameter(np.zeros(out_channels), decay=False, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Parameter(trunc_normal(rng, (channels, 1, kernel, kernel)), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), decay=False, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.depthwise_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), decay=False, dtype=dtype)
        self.beta = Parameter(np.zeros(channels), decay=False, dtype=dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), decay=False, dtype=dtype)
        self.beta = Parameter(np.zeros(dim), decay=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), decay=False, dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


# ==============================================================================
# Deformable convolution
# ==============================================================================

def deform_conv2d(x: Tensor, offsets: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                  stride: int = 1, padding: int = 1) -> Tensor:
    """
    Deformable convolution (v1).

    Args:
        x: [B, C, H, W] input
        offsets: [B, 2*kh*kw, Ho, Wo]; channels (2k, 2k+1) displace kernel
                 tap k by (row, col) in pixels
        weight: [O, C, kh, kw]
        bias: [O] or None

    Returns:
        [B, O, Ho, Wo]; with all-zero offsets this equals conv2d
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"deform_conv2d: input {x.shape} does not match weight {weight.shape}")
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    taps = kh * kw
    if offsets.shape != (b, 2 * taps, ho, wo):
        raise ShapeError(
            f"deform_conv2d: offsets {offsets.shape}, expected {(b, 2 * taps, ho, wo)}"
        )

    tap_rows = np.repeat(np.arange(kh), kw).astype(x.dtype)
    tap_cols = np.tile(np.arange(kw), kh).astype(x.dtype)
    base_rows = (np.arange(ho) * stride - padding).astype(x.dtype)
    base_cols = (np.arange(wo) * stride - padding).astype(x.dtype)
    grid_rows = (tap_rows[:, None, None] + base_rows[None, :, None])[None]  # [1, K, Ho, 1]
    grid_cols = (tap_cols[:, None, None] + base_cols[None, None, :])[None]  # [1, K, 1, Wo]

    rows = ad.add(offsets[:, 0::2], grid_rows)
    cols = ad.add(offsets[:, 1::2], grid_cols)
    sampled = ad.bilinear_sample(x, rows, cols)  # [B, C, K, Ho, Wo]
    columns = sampled.reshape(b, c * taps, ho * wo)
    out = ad.matmul(weight.reshape(o, c * taps), columns).reshape(b, o, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return out


class DeformConv2d(Module):
    """Deformable conv whose offsets come from a zero-initialized regular conv"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.offset_conv = Conv2d(in_channels, 2 * kernel * kernel, kernel, rng, stride=stride,
                                  dtype=dtype)
        self.offset_conv.weight.data = np.zeros_like(self.offset_conv.weight.data)
        self.weight = Parameter(
            trunc_normal(rng, (out_channels, in_channels, kernel, kernel)), dtype=dtype
        )
        self.bias = Parameter(np.zeros(out_channels), decay=False, dtype=dtype)

    def forward(self, x: Tensor, offsets: Optional[Tensor] = None) -> Tensor:
        if offsets is None:
            offsets = self.offset_conv(x)
        return deform_conv2d(x, offsets, self.weight, self.bias, self.stride, self.padding)


class DeformBlock(Module):
    """DeformConv -> BN -> GELU, residual when the channel count is kept"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.conv = DeformConv2d(in_channels, out_channels, kernel, rng, dtype=dtype)
        self.norm = BatchNorm2d(out_channels, dtype=dtype)
        self.residual = in_channels == out_channels

    def forward(self, x: Tensor) -> Tensor:
        h = ad.gelu(self.norm(self.conv(x)))
        return x + h if self.residual else h


# ==============================================================================
# Depthwise convolution blocks
# ==============================================================================

class DepthBlock(Module):
    """
    Inverted residual: 1x1 expand -> depthwise kxk -> 1x1 project.
    A stride-2 or width-changing unit pools and projects its skip path.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, expansion: int = 4, dtype=np.float32):
        super().__init__()
        hidden = out_channels * expansion
        self.stride = stride
        self.expand = Conv2d(in_channels, hidden, 1, rng, bias=False, dtype=dtype)
        self.norm1 = BatchNorm2d(hidden, dtype=dtype)
        self.depthwise = DepthwiseConv2d(hidden, kernel, rng, stride=stride, bias=False,
                                         dtype=dtype)
        self.norm2 = BatchNorm2d(hidden, dtype=dtype)
        self.project = Conv2d(hidden, out_channels, 1, rng, bias=False, dtype=dtype)
        self.norm3 = BatchNorm2d(out_channels, dtype=dtype)
        if stride == 1 and in_channels == out_channels:
            self.shortcut = None
        else:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ad.gelu(self.norm1(self.expand(x)))
        h = ad.gelu(self.norm2(self.depthwise(h)))
        h = self.norm3(self.project(h))
        skip = x
        if self.shortcut is not None:
            if self.stride > 1:
                skip = ad.avg_pool2d(skip, 3, self.stride, 1)
            skip = self.shortcut(skip)
        return skip + h


# ==============================================================================
# Transformer blocks
# ==============================================================================

def relative_position_index(height: int, width: int) -> np.ndarray:
    """[N, N] index into a (2H-1)(2W-1) table for every token pair"""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coords = np.stack((rows, cols)).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + height - 1) * (2 * width - 1) + (rel[1] + width - 1)


class RelativePositionBias(Module):
    """Learned per-head bias for every relative offset on an H x W grid"""

    def __init__(self, heads: int, height: int, width: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.table = Parameter(
            trunc_normal(rng, ((2 * height - 1) * (2 * width - 1), heads)), decay=False, dtype=dtype
        )
        self.index = relative_position_index(height, width)

    def forward(self) -> Tensor:
        return self.table[self.index].transpose(2, 0, 1)  # [heads, N, N]


class MultiHeadSelfAttention(Module):
    def __init__(self, in_dim: int, dim: int, head_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if dim % head_dim:
            raise ShapeError(f"width {dim} is not divisible by head size {head_dim}")
        self.dim = dim
        self.head_dim = head_dim
        self.heads = dim // head_dim
        self.qkv = Linear(in_dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def attention_weights(self, tokens: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        """Row-stochastic [B, heads, N, N] attention matrix"""
        return self._attend(tokens, bias)[0]

    def _attend(self, tokens: Tensor, bias: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        b, n, _ = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # [3, B, heads, N, head_dim]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        if bias is not None:
            scores = scores + bias.reshape((1,) + bias.shape)
        weights = ad.softmax(scores, axis=-1)
        return weights, v

    def forward(self, tokens: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        b, n, _ = tokens.shape
        weights, v = self._attend(tokens, bias)
        out = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, self.dim)
        return self.proj(out)


class TransformerBlock(Module):
    """
    Pre-norm attention and MLP over spatial tokens. A downsampling block
    average-pools its input (skip and attention input alike) first.
    """

    def __init__(self, in_dim: int, dim: int, head_dim: int, rng: np.random.Generator,
                 downsample: bool = False, expansion: int = 4, dtype=np.float32):
        super().__init__()
        self.downsample = downsample
        self.norm1 = LayerNorm(in_dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(in_dim, dim, head_dim, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * expansion, rng, dtype=dtype)
        self.fc2 = Linear(dim * expansion, dim, rng, dtype=dtype)
        self.shortcut = Conv2d(in_dim, dim, 1, rng, dtype=dtype) if in_dim != dim else None
        self.dim = dim

    def forward(self, x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        if self.downsample:
            x = ad.avg_pool2d(x, 3, 2, 1)
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(0, 2, 1)
        skip = tokens
        if self.shortcut is not None:
            skip = self.shortcut(x).reshape(b, self.dim, h * w).transpose(0, 2, 1)
        t = skip + self.attn(self.norm1(tokens), bias)
        t = t + self.fc2(ad.gelu(self.fc1(self.norm2(t))))
        return t.transpose(0, 2, 1).reshape(b, self.dim, h, w)


# ==============================================================================
# Stages and the full model
# ==============================================================================

class DeformStage(Module):
    def __init__(self, in_channels: int, width: int, repeats: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.blocks = [
            DeformBlock(in_channels if i == 0 else width, width, kernel, rng, dtype=dtype)
            for i in range(repeats)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class DepthStage(Module):
    def __init__(self, in_channels: int, width: int, repeats: int, kernel: int, expansion: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.blocks = [
            DepthBlock(in_channels if i == 0 else width, width, kernel, rng,
                       stride=2 if i == 0 else 1, expansion=expansion, dtype=dtype)
            for i in range(repeats)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class TransformerStage(Module):
    """Blocks of one stage share a relative position bias table"""

    def __init__(self, in_channels: int, width: int, repeats: int, head_dim: int, grid: int,
                 expansion: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.blocks = [
            TransformerBlock(in_channels if i == 0 else width, width, head_dim, rng,
                             downsample=(i == 0), expansion=expansion, dtype=dtype)
            for i in range(repeats)
        ]
        self.position_bias = RelativePositionBias(width // head_dim, grid, grid, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        bias = self.position_bias()
        for block in self.blocks:
            x = block(x, bias)
        return x


class PCQANet(Module):
    """Patch quality regressor: [B, 9, G, G] features -> [B] scores"""

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        # input channels zeroed during training; travels with the checkpoint
        self.ablation = Ablation.FULL
        rng = np.random.default_rng(seed)
        d = cfg.scaled_widths
        r = cfg.repeats
        head = cfg.scaled_head_dim
        grids = cfg.stage_grids

        self.stem = DeformStage(cfg.input_channels, d[0], r[0], cfg.kernel, rng, dtype=dtype)
        stage2_in = d[0] + cfg.input_channels if cfg.stem_concat else d[0]
        self.stage2 = DepthStage(stage2_in, d[1], r[1], cfg.kernel, cfg.expansion, rng, dtype=dtype)
        self.stage3 = DepthStage(d[1], d[2], r[2], cfg.kernel, cfg.expansion, rng, dtype=dtype)
        self.stage4 = TransformerStage(d[2], d[3], r[3], head, grids[3], cfg.expansion, rng,
                                       dtype=dtype)
        self.stage5 = TransformerStage(d[3], d[4], r[4], head, grids[4], cfg.expansion, rng,
                                       dtype=dtype)
        self.head = Linear(d[4], 1, rng, dtype=dtype)
        self.head.weight.data = np.zeros_like(self.head.weight.data)
        self.head.bias.data = np.full_like(self.head.bias.data, cfg.output_bias)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, features: Union[Tensor, np.ndarray]) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(
            np.asarray(features, dtype=self.dtype)
        )
        expected = (self.cfg.input_channels, self.cfg.grid, self.cfg.grid)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model input must be [B, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}], got {x.shape}")
        h = self.stem(x)
        if self.cfg.stem_concat:
            h = ad.concat([h, x], axis=1)
        h = self.stage2(h)
        h = self.stage3(h)
        h = self.stage4(h)
        h = self.stage5(h)
        out = self.head(ad.global_avg_pool(h))
        return out.reshape(x.shape[0])

    def predict(self, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Scores for a feature batch without recording a graph"""
        scores = []
        with ad.no_grad():
            for start in range(0, len(features), batch_size):
                scores.append(self.forward(features[start:start + batch_size]).data)
        return np.concatenate(scores).astype(np.float64) if scores else np.zeros(0)


# ==============================================================================
# Census, aggregation and persistence
# ==============================================================================

@dataclass
class ParameterCensus:
    """Learnable parameter counts per stage and in total"""
    per_stage: Dict[str, int]
    total: int
    reference: int = REFERENCE_PARAMETER_COUNT
    config: Dict = field(default_factory=dict)

    @property
    def deviation(self) -> int:
        return self.total - self.reference

    @property
    def relative_deviation(self) -> float:
        return self.deviation / self.reference

    def to_dict(self) -> dict:
        data = asdict(self)
        data["deviation"] = self.deviation
        data["relative_deviation"] = self.relative_deviation
        return data


def parameter_census(model: PCQANet) -> ParameterCensus:
    per_stage: Dict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        stage = name.split(".", 1)[0]
        per_stage[stage] = per_stage.get(stage, 0) + int(p.size)
    return ParameterCensus(per_stage=dict(per_stage), total=sum(per_stage.values()),
                           config=model.cfg.model_dump())


def aggregate_quality(patch_scores: Sequence[float]) -> float:
    """Cloud quality Q_f: arithmetic mean of the patch scores"""
    scores = np.asarray(patch_scores, dtype=np.float64)
    if scores.size == 0:
        raise DataError("cannot aggregate an empty set of patch scores")
    return float(scores.mean())


def config_path_for(weights_path: Union[str, Path]) -> Path:
    path = Path(weights_path)
    return path.with_name(path.name + ".json")


def save_model(model: PCQANet, path: Union[str, Path],
               extra: Optional[Dict[str, np.ndarray]] = None):
    """
    Write weights (PCQW1) and a JSON sidecar holding the model config, the
    input ablation the model was trained with and any ``meta.*`` entries of
    ``extra`` at full precision. Other ``extra`` entries join the weights.
    """
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(model.state_dict())
    meta = {}
    for name, value in (extra or {}).items():
        if name.startswith("meta."):
            meta[name[len("meta."):]] = np.asarray(value, dtype=np.float64).tolist()
        else:
            tensors[name] = value
    checkpoint.save(tensors, path)
    sidecar = {
        "model": model.cfg.model_dump(),
        "ablation": Ablation(model.ablation).value,
        "meta": meta,
    }
    config_path_for(path).write_text(json.dumps(sidecar, indent=2))
    logger.debug(f"Saved model to {path}")


def load_model(path: Union[str, Path], dtype=np.float32,
               ablation: Optional[Union[Ablation, str]] = None,
               ) -> Tuple[PCQANet, Dict[str, np.ndarray]]:
    """
    Rebuild a model from a checkpoint and its sidecar.

    Args:
        path: PCQW1 weights file
        dtype: parameter dtype of the rebuilt model
        ablation: input ablation the caller intends to score with; must match
                  the one recorded at training time

    Returns:
        (model in eval mode, optimizer state plus float64 ``meta.*`` entries)

    Raises:
        CheckpointError: missing or invalid sidecar, unreadable weights, or an
                         ablation that differs from the recorded one
    """
    sidecar = config_path_for(path)
    if not sidecar.is_file():
        raise CheckpointError(f"model config not found next to checkpoint: {sidecar}")
    try:
        payload = json.loads(sidecar.read_text())
        cfg = ModelConfig(**payload["model"])
        trained = Ablation(payload.get("ablation", Ablation.FULL.value))
        meta = {f"meta.{k}": np.asarray(v, dtype=np.float64)
                for k, v in payload.get("meta", {}).items()}
    except (ValueError, TypeError, KeyError) as e:
        raise CheckpointError(f"{sidecar}: invalid model config: {e}")
    if ablation is not None and Ablation(ablation) != trained:
        raise CheckpointError(
            f"{path}: model was trained with ablation '{trained.value}', "
            f"not '{Ablation(ablation).value}'"
        )
    tensors = checkpoint.load(path)
    model = PCQANet(cfg, dtype=dtype)
    model.ablation = trained
    own = {k: v for k, v in tensors.items() if not k.startswith(("optim.", "meta."))}
    extra = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    extra.update(meta)
    model.load_state_dict(own)
    model.eval()
    return model, extra

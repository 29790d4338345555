"""Prior regression network (RPEN): predicts the reflection-intensity map from I.

A small strided CNN stands in for a large pretrained backbone. Its stride-2
stages use 2x2 kernels by default, so each cell of the ``grid x grid`` feature
map is computed from its own image patch (plus a one-pixel stem border)
before the final stride-1 stage mixes neighbours. Two heads read
its ``grid x grid`` feature map: a pooled fully connected head for the
whole-image intensity, and an ASPP block producing a per-patch residual. The
patch map is the global estimate plus a bounded residual,
``clip(g + 0.5 * tanh(r), 0, 1)``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import functional as F
from .autograd.nn import Conv2d, ConvBlock, Linear, Module
from .autograd.tensor import Tensor, clip, concat, sigmoid, silu, tanh
from .errors import ConfigError, ShapeError
from .prrn import images_to_tensor


@dataclass(frozen=True)
class RpenConfig:
    image_size: int = 56
    stem_channels: int = 32
    stage_multipliers: tuple = (1, 2, 2, 2)
    stage_strides: tuple = (2, 2, 2, 1)
    feature_grid: int = 7
    down_kernel: int = 2
    aspp_dilations: tuple = (1, 2, 3)
    aspp_channels: int = 16
    norm_groups: int = 8
    zero_init_heads: bool = True

    def __post_init__(self):
        for name in ("stage_multipliers", "stage_strides", "aspp_dilations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def stage_channels(self):
        return [self.stem_channels * m for m in self.stage_multipliers]

    @property
    def feature_channels(self):
        return self.stage_channels[-1]

    def validate(self):
        if len(self.stage_multipliers) != len(self.stage_strides):
            raise ConfigError("stage_multipliers and stage_strides must have equal length")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ConfigError(f"stage strides must be 1 or 2, got {self.stage_strides}")
        reduction = int(np.prod(self.stage_strides))
        if self.image_size % reduction or self.image_size // reduction != self.feature_grid:
            raise ConfigError(
                f"image_size {self.image_size} / total stride {reduction} must equal "
                f"feature_grid {self.feature_grid}"
            )
        for d in self.aspp_dilations:
            if d < 1 or 2 * d + 1 > self.feature_grid:
                raise ConfigError(
                    f"ASPP dilation {d} spans {2 * d + 1} cells, more than the "
                    f"{self.feature_grid}x{self.feature_grid} feature map"
                )
        if self.down_kernel < 2 or self.down_kernel % 2:
            raise ConfigError(f"down_kernel must be even so strided cells stay centred, got {self.down_kernel}")
        for c in [self.stem_channels] + self.stage_channels:
            if c % self.norm_groups:
                raise ConfigError(f"{c} channels not divisible into {self.norm_groups} norm groups")

    def to_dict(self):
        d = asdict(self)
        for k in ("stage_multipliers", "stage_strides", "aspp_dilations"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def aspp_parameter_count(c_in, branch_channels, dilations):
    """``len(dilations) + 2`` branches, each ending in ``branch_channels``, fused to 1 channel."""
    a = branch_channels
    dilated = len(dilations) * (9 * c_in * a + a)
    pointwise = c_in * a + a
    pooled = c_in * a + a
    fuse = (len(dilations) + 2) * a + 1
    return dilated + pointwise + pooled + fuse


def parameter_count(config):
    def block(k, ci, co):
        return k * k * ci * co + co + 2 * co

    total = block(3, 3, config.stem_channels)
    c_prev = config.stem_channels
    for c, s in zip(config.stage_channels, config.stage_strides):
        total += block(config.down_kernel if s == 2 else 3, c_prev, c)
        c_prev = c
    total += c_prev + 1
    return total + aspp_parameter_count(c_prev, config.aspp_channels, config.aspp_dilations)


class Backbone(Module):
    def __init__(self, rng, config):
        self.stem = ConvBlock(rng, 3, config.stem_channels, config.norm_groups)
        self.stages = []
        c_prev = config.stem_channels
        for c, s in zip(config.stage_channels, config.stage_strides):
            # an even kernel with padding k/2-1 centres each stride-2 output on its 2x2 input block
            k, pad = (config.down_kernel, config.down_kernel // 2 - 1) if s == 2 else (3, 1)
            self.stages.append(ConvBlock(rng, c_prev, c, config.norm_groups, k, s, pad))
            c_prev = c

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


class GlobalHead(Module):
    def __init__(self, rng, channels, zero_init):
        self.fc = Linear(rng, channels, 1)
        if zero_init:
            self.fc.weight.data[...] = 0.0

    def forward(self, feat):
        pooled = feat.mean(axis=(2, 3))
        return sigmoid(self.fc(pooled)).reshape(feat.shape[0])


class ASPP(Module):
    def __init__(self, rng, c_in, branch_channels, dilations, zero_init):
        self.dilated = [Conv2d(rng, c_in, branch_channels, 3, dilation=d) for d in dilations]
        self.pointwise = Conv2d(rng, c_in, branch_channels, 1)
        self.pooled = Conv2d(rng, c_in, branch_channels, 1)
        self.fuse = Conv2d(rng, branch_channels * (len(dilations) + 2), 1, 1)
        if zero_init:
            self.fuse.weight.data[...] = 0.0

    def forward(self, feat):
        h, w = feat.shape[2:]
        branches = [silu(conv(feat)) for conv in self.dilated]
        branches.append(silu(self.pointwise(feat)))
        pooled = silu(self.pooled(F.global_avg_pool(feat)))
        branches.append(F.nearest_upsample(pooled, h, w))
        return self.fuse(concat(branches, axis=1))


@dataclass
class PriorPrediction:
    global_intensity: Tensor  # [N]
    patch_map: Tensor  # [N, P, P]

    def numpy(self):
        return self.global_intensity.numpy().astype(np.float64), self.patch_map.numpy().astype(np.float64)


class RPEN(Module):
    def __init__(self, config, rng):
        self.config = config
        self.backbone = Backbone(rng, config)
        c = config.feature_channels
        self.global_head = GlobalHead(rng, c, config.zero_init_heads)
        self.aspp = ASPP(rng, c, config.aspp_channels, config.aspp_dilations, config.zero_init_heads)

    def forward(self, images):
        feat = self.backbone(images)
        g = self.global_head(feat)
        r = self.aspp(feat)
        n, _, p, q = r.shape
        patch = clip(g.reshape(n, 1, 1) + tanh(r.reshape(n, p, q)) * 0.5, 0.0, 1.0)
        return PriorPrediction(g, patch)


def _as_input(images, model):
    cfg = model.config
    x = images if isinstance(images, Tensor) else images_to_tensor(images, model.backbone.stem.conv.weight.dtype)
    if x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(
            f"RPEN expects [N,3,{cfg.image_size},{cfg.image_size}] input, got {tuple(x.shape)}"
        )
    return x


def backbone_forward(images, model):
    return model.backbone(_as_input(images, model))


def rpen_forward(images, model):
    return model(_as_input(images, model))


def rpen_loss(pred, truth_global, truth_patch):
    """``MSE(global, truth_1) + MSE(patch_map, truth_P)``."""
    dtype = pred.patch_map.dtype
    tg = np.asarray(truth_global, dtype=dtype).reshape(-1)
    tp = np.asarray(truth_patch, dtype=dtype)
    if tp.ndim == 2:
        tp = tp[None]
    if tg.shape != pred.global_intensity.shape:
        raise ShapeError(f"global truth shape {tg.shape} != prediction {pred.global_intensity.shape}")
    if tp.shape != pred.patch_map.shape:
        raise ShapeError(f"patch truth grid {tp.shape} != prediction grid {pred.patch_map.shape}")
    dg = pred.global_intensity - Tensor(tg, dtype=dtype)
    dp = pred.patch_map - Tensor(tp, dtype=dtype)
    return (dg * dg).mean() + (dp * dp).mean()

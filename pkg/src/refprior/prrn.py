"""Prior-conditioned transformer U-Net restorer (PRRN).

Every residual block injects the encoded prior map through a feature-wise
conditioning step: the per-patch 64-d encoding is projected to the block's
channel count, replicated over each patch's pixels with nearest-neighbour
upsampling, and added to the intermediate feature map.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import functional as F
from .autograd.nn import Conv2d, ConvBlock, Linear, Module, SelfAttention
from .autograd.tensor import Tensor, concat, get_default_dtype, sigmoid, tabs
from .errors import ConfigError, ShapeError
from .prior import encode_prior


@dataclass(frozen=True)
class PrrnConfig:
    image_size: int = 56
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    resblocks_per_scale: int = 2
    attention_heads: int = 4
    bottleneck_blocks: int = 1
    prior_grid: int = 7
    prior_dim: int = 64
    norm_groups: int = 8
    fwa_scale: bool = False
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        self.validate()

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def resolutions(self):
        return [self.image_size >> s for s in range(len(self.channel_multipliers))]

    def validate(self):
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers must not be empty")
        if self.prior_dim < 2 or self.prior_dim % 2:
            raise ConfigError(f"prior_dim must be even, got {self.prior_dim}")
        if self.output_activation != "sigmoid":
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")
        if self.resblocks_per_scale < 1:
            raise ConfigError("resblocks_per_scale must be >= 1")
        depth = len(self.channel_multipliers) - 1
        if self.image_size % (1 << depth):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{depth} for {depth + 1} scales"
            )
        for res in self.resolutions:
            if res % self.prior_grid:
                raise ConfigError(
                    f"feature resolution {res} is not divisible by prior grid {self.prior_grid}"
                )
        for c in self.channels:
            if c % self.norm_groups:
                raise ConfigError(f"{c} channels not divisible into {self.norm_groups} norm groups")
        if self.channels[-1] % self.attention_heads:
            raise ConfigError(
                f"bottleneck width {self.channels[-1]} not divisible by {self.attention_heads} heads"
            )

    def to_dict(self):
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def parameter_count(config):
    """Closed-form parameter count of :class:`PRRN` for ``config``."""

    def conv(k, ci, co):
        return k * k * ci * co + co

    def fwa(c):
        return (config.prior_dim * c + c) * (2 if config.fwa_scale else 1)

    def resblock(ci, co):
        n = conv(3, ci, co) + 2 * co + fwa(co) + conv(3, co, co) + 2 * co
        return n + (conv(1, co, co) if ci != co else 0)

    ch = config.channels
    total = conv(3, 3, ch[0])
    c_prev = ch[0]
    for s, c in enumerate(ch):
        total += resblock(c_prev, c) + (config.resblocks_per_scale - 1) * resblock(c, c)
        if s < len(ch) - 1:
            total += conv(3, c, c)
        c_prev = c
    d = ch[-1]
    total += config.bottleneck_blocks * (3 * d * d + 3 * d + d * d + d)
    for s in range(len(ch) - 2, -1, -1):
        total += conv(1, ch[s + 1] + ch[s], ch[s]) + config.resblocks_per_scale * resblock(ch[s], ch[s])
    return total + conv(3, ch[0], 3)


class FeatureWiseAffine(Module):
    """Project prior features to ``C`` channels, upsample to the feature grid, add.

    With ``scale=True`` a second projection also modulates the features
    multiplicatively: ``F * (1 + gamma) + beta``.
    """

    def __init__(self, rng, prior_dim, channels, scale=False):
        self.shift = Linear(rng, prior_dim, channels)
        self.scale = Linear(rng, prior_dim, channels) if scale else None

    def forward(self, feat, prior_feat):
        return fwa(feat, prior_feat, self.shift.weight, self.shift.bias, self.scale)


def _project_up(prior_feat, weight, bias, h, w):
    proj = F.linear(prior_feat, weight, bias).transpose(0, 3, 1, 2)
    return F.nearest_upsample(proj, h, w)


def fwa(feat, prior_feat, weight, bias, scale=None):
    """Additive prior injection ``feat + up(linear(prior_feat))``.

    ``feat`` is ``[N, C, H, W]``, ``prior_feat`` is ``[N, P, P, D]``.
    """
    n, c, h, w = feat.shape
    p = prior_feat.shape[1]
    if h % p or w % p:
        raise ShapeError(f"feature map {h}x{w} is not divisible by prior grid {p}")
    out = feat + _project_up(prior_feat, weight, bias, h, w)
    if scale is not None:
        out = out + feat * _project_up(prior_feat, scale.weight, scale.bias, h, w)
    return out


class ResBlock(Module):
    """``block2(fwa(F')) + residual(F')`` where ``F' = block1(F_in)``.

    The residual is a 1x1 convolution when the block changes width and the
    identity otherwise.
    """

    def __init__(self, rng, c_in, c_out, config):
        self.block1 = ConvBlock(rng, c_in, c_out, config.norm_groups)
        self.fwa = FeatureWiseAffine(rng, config.prior_dim, c_out, config.fwa_scale)
        self.block2 = ConvBlock(rng, c_out, c_out, config.norm_groups)
        self.residual = Conv2d(rng, c_out, c_out, 1) if c_in != c_out else None

    def forward(self, x, prior_feat):
        f = self.block1(x)
        out = self.block2(self.fwa(f, prior_feat))
        return out + (self.residual(f) if self.residual is not None else f)


class EncoderStage(Module):
    def __init__(self, rng, c_in, c_out, config, downsample):
        self.blocks = [
            ResBlock(rng, c_in if i == 0 else c_out, c_out, config)
            for i in range(config.resblocks_per_scale)
        ]
        self.down = Conv2d(rng, c_out, c_out, 3, stride=2) if downsample else None


class DecoderStage(Module):
    def __init__(self, rng, c_low, c_skip, config):
        self.fuse = Conv2d(rng, c_low + c_skip, c_skip, 1)
        self.blocks = [ResBlock(rng, c_skip, c_skip, config) for _ in range(config.resblocks_per_scale)]


class PRRN(Module):
    def __init__(self, config, rng):
        self.config = config
        ch = config.channels
        self.stem = Conv2d(rng, 3, ch[0], 3)
        self.encoder = []
        c_prev = ch[0]
        for s, c in enumerate(ch):
            self.encoder.append(EncoderStage(rng, c_prev, c, config, s < len(ch) - 1))
            c_prev = c
        self.bottleneck = [SelfAttention(rng, ch[-1], config.attention_heads) for _ in range(config.bottleneck_blocks)]
        self.decoder = [DecoderStage(rng, ch[s + 1], ch[s], config) for s in range(len(ch) - 2, -1, -1)]
        self.head = Conv2d(rng, ch[0], 3, 3)

    def forward(self, images, prior_feat):
        """``images [N,3,H,W]`` and ``prior_feat [N,P,P,D]`` -> restored ``[N,3,H,W]``."""
        x = self.stem(images)
        skips = []
        for stage in self.encoder:
            for block in stage.blocks:
                x = block(x, prior_feat)
            if stage.down is not None:
                skips.append(x)
                x = stage.down(x)
        n, c, h, w = x.shape
        tokens = x.reshape(n, c, h * w).transpose(0, 2, 1)
        for attn in self.bottleneck:
            tokens = attn(tokens)
        x = tokens.transpose(0, 2, 1).reshape(n, c, h, w)
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = F.nearest_upsample(x, skip.shape[2], skip.shape[3])
            x = stage.fuse(concat([x, skip], axis=1))
            for block in stage.blocks:
                x = block(x, prior_feat)
        return sigmoid(self.head(x))


def images_to_tensor(images, dtype=None):
    """``(N, H, W, 3)`` float images -> ``Tensor[N, 3, H, W]``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)), dtype=dtype or get_default_dtype())


def tensor_to_images(t):
    return np.ascontiguousarray(t.data.transpose(0, 2, 3, 1)).astype(np.float64)


def encode_batch(prior_maps, dim, dtype=None):
    prior_maps = np.asarray(prior_maps, dtype=np.float64)
    if prior_maps.ndim == 2:
        prior_maps = prior_maps[None]
    return Tensor(encode_prior(prior_maps, dim), dtype=dtype or get_default_dtype())


def prrn_forward(images, prior_maps, model):
    """Restore a batch. ``images`` is ``(N,H,W,3)`` or a Tensor ``[N,3,H,W]``; priors ``(N,P,P)``."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else images_to_tensor(images, model.stem.weight.dtype)
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(f"PRRN expects {cfg.image_size}x{cfg.image_size} images, got {x.shape[2]}x{x.shape[3]}")
    prior_maps = np.asarray(prior_maps)
    if prior_maps.ndim == 2:
        prior_maps = prior_maps[None]
    if prior_maps.shape[1:] != (cfg.prior_grid, cfg.prior_grid):
        raise ShapeError(
            f"PRRN expects {cfg.prior_grid}x{cfg.prior_grid} prior maps, got {prior_maps.shape[1:]}"
        )
    if prior_maps.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} images but {prior_maps.shape[0]} prior maps")
    return model(x, encode_batch(prior_maps, cfg.prior_dim, x.dtype))


def prrn_loss(restored, target):
    """Mean absolute error over all pixels and channels."""
    if not isinstance(target, Tensor):
        target = Tensor(target, dtype=restored.dtype)
    if restored.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {restored.shape} vs {target.shape}")
    return tabs(restored - target).mean()

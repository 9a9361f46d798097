"""Encoder-decoder segmentation network assembled from the numpy layer kit.

The network eats a 5-channel range image and emits per-pixel class
probabilities. Shape of the thing:

  context (two residual conv blocks at base width)
  -> encoder stages: dilated-fusion residual block, then dropout + 2x2
     average pooling (the first ``num_pool_stages`` stages pool; any extra
     stages run at bottleneck resolution)
  -> decoder stages: pixel-shuffle x2 upsampling, concatenation with the
     matching encoder skip, another dilated-fusion block
  -> 1x1 head conv + channel softmax

Every convolution is followed by a leaky ReLU and batch normalization.
Dropout sits in every encoder/decoder stage except the first encoder stage
and the last decoder stage. Forward and backward are hand-rolled; each block
caches what its own backward needs, so Model.backward must follow a
cache-enabled forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adf import GaussianTensor, adf_forward
from .errors import ConfigError, DimensionError
from .layers import (
    AvgPool2x2,
    BatchNorm2d,
    ChannelDropout,
    Conv2d,
    LeakyReLU,
    PixelShuffle,
    Softmax,
)

MODES = ("train", "eval", "mc")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    in_channels: int = 5
    base_channels: int = 32
    encoder_channels: tuple = (32, 64, 128, 256, 256)
    decoder_channels: tuple = ()  # empty = derive from the encoder
    num_pool_stages: int = 4
    dropout_rate: float = 0.2
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        enc = self.encoder_channels
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.in_channels < 1:
            raise ConfigError("need at least 1 input channel")
        if len(enc) < 2 or min(enc) < 1:
            raise ConfigError("encoder_channels needs >= 2 positive entries")
        if enc[0] != self.base_channels:
            raise ConfigError("encoder_channels[0] must equal base_channels")
        if any(a > b for a, b in zip(enc, enc[1:])):
            raise ConfigError("encoder_channels must be non-decreasing")
        if not 1 <= self.num_pool_stages <= len(enc) - 1:
            raise ConfigError("num_pool_stages must lie in [1, len(encoder_channels) - 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        dec = self.decoder_channels or self.derived_decoder_channels()
        object.__setattr__(self, "decoder_channels", dec)
        if len(dec) != self.num_pool_stages:
            raise ConfigError("decoder_channels must have one entry per pool stage")
        if min(dec) < 1:
            raise ConfigError("decoder_channels must be positive")
        for c in (enc[-1],) + dec[:-1]:
            if c % 4:
                raise ConfigError(f"{c} channels cannot pixel-shuffle by r=2 (need multiple of 4)")

    def derived_decoder_channels(self):
        """Mirror the pooled encoder stage widths at half width."""
        pooled = self.encoder_channels[1 : 1 + self.num_pool_stages]
        return tuple(c // 2 for c in reversed(pooled))


class _RunState:
    """Per-forward knobs threaded through the blocks."""

    __slots__ = ("bn_train", "drop_active", "rng", "rate", "cache")

    def __init__(self, bn_train, drop_active, rng, rate, cache):
        self.bn_train = bn_train
        self.drop_active = drop_active
        self.rng = rng
        self.rate = rate
        self.cache = cache


class ConvUnit:
    """conv -> leaky ReLU -> batch norm, the pattern used on every conv here."""

    def __init__(self, c_in, c_out, k, dilation, cfg: ModelConfig, rng):
        self.conv = Conv2d(c_in, c_out, k=k, dilation=dilation, rng=rng)
        self.act = LeakyReLU(cfg.leaky_slope)
        self.bn = BatchNorm2d(c_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum)

    def forward(self, x, rs: _RunState):
        y = self.conv.forward(x, cache=rs.cache)
        y = self.act.forward(y, cache=rs.cache)
        return self.bn.forward(y, train=rs.bn_train, cache=rs.cache)

    def backward(self, g):
        return self.conv.backward(self.act.backward(self.bn.backward(g)))

    def adf(self, g: GaussianTensor) -> GaussianTensor:
        for layer in (self.conv, self.act, self.bn):
            g = adf_forward(layer, g)
        return g

    def layers(self):
        yield "conv", self.conv
        yield "act", self.act
        yield "bn", self.bn


def _sum_gaussians(a: GaussianTensor, b: GaussianTensor) -> GaussianTensor:
    # residual merges treat the branches as independent (moment matching)
    return GaussianTensor(a.mean + b.mean, a.variance + b.variance)


class ContextBlock:
    """Residual pairing of a 1x1 shortcut with a 3x3 then dilated-3x3 path."""

    def __init__(self, c_in, c_out, cfg: ModelConfig, rng):
        self.short = ConvUnit(c_in, c_out, 1, 1, cfg, rng)
        self.main1 = ConvUnit(c_in, c_out, 3, 1, cfg, rng)
        self.main2 = ConvUnit(c_out, c_out, 3, 2, cfg, rng)

    def forward(self, x, rs):
        return self.short.forward(x, rs) + self.main2.forward(self.main1.forward(x, rs), rs)

    def backward(self, g):
        return self.short.backward(g) + self.main1.backward(self.main2.backward(g))

    def adf(self, g):
        return _sum_gaussians(self.short.adf(g), self.main2.adf(self.main1.adf(g)))

    def layers(self):
        for unit_name in ("short", "main1", "main2"):
            for name, layer in getattr(self, unit_name).layers():
                yield f"{unit_name}.{name}", layer

    def macs(self, h, w):
        return sum(u.conv.macs(h, w) for u in (self.short, self.main1, self.main2))


class DilatedFusionBlock:
    """Three parallel 3x3 branches at dilation 1/2/3 (receptive fields 3/5/7),
    concatenated and fused by a 1x1 conv, with a residual connection.

    The shortcut is the identity when channel counts already agree, else a
    1x1 projection.
    """

    def __init__(self, c_in, c_out, cfg: ModelConfig, rng):
        self.c_out = c_out
        self.branches = [ConvUnit(c_in, c_out, 3, d, cfg, rng) for d in (1, 2, 3)]
        self.fuse = ConvUnit(3 * c_out, c_out, 1, 1, cfg, rng)
        self.project = None if c_in == c_out else ConvUnit(c_in, c_out, 1, 1, cfg, rng)

    def forward(self, x, rs):
        cat = np.concatenate([b.forward(x, rs) for b in self.branches], axis=1)
        y = self.fuse.forward(cat, rs)
        return y + (x if self.project is None else self.project.forward(x, rs))

    def backward(self, g):
        g_cat = self.fuse.backward(g)
        c = self.c_out
        gx = self.branches[0].backward(g_cat[:, :c])
        gx += self.branches[1].backward(g_cat[:, c : 2 * c])
        gx += self.branches[2].backward(g_cat[:, 2 * c :])
        gx += g if self.project is None else self.project.backward(g)
        return gx

    def adf(self, g):
        outs = [b.adf(g) for b in self.branches]
        cat = GaussianTensor(
            np.concatenate([o.mean for o in outs], axis=1),
            np.concatenate([o.variance for o in outs], axis=1),
        )
        fused = self.fuse.adf(cat)
        return _sum_gaussians(fused, g if self.project is None else self.project.adf(g))

    def layers(self):
        for i, b in enumerate(self.branches, start=1):
            for name, layer in b.layers():
                yield f"branch{i}.{name}", layer
        for name, layer in self.fuse.layers():
            yield f"fuse.{name}", layer
        if self.project is not None:
            for name, layer in self.project.layers():
                yield f"project.{name}", layer

    def macs(self, h, w):
        units = self.branches + [self.fuse] + ([] if self.project is None else [self.project])
        return sum(u.conv.macs(h, w) for u in units)


class EncoderStage:
    def __init__(self, c_in, c_out, pooled, has_dropout, cfg: ModelConfig, rng):
        self.block = DilatedFusionBlock(c_in, c_out, cfg, rng)
        self.drop = ChannelDropout(cfg.dropout_rate) if has_dropout else None
        self.pool = AvgPool2x2() if pooled else None

    def forward(self, x, rs):
        f = self.block.forward(x, rs)
        out = f
        if self.drop is not None:
            out = self.drop.forward(out, active=rs.drop_active, rng=rs.rng, rate=rs.rate, cache=rs.cache)
        if self.pool is not None:
            out = self.pool.forward(out, cache=rs.cache)
        return f, out  # f is the skip tensor, taken before dropout

    def backward(self, g, g_skip):
        if self.pool is not None:
            g = self.pool.backward(g)
        if self.drop is not None:
            g = self.drop.backward(g)
        if g_skip is not None:
            g = g + g_skip
        return self.block.backward(g)

    def adf(self, g, analysis=False, rate=None):
        f = self.block.adf(g)
        out = f
        if self.drop is not None:
            out = adf_forward(self.drop, out, analysis=analysis, rate=rate)
        if self.pool is not None:
            out = adf_forward(self.pool, out)
        return f, out

    def layers(self):
        for name, layer in self.block.layers():
            yield f"block.{name}", layer
        if self.drop is not None:
            yield "drop", self.drop
        if self.pool is not None:
            yield "pool", self.pool


class DecoderStage:
    def __init__(self, c_in, skip_c, c_out, has_dropout, cfg: ModelConfig, rng):
        if c_in % 4:
            raise ConfigError(f"decoder input of {c_in} channels cannot pixel-shuffle")
        self.up_c = c_in // 4
        self.up = PixelShuffle(2)
        self.block = DilatedFusionBlock(self.up_c + skip_c, c_out, cfg, rng)
        self.drop = ChannelDropout(cfg.dropout_rate) if has_dropout else None

    def forward(self, x, skip, rs):
        u = self.up.forward(x, cache=rs.cache)
        y = self.block.forward(np.concatenate([u, skip], axis=1), rs)
        if self.drop is not None:
            y = self.drop.forward(y, active=rs.drop_active, rng=rs.rng, rate=rs.rate, cache=rs.cache)
        return y

    def backward(self, g):
        if self.drop is not None:
            g = self.drop.backward(g)
        g_cat = self.block.backward(g)
        return self.up.backward(g_cat[:, : self.up_c]), g_cat[:, self.up_c :]

    def adf(self, g, skip, analysis=False, rate=None):
        u = adf_forward(self.up, g)
        cat = GaussianTensor(
            np.concatenate([u.mean, skip.mean], axis=1),
            np.concatenate([u.variance, skip.variance], axis=1),
        )
        y = self.block.adf(cat)
        if self.drop is not None:
            y = adf_forward(self.drop, y, analysis=analysis, rate=rate)
        return y

    def layers(self):
        yield "up", self.up
        for name, layer in self.block.layers():
            yield f"block.{name}", layer
        if self.drop is not None:
            yield "drop", self.drop


class Model:
    """The assembled network. Build with build_model for seeded init."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        enc = cfg.encoder_channels
        pools = cfg.num_pool_stages
        self.context = [
            ContextBlock(cfg.in_channels, enc[0], cfg, rng),
            ContextBlock(enc[0], enc[0], cfg, rng),
        ]
        n_stages = len(enc) - 1
        self.encoder = [
            EncoderStage(enc[i], enc[i + 1], pooled=i < pools, has_dropout=i > 0, cfg=cfg, rng=rng)
            for i in range(n_stages)
        ]
        self.decoder = []
        c = enc[-1]
        for j, c_out in enumerate(cfg.decoder_channels):
            skip_c = enc[pools - j]  # output width of the mirrored pooled stage
            self.decoder.append(
                DecoderStage(c, skip_c, c_out, has_dropout=j < pools - 1, cfg=cfg, rng=rng)
            )
            c = c_out
        self.head = Conv2d(c, cfg.num_classes, k=1, rng=rng)
        self.softmax = Softmax()

    # ---- plumbing ----------------------------------------------------

    def named_layers(self):
        for i, blk in enumerate(self.context):
            for name, layer in blk.layers():
                yield f"context{i}.{name}", layer
        for i, st in enumerate(self.encoder):
            for name, layer in st.layers():
                yield f"enc{i}.{name}", layer
        for j, st in enumerate(self.decoder):
            for name, layer in st.layers():
                yield f"dec{j}.{name}", layer
        yield "head", self.head

    def named_params(self):
        for prefix, layer in self.named_layers():
            for p in layer.params():
                yield f"{prefix}.{p.name}", p

    def named_buffers(self):
        for prefix, layer in self.named_layers():
            for name, buf in layer.buffers():
                yield f"{prefix}.{name}", buf

    def zero_grads(self):
        for _, layer in self.named_layers():
            layer.zero_grads()

    def cast(self, dtype):
        for _, layer in self.named_layers():
            layer.cast(dtype)
        return self

    def dropout_placement(self):
        """(stage name, has dropout) for the audit of central-dropout wiring."""
        report = [(f"enc{i}", st.drop is not None) for i, st in enumerate(self.encoder)]
        report += [(f"dec{j}", st.drop is not None) for j, st in enumerate(self.decoder)]
        return report

    # ---- running the network -----------------------------------------

    def _check_input(self, x):
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected (n, {self.cfg.in_channels}, h, w) input, got {x.shape}"
            )
        div = 1 << self.cfg.num_pool_stages
        if x.shape[2] % div or x.shape[3] % div:
            raise DimensionError(f"spatial size {x.shape[2:]} not divisible by {div}")
        return x

    def forward(self, x, mode="eval", rng=None, seed=None, rate=None, cache=False):
        """Run the network; returns (n, num_classes, h, w) probabilities.

        mode: 'train' (batch-stat BN, dropout on), 'eval' (running-stat BN,
        dropout off), 'mc' (running-stat BN, dropout on). 3D input gets a
        singleton batch axis and a 3D output.
        """
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        squeeze = x.ndim == 3
        x = self._check_input(np.asarray(x))
        if rng is None and seed is not None:
            rng = np.random.default_rng(seed)
        rs = _RunState(mode == "train", mode in ("train", "mc"), rng, rate, cache)
        h = x
        for blk in self.context:
            h = blk.forward(h, rs)
        skips = []
        for st in self.encoder:
            f, h = st.forward(h, rs)
            if st.pool is not None:
                skips.append(f)
        for j, st in enumerate(self.decoder):
            h = st.forward(h, skips[len(skips) - 1 - j], rs)
        h = self.head.forward(h, cache=cache)
        probs = self.softmax.forward(h, cache=cache)
        return probs[0] if squeeze else probs

    def backward(self, g_probs):
        """Backprop d(loss)/d(probabilities); accumulates into Param.grad."""
        if g_probs.ndim == 3:
            g_probs = g_probs[None]
        g = self.head.backward(self.softmax.backward(g_probs))
        skip_grads = [None] * len(self.encoder)
        n_skips = sum(st.pool is not None for st in self.encoder)
        for j in range(len(self.decoder) - 1, -1, -1):
            g, g_skip = self.decoder[j].backward(g)
            skip_grads[n_skips - 1 - j] = g_skip
        for i in range(len(self.encoder) - 1, -1, -1):
            g = self.encoder[i].backward(g, skip_grads[i])
        for blk in reversed(self.context):
            g = blk.backward(g)
        return g

    def adf(self, g: GaussianTensor, analysis=False, rate=None) -> GaussianTensor:
        """Propagate a Gaussian input through the net (eval-mode statistics)."""
        if g.mean.ndim != 4:
            raise DimensionError(f"ADF input must be batched 4D, got {g.mean.shape}")
        self._check_input(g.mean)
        for blk in self.context:
            g = blk.adf(g)
        skips = []
        for st in self.encoder:
            f, g = st.adf(g, analysis=analysis, rate=rate)
            if st.pool is not None:
                skips.append(f)
        for j, st in enumerate(self.decoder):
            g = st.adf(g, skips[len(skips) - 1 - j], analysis=analysis, rate=rate)
        mean, _ = self.head._correlate(
            g.mean, self.head.kernel.value.astype(g.mean.dtype), self.head.bias.value.astype(g.mean.dtype)
        )
        var, _ = self.head._correlate(g.variance, self.head.kernel.value.astype(g.mean.dtype) ** 2)
        return adf_forward(self.softmax, GaussianTensor(mean, np.maximum(var, 0)))

    # ---- accounting ----------------------------------------------------

    def count_parameters(self):
        return count_parameters(p for _, p in self.named_params())

    def count_flops(self, h, w):
        """2 x multiply-accumulates, convolutions only (pool/act/norm excluded)."""
        div = 1 << self.cfg.num_pool_stages
        if h % div or w % div:
            raise DimensionError(f"spatial size ({h}, {w}) not divisible by {div}")
        macs = sum(blk.macs(h, w) for blk in self.context)
        ch, cw = h, w
        for st in self.encoder:
            macs += st.block.macs(ch, cw)
            if st.pool is not None:
                ch, cw = ch // 2, cw // 2
        for st in self.decoder:
            ch, cw = ch * 2, cw * 2
            macs += st.block.macs(ch, cw)
        macs += self.head.macs(h, w)
        return 2 * macs


def count_parameters(params) -> int:
    return sum(p.value.size for p in params)


def build_model(cfg: ModelConfig, seed=0) -> Model:
    """Deterministic construction: same (cfg, seed) -> identical weights."""
    return Model(cfg, np.random.default_rng(seed))


def micro_config(num_classes=4, dropout_rate=0.2) -> ModelConfig:
    """Small configuration used for CPU-scale training and tests."""
    return ModelConfig(
        num_classes=num_classes,
        base_channels=8,
        encoder_channels=(8, 16, 32),
        num_pool_stages=2,
        dropout_rate=dropout_rate,
    )

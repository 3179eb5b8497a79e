"""Residual blocks (MS, EMS, MDS), the SF-Block, and multi-direction fusion.

All blocks take and return membrane-level real tensors (T, B, C, H, W);
a 4-D (T, C, H, W) input is treated as batch 1 and returned as 4-D.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .layers import LCB, ILIF, Conv2d, TdBN, Module, ConvRecord, _recorder, fold_tdbn_into_conv
from .layers import ConvSpec
from .neuron import ILIFParams

__all__ = [
    "MSBlock", "EMSBlock", "MDSBlock1", "MDSBlock2", "SFBlock", "SMFM",
    "fuse", "ms_block", "ems_block", "mds_block1", "mds_block2", "sf_block", "smfm_forward",
]


class ConfigError(ValueError):
    pass


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Identity(Module):
    def forward(self, x):
        return x


class TwoPath(Module):
    """Base for blocks whose output is residual(x) + shortcut(x)."""

    def paths(self, x):
        return self.residual(x), self.shortcut(x)

    def forward(self, x):
        r, s = self.paths(x)
        if r.data.shape != s.data.shape:
            raise ValueError(f"dimension mismatch between paths: {r.data.shape} vs {s.data.shape}")
        return ag.add(r, s)


class MSBlock(TwoPath):
    """Two 3x3 LCBs plus an identity membrane shortcut."""

    def __init__(self, channels, neuron=ILIFParams(), alpha=1.0, rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.residual = Sequential(LCB(channels, channels, 3, neuron=neuron, rng=rng),
                                   LCB(channels, channels, 3, neuron=neuron, alpha=alpha, rng=rng))
        self.shortcut = Identity()

    def forward(self, x):
        x = ag.as_tensor(x)
        if x.data.shape[2] != self.channels:
            raise ValueError(f"dimension mismatch: MS-Block expects {self.channels} channels, got {x.data.shape[2]}")
        return super().forward(x)


class _PoolThen(Module):
    """Max-pool the membrane, then apply ``inner``."""

    def __init__(self, inner):
        self.inner = inner

    def forward(self, x):
        return self.inner(ag.maxpool2(x))


class _CatPooled(Module):
    def __init__(self, lcb):
        self.lcb = lcb

    def forward(self, x):
        pooled = ag.maxpool2(x)
        return ag.concat([pooled, self.lcb(pooled)], axis=2)


class EMSBlock(TwoPath):
    """Downsampling block with max-pool placed before the shortcut neurons.

    variant 1: shortcut = Cat[MPool(x), LCB(MPool(x))], requires out = 2 * in.
    variant 2: shortcut = LCB(MPool(x)).
    """

    def __init__(self, in_ch, out_ch, variant=2, neuron=ILIFParams(), alpha=1.0, rng=None):
        rng = _rng(rng)
        if variant not in (1, 2):
            raise ConfigError(f"EMS-Block variant must be 1 or 2, got {variant}")
        self.variant = variant
        self.residual = Sequential(LCB(in_ch, out_ch, 3, stride=2, neuron=neuron, rng=rng),
                                   LCB(out_ch, out_ch, 3, neuron=neuron, alpha=alpha, rng=rng))
        if variant == 1:
            if out_ch != 2 * in_ch:
                raise ConfigError("EMS-Block1 concatenation needs out_ch == 2 * in_ch")
            self.shortcut = _CatPooled(LCB(in_ch, out_ch - in_ch, 1, neuron=neuron, alpha=alpha, rng=rng))
        else:
            self.shortcut = _PoolThen(LCB(in_ch, out_ch, 1, neuron=neuron, alpha=alpha, rng=rng))

    def forward(self, x):
        x = ag.as_tensor(x)
        H, W = x.data.shape[-2:]
        if H % 2 or W % 2:
            raise ValueError(f"dimension error: EMS-Block needs even spatial dims, got {H}x{W}")
        return super().forward(x)


class MDSBlock1(TwoPath):
    """Non-downsampling MDS block.

    residual: 1x1-LCB -> n MS-Blocks -> 1x1-LCB
    shortcut: 1x1-LCB (``shortcut="mds"``) or identity (``shortcut="ms"``)
    """

    def __init__(self, channels, n_inner=0, neuron=ILIFParams(), alpha=1.0, shortcut="mds", rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.residual = Sequential(
            LCB(channels, channels, 1, neuron=neuron, rng=rng),
            *[MSBlock(channels, neuron=neuron, rng=rng) for _ in range(n_inner)],
            LCB(channels, channels, 1, neuron=neuron, alpha=alpha, rng=rng))
        if shortcut == "mds":
            self.shortcut = LCB(channels, channels, 1, neuron=neuron, alpha=alpha, rng=rng)
        elif shortcut == "ms":
            self.shortcut = Identity()
        else:
            raise ConfigError(f"unknown shortcut kind {shortcut!r}")

    def forward(self, x):
        x = ag.as_tensor(x)
        if x.data.shape[2] != self.channels:
            raise ValueError(f"dimension mismatch: MDS-Block1 expects {self.channels} channels, got {x.data.shape[2]}")
        return super().forward(x)


class DeformedShortcut(Module):
    """I-LIF, then stride-2 and max-pool downsampling of the spikes, mixed by
    learnable weights, then 1x1 conv and tdBN.

    mode "train" mixes before the convolution. mode "reparam" splits into a
    strided path and a pooled path that are summed after the convolution, so
    every convolution sees spikes; in eval mode the tdBN is folded into the
    split convolutions.
    """

    def __init__(self, in_ch, out_ch, neuron=ILIFParams(), alpha=1.0, rng=None):
        self.neuron = ILIF(neuron)
        self.w_stride = ag.Parameter(np.asarray(0.5))
        self.w_pool = ag.Parameter(np.asarray(0.5))
        self.conv = Conv2d(in_ch, out_ch, 1, rng=_rng(rng))
        self.bn = TdBN(out_ch, alpha=alpha, v_th=neuron.v_th)
        self.mode = "train"

    def split_convs(self):
        """(strided-path conv, pooled-path conv) with mixing weights absorbed
        and, in eval mode, tdBN folded in."""
        spec = self.conv.spec()
        w1, w2 = float(self.w_stride.data), float(self.w_pool.data)
        a = ConvSpec(spec.in_ch, spec.out_ch, 1, weight=spec.weight * w1, bias=spec.bias)
        b = ConvSpec(spec.in_ch, spec.out_ch, 1, weight=spec.weight * w2, bias=np.zeros(spec.out_ch))
        if not self.training:
            p = self.bn.params()
            a = fold_tdbn_into_conv(a, p)
            b = ConvSpec(b.in_ch, b.out_ch, 1,
                         weight=fold_tdbn_into_conv(b, p).weight, bias=np.zeros(b.out_ch))
        return a, b

    def forward(self, x):
        o = self.neuron(x)
        strided = ag.stride_downsample(o, 2)
        pooled = ag.maxpool2(o)
        rec = _recorder()
        d_max = self.neuron.params.d_max
        if rec is not None:
            T, B = o.data.shape[:2]
            for tag, s in (("stride", strided), ("pool", pooled)):
                rec.convs.append(ConvRecord(f"{self.name}.conv[{tag}]", self.conv.in_ch, self.conv.out_ch,
                                            1, 1, tuple(s.data.shape[3:]), T * d_max,
                                            float(s.data.sum()), int(np.prod(s.data.shape[2:])), B))
        if self.mode == "train":
            z = ag.add(ag.scale(strided, self.w_stride), ag.scale(pooled, self.w_pool))
            y = ag.conv2d(z, self.conv.weight, self.conv.bias)
            return self.bn(y)
        if self.mode != "reparam":
            raise ConfigError(f"unknown shortcut mode {self.mode!r}")
        a, b = self.split_convs()
        ya = ag.conv2d(strided, ag.Tensor(a.weight), ag.Tensor(a.bias))
        yb = ag.conv2d(pooled, ag.Tensor(b.weight), None)
        y = ag.add(ya, yb)
        return self.bn(y) if self.training else y


class MDSBlock2(TwoPath):
    """Downsampling MDS block.

    residual: 3x3-LCB stride 2 -> n MS-Blocks -> 1x1-LCB
    shortcut: deformed shortcut (``"mds"``) or LCB(MPool(x)) (``"ms"``).
    """

    def __init__(self, in_ch, out_ch, n_inner=0, neuron=ILIFParams(), alpha=1.0, shortcut="mds", rng=None):
        rng = _rng(rng)
        self.residual = Sequential(
            LCB(in_ch, out_ch, 3, stride=2, neuron=neuron, rng=rng),
            *[MSBlock(out_ch, neuron=neuron, rng=rng) for _ in range(n_inner)],
            LCB(out_ch, out_ch, 1, neuron=neuron, alpha=alpha, rng=rng))
        if shortcut == "mds":
            self.shortcut = DeformedShortcut(in_ch, out_ch, neuron=neuron, alpha=alpha, rng=rng)
        elif shortcut == "ms":
            self.shortcut = _PoolThen(LCB(in_ch, out_ch, 1, neuron=neuron, alpha=alpha, rng=rng))
        else:
            raise ConfigError(f"unknown shortcut kind {shortcut!r}")

    def set_mode(self, mode):
        if isinstance(self.shortcut, DeformedShortcut):
            self.shortcut.mode = mode
        return self

    def forward(self, x):
        x = ag.as_tensor(x)
        H, W = x.data.shape[-2:]
        if H % 2 or W % 2:
            raise ValueError(f"dimension error: MDS-Block2 needs even spatial dims, got {H}x{W}")
        return super().forward(x)


class SFBlock(Module):
    """Two-path fusion sub-block (3x3-LCB x2 || 3x3-LDCB -> 1x1-LCB) followed by an MS-Block."""

    def __init__(self, channels, neuron=ILIFParams(), rng=None):
        rng = _rng(rng)
        self.wide = Sequential(LCB(channels, channels, 3, neuron=neuron, rng=rng),
                               LCB(channels, channels, 3, neuron=neuron, rng=rng))
        self.depthwise = Sequential(LCB(channels, channels, 3, depthwise=True, neuron=neuron, rng=rng),
                                    LCB(channels, channels, 1, neuron=neuron, rng=rng))
        self.ms = MSBlock(channels, neuron=neuron, rng=rng)

    def forward(self, x):
        z = ag.add(self.wide(x), self.depthwise(x))
        return self.ms(z)


def fuse(features, constants):
    """sum_i c_i * x_i over same-shape feature maps."""
    if len(features) != len(constants) or not features:
        raise ValueError("fuse needs one constant per feature map")
    shape = ag.as_tensor(features[0]).data.shape
    for f in features[1:]:
        if ag.as_tensor(f).data.shape != shape:
            raise ValueError(f"dimension mismatch in fuse: {shape} vs {ag.as_tensor(f).data.shape}")
    out = ag.weighted_sum(features, constants)
    if not any(isinstance(f, ag.Tensor) for f in features) and not any(isinstance(c, ag.Tensor) for c in constants):
        return out.data
    return out


VALID_DIRECTIONS = (1, 2, 4, 6)


class _Fusion(Module):
    """One fuse node: resample(src) fused with the lateral map, then an SF-Block."""

    def __init__(self, resample, channels, neuron, rng):
        self.resample = resample
        self.c_resampled = ag.Parameter(np.asarray(0.5))
        self.c_lateral = ag.Parameter(np.asarray(0.5))
        self.sf = SFBlock(channels, neuron=neuron, rng=rng)

    def forward(self, src, lateral):
        r = self.resample(src)
        return self.sf(fuse([r, lateral], [self.c_resampled, self.c_lateral]))


class _Upsample(Module):
    """1x1-LCB followed by 2x nearest-neighbour interpolation.

    Replication commutes with the neuron, the 1x1 conv and the tdBN statistics,
    so this equals interpolating first at a quarter of the cost.
    """

    def __init__(self, in_ch, out_ch, neuron, rng):
        self.lcb = LCB(in_ch, out_ch, 1, neuron=neuron, rng=rng)

    def forward(self, x):
        return ag.nni_upsample(self.lcb(x), 2)


class SMFM(Module):
    """Alternating top-down / bottom-up fusion over three pyramid levels.

    Levels are (p3, p4, p5) at strides 8, 16, 32. A top-down pass fuses
    p5 -> p4 -> p3; a bottom-up pass fuses p3 -> p4 -> p5. ``directions``
    passes run in total, starting top-down.
    """

    def __init__(self, channels, directions=4, neuron=ILIFParams(), rng=None):
        if directions not in VALID_DIRECTIONS:
            raise ConfigError(f"fusion directions must be one of {VALID_DIRECTIONS}, got {directions}")
        rng = _rng(rng)
        c3, c4, c5 = channels
        self.channels = tuple(channels)
        self.directions = directions
        self.passes = []
        for i in range(directions):
            if i % 2 == 0:
                self.passes.append(Sequential(
                    _Fusion(_Upsample(c5, c4, neuron, rng), c4, neuron, rng),
                    _Fusion(_Upsample(c4, c3, neuron, rng), c3, neuron, rng)))
            else:
                self.passes.append(Sequential(
                    _Fusion(LCB(c3, c4, 3, stride=2, neuron=neuron, rng=rng), c4, neuron, rng),
                    _Fusion(LCB(c4, c5, 3, stride=2, neuron=neuron, rng=rng), c5, neuron, rng)))

    @property
    def edges(self):
        """Resampling edges as (pass index, kind, source level, target level)."""
        out = []
        for i in range(self.directions):
            if i % 2 == 0:
                out += [(i, "up", 5, 4), (i, "up", 4, 3)]
            else:
                out += [(i, "down", 3, 4), (i, "down", 4, 5)]
        return out

    def forward(self, p3, p4, p5):
        for i, ps in enumerate(self.passes):
            first, second = ps.layers
            if i % 2 == 0:
                p4 = first(p5, p4)
                p3 = second(p4, p3)
            else:
                p4 = first(p3, p4)
                p5 = second(p4, p5)
        return p3, p4, p5

    def fold_constants(self):
        """Absorb each resampled-edge constant into the tdBN of its resampling LCB."""
        for ps in self.passes:
            for node in ps.layers:
                lcb = node.resample.lcb if isinstance(node.resample, _Upsample) else node.resample
                c = float(node.c_resampled.data)
                lcb.bn.lam.data = lcb.bn.lam.data * c
                lcb.bn.beta.data = lcb.bn.beta.data * c
                node.c_resampled.data = np.asarray(1.0)
        return self


# ------------------------------------------------------------------ array-level wrappers

def _run(block, x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[:, None]
    y = block(ag.Tensor(x)).data
    return y[:, 0] if squeeze else y


def ms_block(x, block: MSBlock):
    return _run(block, x)


def ems_block(x, block: EMSBlock):
    return _run(block, x)


def mds_block1(x, block: MDSBlock1):
    return _run(block, x)


def mds_block2(x, block: MDSBlock2, mode="train"):
    block.set_mode(mode)
    try:
        return _run(block, x)
    finally:
        block.set_mode("train")


def sf_block(x, block: SFBlock):
    return _run(block, x)


def smfm_forward(p3, p4, p5, module: SMFM):
    xs = [np.asarray(p, dtype=np.float64) for p in (p3, p4, p5)]
    squeeze = xs[0].ndim == 4
    if squeeze:
        xs = [p[:, None] for p in xs]
    out = module(*[ag.Tensor(p) for p in xs])
    return tuple(o.data[:, 0] if squeeze else o.data for o in out)

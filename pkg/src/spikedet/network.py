"""Declarative network description and the MDSNet builder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .blocks import SMFM, ConfigError, Identity, MDSBlock1, MDSBlock2, Sequential
from .layers import LCB, Conv2d, Module, TdBN
from .neuron import ILIFParams

__all__ = ["StageSpec", "NetworkSpec", "MDSNet", "build_network", "mdsnet_spec", "DEPTH_PRESETS"]

# residual-path MS-Block counts per stage, first entry downsampling (MDS-Block2)
DEPTH_PRESETS = {
    10: [[0], [0], [0], [0]],
    18: [[1], [1], [1], [1]],
    34: [[2], [1, 1], [2, 2], [2]],
    104: [[2], [3, 3], [15, 15], [3, 3]],
}
STAGE_CHANNELS = (64, 128, 256, 512)
ENCODING_CHANNELS = 64


@dataclass
class StageSpec:
    channels: int
    inner: list          # MS-Block count per block; block 0 downsamples


@dataclass
class NetworkSpec:
    stages: list
    in_channels: int = 3
    encoding_channels: int = 64
    shortcut: str = "mds"
    fusion_directions: int = 4
    num_classes: int = 0
    tau: float = 0.25
    v_th: float = 1.0
    d_max: int = 4
    T: int = 1
    name: str = "custom"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        for i, s in enumerate(self.stages):
            if s.channels < 1 or not s.inner or any(int(n) < 0 for n in s.inner):
                raise ConfigError(f"invalid stage {i}: {s}")
        if self.shortcut not in ("mds", "ms"):
            raise ConfigError(f"shortcut must be 'mds' or 'ms', got {self.shortcut!r}")
        if self.fusion_directions and len(self.stages) < 3:
            raise ConfigError("fusion needs at least three stages")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        ILIFParams(self.tau, self.v_th, self.d_max)

    @property
    def neuron(self):
        return ILIFParams(self.tau, self.v_th, self.d_max)

    @property
    def strides(self):
        """Output stride of the encoding block and each stage."""
        return [2 ** (i + 1) for i in range(len(self.stages) + 1)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def mdsnet_spec(depth=34, width=1.0, in_channels=3, fusion_directions=4, shortcut="mds",
                num_classes=0, **neuron) -> NetworkSpec:
    """MDSNet configuration from the depth table, channels scaled by ``width``."""
    if depth not in DEPTH_PRESETS:
        raise ConfigError(f"no MDSNet preset for depth {depth}; choose from {sorted(DEPTH_PRESETS)}")

    def ch(c):
        return max(1, int(round(c * width)))

    stages = [StageSpec(ch(c), list(inner)) for c, inner in zip(STAGE_CHANNELS, DEPTH_PRESETS[depth])]
    return NetworkSpec(stages=stages, in_channels=in_channels, encoding_channels=ch(ENCODING_CHANNELS),
                       shortcut=shortcut, fusion_directions=fusion_directions,
                       num_classes=num_classes, name=f"MDSNet{depth}", **neuron)


class EncodingBlock(Module):
    """Real-valued 3x3 stride-2 convolution and tdBN on the encoded input."""

    def __init__(self, in_ch, out_ch, rng):
        self.conv = Conv2d(in_ch, out_ch, 3, stride=2, rng=rng)
        self.bn = TdBN(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x, spiking=False))


class ClassifierHead(Module):
    """1x1-LCB to class channels, then the mean over time and space (rate decoding)."""

    def __init__(self, in_ch, num_classes, neuron, rng):
        self.lcb = LCB(in_ch, num_classes, 1, neuron=neuron, rng=rng)

    def forward(self, x):
        return ag.mean(self.lcb(x), axis=(0, 3, 4))


class MDSNet(Module):
    def __init__(self, spec: NetworkSpec, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        nrn = spec.neuron
        self.encoding = EncodingBlock(spec.in_channels, spec.encoding_channels, rng)
        stages = []
        c_in = spec.encoding_channels
        for s in spec.stages:
            blocks = [MDSBlock2(c_in, s.channels, int(s.inner[0]), neuron=nrn, shortcut=spec.shortcut, rng=rng)]
            blocks += [MDSBlock1(s.channels, int(n), neuron=nrn, shortcut=spec.shortcut, rng=rng)
                       for n in s.inner[1:]]
            stages.append(Sequential(*blocks))
            c_in = s.channels
        self.stages = stages
        self.sppf = Identity()  # slot for a spatial-pyramid pooling block
        self.neck = None
        if spec.fusion_directions:
            chans = tuple(s.channels for s in spec.stages[-3:])
            self.neck = SMFM(chans, spec.fusion_directions, neuron=nrn, rng=rng)
        self.head = None
        if spec.num_classes:
            self.head = ClassifierHead(spec.stages[-1].channels, spec.num_classes, nrn, rng)
        self.assign_names()

    def set_shortcut_mode(self, mode):
        for _, m in self.named_modules():
            if isinstance(m, MDSBlock2):
                m.set_mode(mode)
        return self

    def forward(self, x):
        """Run on (T, B, C, H, W) input; returns a dict of named feature maps
        (and ``logits`` when a classifier head is configured)."""
        x = ag.as_tensor(x)
        if x.data.ndim != 5:
            raise ValueError(f"expected (T, B, C, H, W) input, got shape {x.data.shape}")
        if x.data.shape[2] != self.spec.in_channels:
            raise ValueError(f"dimension mismatch: network expects {self.spec.in_channels} input channels")
        out = {}
        h = self.encoding(x)
        out["encoding"] = h
        for i, stage in enumerate(self.stages):
            h = stage(h)
            out[f"stage{i + 1}"] = h
        h = self.sppf(h)
        out[f"stage{len(self.stages)}"] = h
        if self.neck is not None:
            n = len(self.stages)
            p3, p4, p5 = self.neck(out[f"stage{n - 2}"], out[f"stage{n - 1}"], out[f"stage{n}"])
            out.update(p3=p3, p4=p4, p5=p5)
        if self.head is not None:
            out["logits"] = self.head(h)
        return out


def build_network(spec: NetworkSpec, seed=0) -> MDSNet:
    return MDSNet(spec, rng=np.random.default_rng(seed))

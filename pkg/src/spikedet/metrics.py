"""Firing-pattern and cost metrics: saturation, LFSI, firing rate, SOPs/FLOPs, energy."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._backend import kernels
from .layers import ActivityRecord, activity
from .neuron import SpikeTensor

__all__ = [
    "LFSIConfig", "MetricsReport", "saturation_mask", "lfsi_layer", "lfsi_network",
    "firing_rate", "count_flops", "count_sops", "energy", "variance_probe", "pearson",
    "E_AC_PJ", "E_MAC_PJ", "measure",
]

E_AC_PJ = 0.9
E_MAC_PJ = 4.6


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class LFSIConfig:
    S: int = 3

    def __post_init__(self):
        if self.S < 1 or self.S % 2 == 0:
            raise ValueError(f"neighbourhood side S must be odd and >= 1, got {self.S}")


def _spike_data(o):
    if isinstance(o, SpikeTensor):
        return o.data, o.d_max
    raise TypeError("expected a SpikeTensor")


def saturation_mask(o: SpikeTensor) -> np.ndarray:
    """1 where the time-summed count reaches T * d_max. Shape matches o without the time axis."""
    data, d_max = _spike_data(o)
    return (data.sum(axis=0) == data.shape[0] * d_max).astype(np.uint8)


def lfsi_layer(o: SpikeTensor, cfg: LFSIConfig = LFSIConfig()) -> float:
    """Mean local saturation density over channels and positions.

    Windows are clipped at the border and normalised by their in-bounds cell
    count. A batched (T, B, C, H, W) tensor is averaged over samples.
    """
    mask = saturation_mask(o)
    if mask.ndim == 3:
        mask = mask[None]
    B, C, H, W = mask.shape
    dens = kernels.box_density(mask.reshape(B * C, H, W), cfg.S)
    # correctly rounded sum, so the value does not depend on reduction order
    return math.fsum(dens.ravel()) / dens.size


def lfsi_network(layers, cfg: LFSIConfig = LFSIConfig()) -> float:
    if not layers:
        raise ValueError("LFSI needs at least one spiking layer")
    vals = [lfsi_layer(o, cfg) for o in layers]
    return float(math.fsum(vals) / len(vals))


def firing_rate(layers) -> float:
    """Total spikes over the maximum possible on the binary-unrolled trains."""
    if not layers:
        raise ValueError("firing rate needs at least one layer")
    total = 0
    cap = 0
    for o in layers:
        data, d_max = _spike_data(o)
        total += int(data.sum(dtype=np.int64))
        cap += data.size * d_max
    return total / cap


def _conv_sop(c) -> float:
    h, w = c.out_hw
    fr = c.spike_sum / (c.input_numel * c.batch * c.steps)
    return sops_single(fr, c.in_ch, c.out_ch, c.kernel, h, w, c.steps, c.groups)


def count_sops(convs) -> float:
    """Synaptic operations per sample for spike-driven convolutions.

    ``convs`` are ConvRecord entries captured by ``layers.activity``. The
    firing rate is taken on the unrolled binary train (T * d_max steps), so
    an integer spike of value m costs m accumulations.
    """
    if not convs:
        raise StateError("no recorded layers; run a forward pass under layers.activity()")
    return float(math.fsum(_conv_sop(c) for c in convs if c.spike_sum is not None))


def sops_single(fr, c_in, c_out, k, h, w, steps=1, groups=1):
    """SOPs for one layer from its presynaptic firing rate."""
    return steps * fr * c_in * (c_out // groups) * k * k * h * w


def flops_single(c_in, c_out, k, h, w, groups=1):
    return 2 * (c_in // groups) * c_out * k * k * h * w


def count_flops(net, input_shape, layers="encoding"):
    """FLOPs of the real-valued layers (or of every conv with ``layers="all"``) for one sample.

    ``input_shape`` is (C, H, W).
    """
    from . import autograd as ag

    C, H, W = input_shape
    x = np.zeros((1, 1, C, H, W))
    with activity() as rec:
        net(ag.Tensor(x))
    total = 0
    for c in rec.convs:
        if layers == "all" or c.spike_sum is None:
            total += flops_single(c.in_ch, c.out_ch, c.kernel, *c.out_hw, groups=c.groups)
    return total


def energy(sops, encoding_flops) -> float:
    """Theoretical energy in millijoules: E_AC * SOPs + E_MAC * FLOPs / 2."""
    if sops < 0 or encoding_flops < 0:
        raise ValueError("operation counts must be non-negative")
    return (E_AC_PJ * sops + E_MAC_PJ * encoding_flops / 2.0) * 1e-12 * 1e3


def variance_probe(net, batch) -> list:
    """Sample variance of each spiking layer's presynaptic input, in layer order."""
    from . import autograd as ag

    with activity() as rec:
        net(ag.Tensor(np.asarray(batch, dtype=np.float64)))
    return [r.input_var for r in rec.spiking]


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson correlation undefined for zero variance")
    return float(dx @ dy / math.sqrt(sxx * syy))


# ------------------------------------------------------------------ reports

@dataclass
class MetricsReport:
    firing_rate: float
    lfsi: float
    layers: list = field(default_factory=list)  # per spiking layer dicts
    sops: float = 0.0
    flops: float = 0.0
    energy_mj: float = 0.0
    S: int = 3
    extra: dict = field(default_factory=dict)

    LAYER_FIELDS = ("layer", "shape", "firing_rate", "lfsi", "input_var")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.LAYER_FIELDS)
        for row in self.layers:
            w.writerow([row["layer"], "x".join(map(str, row["shape"])), repr(row["firing_rate"]),
                        repr(row["lfsi"]), repr(row["input_var"])])
        w.writerow(["__network__", "", repr(self.firing_rate), repr(self.lfsi), ""])
        return buf.getvalue()


def measure(net, x, cfg: LFSIConfig = LFSIConfig(), input_shape=None) -> tuple:
    """Forward ``x`` (T, B, C, H, W) once and summarise the recorded activity.

    Returns (MetricsReport, network outputs).
    """
    from . import autograd as ag

    with activity() as rec:
        out = net(ag.Tensor(np.asarray(x, dtype=np.float64)))
    report = report_from_activity(rec, cfg)
    if input_shape is not None:
        report.flops = float(count_flops(net, input_shape))
        report.energy_mj = energy(report.sops, report.flops)
    return report, out


def report_from_activity(rec: ActivityRecord, cfg: LFSIConfig = LFSIConfig()) -> MetricsReport:
    layers = []
    spikes = []
    for r in rec.spiking:
        s = SpikeTensor(r.spikes, r.d_max)
        spikes.append(s)
        layers.append({"layer": r.name, "shape": list(r.spikes.shape),
                       "firing_rate": firing_rate([s]), "lfsi": lfsi_layer(s, cfg),
                       "input_var": r.input_var})
    if not spikes:
        raise StateError("no spiking layers were recorded")
    return MetricsReport(
        firing_rate=firing_rate(spikes),
        lfsi=float(math.fsum(l["lfsi"] for l in layers) / len(layers)),
        layers=layers, sops=count_sops(rec.convs), S=cfg.S)

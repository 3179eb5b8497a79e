"""Convolution, tdBN, resampling, and the LCB composite (neuron -> conv -> tdBN).

Two surfaces live here: plain functions over numpy arrays (``conv2d``,
``tdbn_forward``, ``fold_tdbn_into_conv``, ...) and trainable ``Module``
classes that run on the gradient tape.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import functional as fn
from .neuron import ILIFParams, SpikeTensor

__all__ = [
    "ConvSpec", "TdBNParams", "conv2d", "tdbn_forward", "fold_tdbn_into_conv",
    "maxpool2", "stride_downsample", "nni_upsample", "lcb_forward",
    "Module", "Conv2d", "TdBN", "ILIF", "LCB", "activity", "ActivityRecord",
]


class ModeError(ValueError):
    pass


# ------------------------------------------------------------------ records

@dataclass
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(f"channels ({self.in_ch}, {self.out_ch}) not divisible by groups={self.groups}")
        wshape = (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)
        if self.weight is None:
            self.weight = np.zeros(wshape)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.shape != wshape:
            raise ValueError(f"weight shape {self.weight.shape} != {wshape}")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("non-finite convolution weights")
        if self.bias is None:
            self.bias = np.zeros(self.out_ch)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(self.out_ch)


@dataclass
class TdBNParams:
    lam: np.ndarray
    beta: np.ndarray
    mu_inf: np.ndarray
    var_inf: np.ndarray
    alpha: float = 1.0
    v_th: float = 1.0
    eps: float = 1e-5
    mode: str = "eval"
    momentum: float = 0.1

    def __post_init__(self):
        for name in ("lam", "beta", "mu_inf", "var_inf"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if np.any(self.var_inf < 0):
            raise ValueError("running variance must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @classmethod
    def identity(cls, channels, **kw):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), **kw)


# ------------------------------------------------------------------ array helpers

def _as_nchw(x):
    """Flatten leading (time[, batch]) axes into N; returns (array, restore fn)."""
    if isinstance(x, SpikeTensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-3]
    flat = x.reshape((-1,) + x.shape[-3:])
    return flat, lambda y: y.reshape(lead + y.shape[1:])


def conv2d(x, spec: ConvSpec):
    """Cross-correlate every time step of ``x`` with ``spec``; spikes are promoted to reals."""
    flat, restore = _as_nchw(x)
    if flat.shape[1] != spec.in_ch:
        raise ValueError(f"dimension mismatch: input has {flat.shape[1]} channels, conv expects {spec.in_ch}")
    y, _ = fn.conv2d_forward(flat, spec.weight, spec.bias, spec.stride, spec.padding, spec.groups)
    return restore(y)


def tdbn_forward(x, p: TdBNParams):
    """tdBN; train mode normalises with batch statistics over (T, B, H, W) and
    updates the running statistics in ``p`` in place."""
    flat, restore = _as_nchw(x)
    if flat.shape[1] != p.lam.shape[0]:
        raise ValueError(f"dimension mismatch: {flat.shape[1]} channels vs {p.lam.shape[0]} tdBN channels")
    if p.mode == "train":
        mean, var = fn.batch_stats(flat)
        n = flat.shape[0] * flat.shape[2] * flat.shape[3]
        p.mu_inf[...] = (1 - p.momentum) * p.mu_inf + p.momentum * mean
        p.var_inf[...] = (1 - p.momentum) * p.var_inf + p.momentum * var * n / max(n - 1, 1)
    else:
        mean, var = p.mu_inf, p.var_inf
    return restore(fn.tdbn_forward(flat, p.lam, p.beta, p.alpha, p.v_th, mean, var, p.eps))


def fold_tdbn_into_conv(c: ConvSpec, p: TdBNParams) -> ConvSpec:
    """Merge eval-mode tdBN into the preceding convolution.

    W' = lam * alpha * v_th * W / sqrt(var + eps)
    B' = lam * alpha * v_th * (B - mu) / sqrt(var + eps) + beta
    """
    if p.mode != "eval":
        raise ModeError("tdBN folding needs eval-mode (running) statistics")
    s = fn.tdbn_scale(p.lam, p.alpha, p.v_th, p.var_inf, p.eps)
    return replace(c, weight=c.weight * s.reshape(-1, 1, 1, 1),
                   bias=s * (c.bias - p.mu_inf) + p.beta)


def maxpool2(x):
    flat, restore = _as_nchw(x)
    return restore(fn.maxpool2_forward(flat)[0])


def stride_downsample(x, s=2):
    flat, restore = _as_nchw(x)
    return restore(np.ascontiguousarray(fn.stride_downsample(flat, s)))


def nni_upsample(x, f=2):
    flat, restore = _as_nchw(x)
    return restore(fn.nni_upsample(flat, f))


def lcb_forward(x, neuron: ILIFParams, conv: ConvSpec, bn: TdBNParams, depthwise=False):
    """Spiking layer over all time steps, then convolution, then tdBN."""
    from .neuron import ilif_run

    if depthwise and not (conv.groups == conv.in_ch == conv.out_ch):
        raise ValueError("depthwise LCB requires groups == in_ch == out_ch")
    spikes, _, _ = ilif_run(x, neuron)
    return tdbn_forward(conv2d(spikes, conv), bn)


# ------------------------------------------------------------------ activity recording

@dataclass
class SpikeRecord:
    name: str
    spikes: np.ndarray          # (T, B, C, H, W) int32
    d_max: int
    input_var: float


@dataclass
class ConvRecord:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    groups: int
    out_hw: tuple
    steps: int                  # T * d_max for spiking inputs, T otherwise
    spike_sum: float | None     # total input spikes, None for real-valued input
    input_numel: int            # input neurons per sample per step
    batch: int


@dataclass
class ActivityRecord:
    spiking: list = field(default_factory=list)
    convs: list = field(default_factory=list)


_LOCAL = threading.local()


def _recorders():
    if not hasattr(_LOCAL, "recs"):
        _LOCAL.recs = []
    return _LOCAL.recs


@contextmanager
def activity():
    """Collect spike maps and conv geometry from every layer run inside the block."""
    rec = ActivityRecord()
    _recorders().append(rec)
    try:
        yield rec
    finally:
        _recorders().pop()


def _recorder():
    recs = _recorders()
    return recs[-1] if recs else None


# ------------------------------------------------------------------ modules

class Module:
    training = True
    name = ""

    def __call__(self, *args, **kwargs):
        tape = ag.current_tape()
        if tape is None:
            return self.forward(*args, **kwargs)
        tape.scope.append(self.name)
        try:
            return self.forward(*args, **kwargs)
        finally:
            tape.scope.pop()

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{key}.{i}", v

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, ag.Parameter):
                yield (f"{prefix}.{key}" if prefix else key), val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, val in getattr(self, "_buffers", {}).items():
            yield (f"{prefix}.{key}" if prefix else key), val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}.{key}" if prefix else key)

    def assign_names(self):
        for path, m in self.named_modules():
            m.name = path or type(self).__name__
            for pname, p in vars(m).items():
                if isinstance(p, ag.Parameter):
                    p.name = f"{m.name}.{pname}"
        return self

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=None, groups=1, rng=None):
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.groups = stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = ag.Parameter(he_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        self.bias = ag.Parameter(np.zeros(out_ch))

    def spec(self) -> ConvSpec:
        return ConvSpec(self.in_ch, self.out_ch, self.kernel, self.stride, self.padding,
                        self.groups, self.weight.data.copy(), self.bias.data.copy())

    def load_spec(self, spec: ConvSpec):
        self.weight.data = np.array(spec.weight, dtype=np.float64)
        self.bias.data = np.array(spec.bias, dtype=np.float64)

    def forward(self, x, spiking=False, d_max=1):
        x = ag.as_tensor(x)
        if x.data.shape[2] != self.in_ch:
            raise ValueError(f"dimension mismatch in {self.name or 'conv'}: "
                             f"{x.data.shape[2]} channels, expected {self.in_ch}")
        y = ag.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        rec = _recorder()
        if rec is not None:
            T, B = x.data.shape[:2]
            rec.convs.append(ConvRecord(
                self.name, self.in_ch, self.out_ch, self.kernel, self.groups,
                tuple(y.data.shape[3:]), T * (d_max if spiking else 1),
                float(x.data.sum()) if spiking else None,
                int(np.prod(x.data.shape[2:])), B))
        return y


class TdBN(Module):
    def __init__(self, channels, alpha=1.0, v_th=1.0, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.alpha, self.v_th, self.eps, self.momentum = alpha, v_th, eps, momentum
        self.lam = ag.Parameter(np.ones(channels))
        self.beta = ag.Parameter(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def params(self) -> TdBNParams:
        return TdBNParams(self.lam.data.copy(), self.beta.data.copy(),
                          self._buffers["running_mean"].copy(), self._buffers["running_var"].copy(),
                          self.alpha, self.v_th, self.eps, "train" if self.training else "eval",
                          self.momentum)

    def forward(self, x):
        run = (self._buffers["running_mean"], self._buffers["running_var"])
        return ag.tdbn(x, self.lam, self.beta, self.alpha, self.v_th, self.eps,
                       running=run, train=self.training, momentum=self.momentum)


class ILIF(Module):
    """Integer LIF layer over (T, B, C, H, W) membrane inputs.

    ``straight_through`` switches the layer into an oracle mode used by
    gradient checks: "record" stores the base-point membranes, spikes and
    surrogate slopes; "replay" then emits the frozen linearisation
    o = o0 + s0 * (u - u0) so finite differences see a smooth function.
    """

    def __init__(self, params: ILIFParams = ILIFParams()):
        self.params = params
        self.straight_through = None
        self._st = None

    def forward(self, x):
        x = ag.as_tensor(x)
        p = self.params
        if self.straight_through == "replay":
            return ag.Tensor(self._replay(x.data))
        try:
            out, u = ag.ilif(x, p.tau, p.v_th, p.d_max)
        except FloatingPointError as e:
            raise FloatingPointError(f"{self.name or 'I-LIF'}: {e}") from None
        if self.straight_through == "record":
            s0 = ((u >= 0.0) & (u <= p.d_max)).astype(np.float64)
            self._st = (u.copy(), out.data.copy(), s0)
        rec = _recorder()
        if rec is not None:
            rec.spiking.append(SpikeRecord(self.name, out.data.astype(np.int32), p.d_max,
                                           float(x.data.var())))
        return out

    def _replay(self, x):
        u0, o0, s0 = self._st
        p = self.params
        h = np.zeros(x.shape[1:])
        out = np.empty_like(x)
        for t in range(x.shape[0]):
            u = p.tau * h + x[t]
            o = o0[t] + s0[t] * (u - u0[t])
            h = u - p.v_th * o
            out[t] = o
        return out


class LCB(Module):
    """I-LIF -> Conv -> tdBN. ``depthwise`` makes it an LDCB.

    ``post_spike`` is an optional spatial op applied to the spikes before the
    convolution (e.g. max pooling).
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, depthwise=False, neuron=ILIFParams(),
                 alpha=1.0, post_spike=None, rng=None):
        if depthwise and in_ch != out_ch:
            raise ValueError("depthwise LCB needs in_ch == out_ch")
        self.neuron = ILIF(neuron)
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, groups=in_ch if depthwise else 1, rng=rng)
        self.bn = TdBN(out_ch, alpha=alpha, v_th=neuron.v_th)
        self.post_spike = post_spike

    def forward(self, x):
        s = self.neuron(x)
        if self.post_spike is not None:
            s = self.post_spike(s)
        return self.bn(self.conv(s, spiking=True, d_max=self.neuron.params.d_max))

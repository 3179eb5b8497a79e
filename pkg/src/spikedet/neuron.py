"""Integer and binary leaky integrate-and-fire neurons.

Tensors are dense numpy arrays, time-major: a real tensor has shape
(T, C, H, W) (or (T, B, C, H, W) when batched) in float64, and a spike
tensor holds int32 counts in [0, d_max].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import kernels

__all__ = [
    "SpikeTensor",
    "ILIFParams",
    "LIFParams",
    "MembraneState",
    "round_half_away",
    "ilif_step",
    "ilif_run",
    "ilif_surrogate",
    "lif_step",
    "lif_surrogate",
    "unroll_to_binary",
    "if_unrolled_count",
    "rate_decode",
]


class NumericError(ValueError):
    """Non-finite values reached a neuron."""


@dataclass(frozen=True)
class ILIFParams:
    tau: float = 0.25
    v_th: float = 1.0
    d_max: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if int(self.d_max) != self.d_max or self.d_max < 1:
            raise ValueError(f"d_max must be a positive integer, got {self.d_max}")


@dataclass(frozen=True)
class LIFParams:
    tau: float = 0.25
    v_th: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"surrogate width a must be positive, got {self.a}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")


@dataclass
class SpikeTensor:
    """Integer spike counts with their upper limit.

    ``data`` is (T, C, H, W) or (T, B, C, H, W) int32.
    """

    data: np.ndarray
    d_max: int

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind == "f":
            if not np.all(arr == np.round(arr)):
                raise ValueError("spike tensor entries must be integers")
        self.data = arr.astype(np.int32, copy=False)
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.data.size and (self.data.min() < 0 or self.data.max() > self.d_max):
            raise ValueError(
                f"spike counts outside [0, {self.d_max}]: "
                f"min={self.data.min()}, max={self.data.max()}"
            )

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MembraneState:
    """Retained potential h for one time slice."""

    h: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "MembraneState":
        return cls(np.zeros(shape, dtype=np.float64))


def round_half_away(u):
    return kernels.round_half_away(u)


def _check_slice(state: MembraneState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(state.h, dtype=np.float64)
    if x.shape != h.shape:
        raise ValueError(f"dimension mismatch: state {h.shape} vs input {x.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
        raise NumericError("non-finite membrane state or input")
    return x


def ilif_step(state: MembraneState, x, p: ILIFParams = ILIFParams()):
    """One I-LIF time step. Returns (integer spikes, new state)."""
    x = _check_slice(state, x)
    shape = x.shape
    spikes, _, h = kernels.ilif_forward(
        x.reshape(1, -1), np.asarray(state.h, dtype=np.float64).reshape(-1),
        p.tau, p.v_th, p.d_max)
    return spikes.reshape(shape), MembraneState(h.reshape(shape))


def ilif_run(x, p: ILIFParams = ILIFParams(), state: MembraneState | None = None):
    """Run I-LIF over all time steps of ``x`` (time-major).

    Returns (SpikeTensor, membrane potentials u, final state).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite presynaptic input")
    T = x.shape[0]
    flat = x.reshape(T, -1)
    h0 = np.zeros(flat.shape[1]) if state is None else np.asarray(state.h).reshape(-1)
    spikes, u, h = kernels.ilif_forward(flat, h0, p.tau, p.v_th, p.d_max)
    return (SpikeTensor(spikes.reshape(x.shape), p.d_max), u.reshape(x.shape),
            MembraneState(h.reshape(x.shape[1:])))


def ilif_surrogate(u, d_max: int = 4):
    """Box surrogate derivative: 1 on the closed interval [0, d_max], else 0."""
    u = np.asarray(u, dtype=np.float64)
    out = ((u >= 0.0) & (u <= d_max)).astype(np.float64)
    return out if out.ndim else float(out)


def lif_step(state: MembraneState, x, p: LIFParams = LIFParams()):
    """One binary LIF time step with soft reset. Threshold equality fires."""
    x = _check_slice(state, x)
    shape = x.shape
    spikes, _, h = kernels.lif_forward(
        x.reshape(1, -1), np.asarray(state.h, dtype=np.float64).reshape(-1),
        p.tau, p.v_th)
    return spikes.reshape(shape), MembraneState(h.reshape(shape))


def lif_surrogate(u, p: LIFParams = LIFParams()):
    """Rectangular surrogate (1/a) * 1[|u - v_th| <= a/2]."""
    u = np.asarray(u, dtype=np.float64)
    out = (np.abs(u - p.v_th) <= 0.5 * p.a).astype(np.float64) / p.a
    return out if out.ndim else float(out)


def unroll_to_binary(s: SpikeTensor) -> np.ndarray:
    """Expand integer counts into binary micro-step trains.

    A count m at time t becomes m ones followed by d_max - m zeros, so the
    result has T * d_max steps along axis 0.
    """
    data = np.asarray(s.data)
    if data.size and (data.min() < 0 or data.max() > s.d_max):
        raise ValueError(f"spike counts outside [0, {s.d_max}]")
    D = s.d_max
    k = np.arange(D).reshape((1, D) + (1,) * (data.ndim - 1))
    binary = (k < data[:, None]).astype(np.int32)
    return binary.reshape((data.shape[0] * D,) + data.shape[1:])


def if_unrolled_count(u, v_th: float = 1.0, d_max: int = 4) -> np.ndarray:
    """Spike count of a soft-reset IF neuron run for d_max zero-input
    micro-steps from initial membrane u + 0.5."""
    return kernels.if_unrolled_count(u, v_th, d_max)


def rate_decode(s) -> np.ndarray:
    """Mean spike count over time, keeping a unit time axis."""
    data = s.data if isinstance(s, SpikeTensor) else np.asarray(s)
    if data.shape[0] < 1:
        raise ValueError("rate decoding needs at least one time step")
    return data.astype(np.float64).mean(axis=0, keepdims=True)

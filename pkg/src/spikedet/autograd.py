"""A small tape-based reverse-mode gradient engine.

Operations executed inside ``with GradTape() as tape:`` are appended to the
tape in forward order; ``tape.backward`` replays them in exact reverse.
Spiking nodes substitute their surrogate derivative on the way back.

Spatial tensors are (T, B, C, H, W).
"""
from __future__ import annotations

import threading

import numpy as np

from . import functional as fn
from ._backend import kernels

_LOCAL = threading.local()  # one tape stack per thread


def _tapes():
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward", "op", "where")

    def __init__(self, out, parents, backward, op, where=""):
        self.where = where
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class GradTape:
    """Records differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.scope: list[str] = []   # names of the modules currently running

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def record(self, out, parents, backward, op):
        where = next((n for n in reversed(self.scope) if n), "")
        self.nodes.append(_Node(out, parents, backward, op, where))

    def first_nonfinite(self):
        """(op, module name) of the earliest recorded node with a non-finite output, or None."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.out.data)):
                return node.op, node.where
        return None

    def _run(self, root, seed):
        grads = {id(root): np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                           root.data.shape).copy()}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = parent
        # whatever remains was never produced on the tape: leaves
        return {k: (leaves.get(k, root), g) for k, g in grads.items()}

    def gradients(self, root, wrt, seed=1.0):
        """Gradients of ``root`` (contracted with ``seed``) w.r.t. each tensor in ``wrt``.

        Does not touch ``.grad`` so it can be called repeatedly, e.g. once per
        Jacobian row.
        """
        res = self._run(root, seed)
        out = []
        for t in wrt:
            hit = res.get(id(t))
            out.append(np.zeros_like(t.data) if hit is None else hit[1])
        return out

    def backward(self, root, seed=1.0):
        """Accumulate d root / d leaf into ``leaf.grad`` for every leaf that requires grad."""
        for key, (leaf, g) in self._run(root, seed).items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient reaching {leaf.name or 'input'}")
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def current_tape():
    tapes = _tapes()
    return tapes[-1] if tapes else None


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    tape = current_tape()
    if req and tape is not None:
        tape.record(out, parents, backward, op)
    return out


def _merge(x):
    T, B = x.shape[:2]
    return x.reshape((T * B,) + x.shape[2:])


def _split(x, T, B):
    return x.reshape((T, B) + x.shape[1:])


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"dimension mismatch in add: {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_n(xs):
    xs = [as_tensor(x) for x in xs]
    shape = xs[0].data.shape
    for x in xs[1:]:
        if x.data.shape != shape:
            raise ValueError(f"dimension mismatch in sum: {shape} vs {x.data.shape}")
    total = xs[0].data.copy()
    for x in xs[1:]:
        total += x.data
    return _make(total, tuple(xs), lambda g: tuple(g for _ in xs), "add_n")


def scale(x, c):
    """x times a scalar; ``c`` may be a float or a 0-d Tensor (learnable constant)."""
    x = as_tensor(x)
    if isinstance(c, Tensor):
        cv = float(c.data)
        return _make(x.data * cv, (x, c),
                     lambda g: (g * cv, np.asarray(np.vdot(g, x.data))), "scale")
    cv = float(c)
    return _make(x.data * cv, (x,), lambda g: (g * cv,), "scale")


def weighted_sum(xs, cs):
    """sum_i c_i * x_i with scalar (possibly learnable) coefficients."""
    if len(xs) != len(cs):
        raise ValueError("need one coefficient per feature map")
    return add_n([scale(x, c) for x, c in zip(xs, cs)])


def concat(xs, axis=2):
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.data.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tuple(xs), backward, "concat")


# ---------------------------------------------------------------- spatial ops

def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    x, w = as_tensor(x), as_tensor(w)
    T, B = x.data.shape[:2]
    y, cache = fn.conv2d_forward(_merge(x.data), w.data,
                                 None if b is None else b.data, stride, pad, groups)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw, gb = fn.conv2d_backward(_merge(g), w.data, cache,
                                        need_input_grad=x.requires_grad)
        gx = None if gx is None else _split(gx, T, B)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(_split(y, T, B), parents, backward, "conv2d")


def maxpool2(x):
    x = as_tensor(x)
    T, B = x.data.shape[:2]
    y, idx = fn.maxpool2_forward(_merge(x.data))
    return _make(_split(y, T, B), (x,),
                 lambda g: (_split(fn.maxpool2_backward(_merge(g), idx), T, B),), "maxpool2")


def stride_downsample(x, s=2):
    x = as_tensor(x)
    T, B = x.data.shape[:2]
    shape = _merge(x.data).shape
    y = fn.stride_downsample(_merge(x.data), s)
    return _make(_split(np.ascontiguousarray(y), T, B), (x,),
                 lambda g: (_split(fn.stride_downsample_backward(_merge(g), shape, s), T, B),),
                 "stride_downsample")


def nni_upsample(x, f=2):
    x = as_tensor(x)
    T, B = x.data.shape[:2]
    y = fn.nni_upsample(_merge(x.data), f)
    return _make(_split(y, T, B), (x,),
                 lambda g: (_split(fn.nni_upsample_backward(_merge(g), f), T, B),),
                 "nni_upsample")


def tdbn(x, lam, beta, alpha, v_th, eps, running=None, train=True, momentum=0.1):
    """Threshold-dependent batch norm over (T, B, H, W) per channel.

    ``running`` is a (mean, var) pair of arrays updated in place in train mode
    and used as the statistics in eval mode.
    """
    x = as_tensor(x)
    T, B = x.data.shape[:2]
    xm = _merge(x.data)
    if train:
        mean, var = fn.batch_stats(xm)
        if running is not None:
            n = xm.shape[0] * xm.shape[2] * xm.shape[3]
            unbiased = var * n / max(n - 1, 1)
            running[0][...] = (1 - momentum) * running[0] + momentum * mean
            running[1][...] = (1 - momentum) * running[1] + momentum * unbiased
    else:
        mean, var = running
        mean, var = mean.copy(), var.copy()
    y = fn.tdbn_forward(xm, lam.data, beta.data, alpha, v_th, mean, var, eps)
    xhat = (xm - mean.reshape(1, -1, 1, 1)) / np.sqrt(var + eps).reshape(1, -1, 1, 1)

    def backward(g):
        gm = _merge(g)
        if train:
            gx, glam, gbeta = fn.tdbn_train_backward(gm, xhat, lam.data, alpha, v_th, var, eps)
        else:
            sc = fn.tdbn_scale(lam.data, alpha, v_th, var, eps)
            gx = gm * sc.reshape(1, -1, 1, 1)
            glam = (gm * xhat).sum(axis=(0, 2, 3)) * alpha * v_th
            gbeta = gm.sum(axis=(0, 2, 3))
        return _split(gx, T, B), glam, gbeta

    return _make(_split(y, T, B), (x, lam, beta), backward, "tdbn")


# ---------------------------------------------------------------- neurons

def ilif(x, tau, v_th, d_max):
    """Integer LIF over the time axis. Returns (spikes as float Tensor, membrane u)."""
    x = as_tensor(x)
    shape = x.data.shape
    T = shape[0]
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("non-finite presynaptic input to I-LIF")
    flat = x.data.reshape(T, -1)
    spikes, u, _ = kernels.ilif_forward(flat, np.zeros(flat.shape[1]), tau, v_th, d_max)

    def backward(g):
        return (kernels.ilif_backward(g.reshape(T, -1), u, tau, v_th, d_max).reshape(shape),)

    out = _make(spikes.reshape(shape).astype(np.float64), (x,), backward, "ilif")
    return out, u.reshape(shape)


def lif(x, tau, v_th, a):
    x = as_tensor(x)
    shape = x.data.shape
    T = shape[0]
    flat = x.data.reshape(T, -1)
    spikes, u, _ = kernels.lif_forward(flat, np.zeros(flat.shape[1]), tau, v_th)

    def backward(g):
        return (kernels.lif_backward(g.reshape(T, -1), u, tau, v_th, a).reshape(shape),)

    out = _make(spikes.reshape(shape).astype(np.float64), (x,), backward, "lif")
    return out, u.reshape(shape)


# ---------------------------------------------------------------- reductions / losses

def mean(x, axis):
    x = as_tensor(x)
    axis = tuple(a % x.data.ndim for a in np.atleast_1d(axis))
    n = int(np.prod([x.data.shape[a] for a in axis]))
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _make(x.data.mean(axis=axis), (x,), backward, "mean")


def dot(x, r):
    """<x, r> for a constant array r; a scalar probe loss."""
    x = as_tensor(x)
    r = np.asarray(r, dtype=np.float64)
    return _make(np.asarray(np.vdot(x.data, r)), (x,), lambda g: (g * r,), "dot")


def mse(x, target):
    x = as_tensor(x)
    target = np.asarray(target, dtype=np.float64)
    diff = x.data - target
    n = diff.size
    return _make(np.asarray((diff ** 2).mean()), (x,), lambda g: (g * 2.0 * diff / n,), "mse")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = z.shape[0]
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")

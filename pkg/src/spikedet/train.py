"""Surrogate-gradient training: loss/gradient evaluation, momentum SGD, and
toy-scale training runs on synthetic images."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .layers import ILIF, activity
from .metrics import LFSIConfig, report_from_activity
from .network import MDSNet, NetworkSpec, StageSpec, build_network

__all__ = [
    "OptimState", "forward_backward", "sgd_step", "make_dataset", "train_toy",
    "toy_spec", "History", "TrainingError", "evaluate", "block_gradient_norms",
    "set_straight_through", "gradient_check",
]

TASKS = ("patterns", "blobs")


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _origin(tape):
    hit = tape.first_nonfinite()
    if hit is None:
        return ""
    return f" (first non-finite value from {hit[0]} in {hit[1] or 'the loss'})"


def forward_backward(net, batch, loss_fn, target=None):
    """Forward ``batch`` on a fresh tape, backpropagate ``loss_fn(output, target)``.

    ``net`` maps a Tensor to a Tensor (or to a dict with ``"logits"``).
    Returns (loss, {parameter name: gradient}).
    """
    params = list(net.named_parameters())
    for _, p in params:
        p.grad = None
    with ag.GradTape() as tape:
        try:
            out = net(ag.Tensor(np.asarray(batch, dtype=np.float64)))
            if isinstance(out, dict):
                out = out["logits"]
            loss = loss_fn(out, target)
        except FloatingPointError as e:
            raise FloatingPointError(f"{e}{_origin(tape)}") from None
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss {float(loss.data)}{_origin(tape)}")
        tape.backward(loss)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    return float(loss.data), grads


def sgd_step(params, grads, opt: OptimState):
    """Momentum SGD with L2 weight decay; updates ``params`` in place.

    ``params`` is a {name: Parameter} mapping and ``grads`` {name: array}.
    """
    for name, p in params.items():
        g = grads[name]
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        if opt.momentum:
            v = opt.velocity.get(name)
            v = g.copy() if v is None else opt.momentum * v + g
            opt.velocity[name] = v
            g = v
        p.data = p.data - opt.lr * g
    return params


def set_straight_through(net, mode):
    """Put every I-LIF layer of ``net`` into straight-through mode None, "record" or "replay"."""
    for _, m in net.named_modules():
        if isinstance(m, ILIF):
            m.straight_through = mode
    return net


def gradient_check(net, x, per_param=4, eps=1e-3, seed=0):
    """Compare tape gradients with central finite differences of the
    straight-through relaxation of ``net`` at ``x``.

    The loss is a random projection of the output (``logits`` for dicts).
    Returns (worst relative error, number of entries checked).
    """
    rng = np.random.default_rng(seed)
    x = ag.Tensor(np.asarray(x, dtype=np.float64))

    def out(o):
        return o["logits"] if isinstance(o, dict) else o

    params = dict(net.named_parameters())
    names = list(params)
    set_straight_through(net, "record")
    try:
        with ag.GradTape() as tape:
            y = out(net(x))
            r = rng.standard_normal(y.data.shape)
            grads = tape.gradients(ag.dot(y, r), [params[n] for n in names])
        set_straight_through(net, "replay")
        worst, count = 0.0, 0
        for name, g in zip(names, grads):
            flat = params[name].data.reshape(-1)
            for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + eps
                lp = float(np.sum(out(net(x)).data * r))
                flat[i] = old - eps
                lm = float(np.sum(out(net(x)).data * r))
                flat[i] = old
                fd = (lp - lm) / (2 * eps)
                an = float(g.reshape(-1)[i])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
                count += 1
    finally:
        set_straight_through(net, None)
    return worst, count


def block_gradient_norms(net: MDSNet, x, seed=0):
    """RMS gradient at the input of every backbone block for a random linear
    read-out of the last stage, ordered first block to last.

    Each block runs on a detached copy of its input so the per-block input
    gradients can be read off the tape one block at a time.
    """
    rng = np.random.default_rng(seed)
    blocks = [b for stage in net.stages for b in stage.layers]
    leaves, outs = [], []
    with ag.GradTape() as tape:
        h = net.encoding(ag.Tensor(np.asarray(x, dtype=np.float64)))
        for b in blocks:
            leaf = ag.Tensor(h.data.copy(), requires_grad=True)
            leaves.append(leaf)
            h = b(leaf)
            outs.append(h)
    g = rng.standard_normal(outs[-1].data.shape)
    norms = []
    for leaf, out in zip(reversed(leaves), reversed(outs)):
        (g,) = tape.gradients(out, [leaf], seed=g)
        norms.append(float(np.sqrt(np.mean(g * g))))
    return norms[::-1]


# ------------------------------------------------------------------ synthetic data

def _patterns(rng, n, size):
    """Two classes of oriented gratings (0: horizontal stripes, 1: vertical)."""
    labels = rng.integers(0, 2, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        freq = rng.uniform(2.0, 5.0) * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi)
        coord = yy if lab == 0 else xx
        img = np.sin(freq * coord + phase) * rng.uniform(0.7, 1.3)
        images[i, 0] = img + rng.normal(0.0, 0.5, size=(size, size))
    return images, labels


def _blobs(rng, n, size):
    """Images with 1, 2 or 3 Gaussian blobs of random scale; label = count - 1."""
    labels = rng.integers(0, 3, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        img = np.zeros((size, size))
        centers = []
        while len(centers) < lab + 1:
            c = rng.uniform(4, size - 4, size=2)
            if all(np.hypot(*(c - d)) > size / 4 for d in centers):
                centers.append(c)
        for cy, cx in centers:
            s = rng.uniform(1.5, 3.5)
            img += 2.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        images[i, 0] = img + rng.normal(0.0, 0.2, size=(size, size))
    return images, labels


def make_dataset(task, n, size=32, seed=0):
    """Synthetic image classification set: (images (n, 1, size, size), labels)."""
    rng = np.random.default_rng(seed)
    if task == "patterns":
        return _patterns(rng, n, size)
    if task == "blobs":
        return _blobs(rng, n, size)
    raise ValueError(f"unknown task {task!r}; choose from {TASKS}")


def toy_spec(shortcut="mds", num_classes=2, width=8, T=1, d_max=4) -> NetworkSpec:
    """Two-stage network for 32x32 single-channel inputs."""
    return NetworkSpec(stages=[StageSpec(width, [1]), StageSpec(2 * width, [1])],
                       in_channels=1, encoding_channels=width, shortcut=shortcut,
                       fusion_directions=0, num_classes=num_classes, T=T, d_max=d_max,
                       name=f"toy-{shortcut}")


def _logits_loss(out, target):
    return ag.cross_entropy(out, target)


def _encode(images, T):
    # (n, C, H, W) -> (T, n, C, H, W)
    return np.broadcast_to(images[None], (T,) + images.shape).copy() if T > 1 else images[None].copy()


def evaluate(net: MDSNet, images, labels, cfg=LFSIConfig(), batch_size=128):
    """Eval-mode accuracy, firing rate and LFSI over a labelled set."""
    net.eval()
    T = net.spec.T
    correct = 0
    spikes_total = 0.0
    cap_total = 0.0
    lfsi_vals = None
    nb = 0
    for start in range(0, len(labels), batch_size):
        xb = _encode(images[start:start + batch_size], T)
        with activity() as rec:
            out = net(ag.Tensor(xb))
        rep = report_from_activity(rec, cfg)
        pred = out["logits"].data.argmax(axis=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
        m = xb.shape[1]
        per_layer = np.array([l["lfsi"] for l in rep.layers])
        lfsi_vals = per_layer * m if lfsi_vals is None else lfsi_vals + per_layer * m
        for r in rec.spiking:
            spikes_total += float(r.spikes.sum(dtype=np.int64))
            cap_total += r.spikes.size * r.d_max
        nb += m
    net.train()
    return correct / nb, spikes_total / cap_total, float((lfsi_vals / nb).mean())


@dataclass
class History:
    rows: list = field(default_factory=list)

    FIELDS = ("epoch", "loss", "acc", "firing_rate", "lfsi")

    def append(self, **row):
        self.rows.append({k: row[k] for k in self.FIELDS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.FIELDS[1:]])
        return buf.getvalue()

    @property
    def final(self):
        return self.rows[-1]


def train_toy(spec: NetworkSpec | None = None, task="patterns", seed=0, epochs=30, lr=0.05,
              momentum=0.9, weight_decay=1e-4, batch_size=32, n_train=512, n_test=256,
              size=32, cfg=LFSIConfig()):
    """Train ``spec`` on a synthetic task with cross-entropy on rate-decoded logits.

    Returns (net, History). Row 0 of the history is the untrained network.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if spec is None:
        spec = toy_spec(num_classes=2 if task == "patterns" else 3)
    net = build_network(spec, seed=seed)
    xtr, ytr = make_dataset(task, n_train, size, seed=10_000 + seed)
    xte, yte = make_dataset(task, n_test, size, seed=20_000 + seed)
    rng = np.random.default_rng(seed)
    opt = OptimState(lr=lr, momentum=momentum, weight_decay=weight_decay)
    params = dict(net.named_parameters())
    hist = History()

    acc, fr, lfsi = evaluate(net, xte, yte, cfg)
    net.eval()
    out = net(ag.Tensor(_encode(xtr[:256], spec.T)))
    loss0 = float(ag.cross_entropy(out["logits"], ytr[:256]).data)
    net.train()
    hist.append(epoch=0, loss=loss0, acc=acc, firing_rate=fr, lfsi=lfsi)

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = forward_backward(net, _encode(xtr[idx], spec.T), _logits_loss, ytr[idx])
            if loss > 1e3 or not math.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch}: loss={loss}")
            sgd_step(params, grads, opt)
            losses.append(loss)
        acc, fr, lfsi = evaluate(net, xte, yte, cfg)
        hist.append(epoch=epoch, loss=float(np.mean(losses)), acc=acc, firing_rate=fr, lfsi=lfsi)
    return net, hist

"""Monte Carlo checks of the initialization and saturation properties of I-LIF networks.

Every check takes a master seed; independent trial chunks get child seeds from
``numpy.random.SeedSequence.spawn`` and may run on a thread pool (capped by
SPIKEDET_THREADS). Chunking does not depend on the thread count, so results
are identical for any degree of parallelism.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from ._backend import kernels, thread_cap
from .blocks import MDSBlock1, MSBlock
from .neuron import ILIFParams

__all__ = [
    "IsometryEstimate", "prop1_cov_check", "prop2_membrane_variance", "variance_accumulation",
    "isometry_phi", "mds_block1_phi", "saturation_curve", "gaussian_tail", "run_suite", "CHECKS",
]


def _pmap(fn, items):
    items = list(items)
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _chunks(total, size):
    out = []
    while total > 0:
        out.append(min(size, total))
        total -= out[-1]
    return out


def gaussian_tail(z) -> float:
    """1 - Phi(z) for the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ------------------------------------------------------------------ input independence

def _lcb_batch(x, rng, k, neuron, positive, alpha=1.0):
    """One LCB on a batch of independent trials, each with its own weights.

    x: (n, C, H, W) membrane input, a single time step. tdBN uses each
    trial's own statistics, as in training mode at initialization.
    """
    n, C, H, W = x.shape
    spikes = np.clip(kernels.round_half_away(x), 0, neuron.d_max)
    fan_in = C * k * k
    bound = math.sqrt(6.0 / fan_in)
    if positive:
        w = np.full((n, C, C, k, k), bound / 2)
    else:
        w = rng.uniform(-bound, bound, size=(n, C, C, k, k))
    pad = k // 2
    sp = np.pad(spikes, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = sliding_window_view(sp, (k, k), axis=(2, 3))  # n, C, H, W, k, k
    y = np.einsum("ncxyij,nocij->noxy", patches, w, optimize=True)
    mu = y.mean(axis=(2, 3), keepdims=True)
    var = y.var(axis=(2, 3), keepdims=True)
    return alpha * neuron.v_th * (y - mu) / np.sqrt(var + 1e-5)


def prop1_cov_check(depth=3, trials=10_000, seed=0, kernel=3, channels=4, size=16,
                    negative_control=False, neuron=ILIFParams(), chunk=500):
    """Correlation between a stack of LCBs' output and its input, per position.

    For each depth 1..``depth`` returns the fraction of (channel, y, x)
    positions whose sample correlation over ``trials`` independent draws of
    (input, weights) satisfies |rho| <= 3 / sqrt(trials). Zero-mean weights
    should pass at every depth; ``negative_control`` uses a positive constant
    weight and should fail.
    """
    if depth < 1 or trials < 1000:
        raise ValueError("need depth >= 1 and at least 1000 trials")
    shape = (channels, size, size)
    seeds = np.random.SeedSequence(seed).spawn(len(_chunks(trials, chunk)))

    def run(arg):
        n, ss = arg
        rng = np.random.default_rng(ss)
        x = rng.standard_normal((n,) + shape)
        sums = np.zeros((depth, 8) + shape)
        h = x
        for d in range(depth):
            h = _lcb_batch(h, rng, kernel, neuron, negative_control)
            xh = x * h
            sums[d] += (x.sum(0), h.sum(0), xh.sum(0), (x * x).sum(0), (h * h).sum(0),
                        (xh * xh).sum(0), (xh * x).sum(0), (xh * h).sum(0))
        return sums

    parts = _pmap(run, zip(_chunks(trials, chunk), seeds))
    N = trials
    ex, ey, exy, exx, eyy, ex2y2, ex2y, exy2 = np.sum(parts, axis=0).transpose(1, 0, 2, 3, 4) / N
    cov = exy - ex * ey
    vx = exx - ex ** 2
    vy = eyy - ey ** 2
    rho = cov / np.sqrt(vx * vy)
    # E[(x - mx)^2 (y - my)^2]; uncorrelated but dependent x and y widen the
    # spread of rho beyond 1 / sqrt(N), which the robust error accounts for
    m22 = (ex2y2 - 2 * ey * ex2y - 2 * ex * exy2 + ey ** 2 * exx + ex ** 2 * eyy
           + 4 * ex * ey * exy - 3 * ex ** 2 * ey ** 2)
    robust_se = np.sqrt(np.maximum(m22 / (vx * vy) - rho ** 2, 0.0) / N)
    bound = 3.0 / math.sqrt(N)
    out = []
    for d in range(depth):
        r = np.abs(rho[d])
        frac = float((r <= bound).mean())
        robust = float((r <= 3.0 * robust_se[d]).mean())
        out.append({"depth": d + 1, "fraction_within": frac, "bound": bound,
                    "max_abs_rho": float(r.max()), "mean_abs_rho": float(r.mean()),
                    "robust_fraction_within": robust, "robust_passed": robust >= 0.99,
                    "mean_robust_se_ratio": float(robust_se[d].mean() * math.sqrt(N)),
                    "passed": frac >= 0.99})
    return out


# ------------------------------------------------------------------ membrane variance

def prop2_membrane_variance(tau=0.25, trials=100_000, seed=0, sigma=1.0, mode="two_step",
                            neuron=ILIFParams(), steps=8):
    """Var[u] / Var[x] for i.i.d. N(0, sigma^2) input currents.

    ``mode="two_step"`` evaluates u_t = x_t + tau * x_{t-1}, whose exact ratio
    is 1 + tau^2. ``mode="ilif"`` runs the integer LIF dynamics for ``steps``
    steps (leak ``tau``) and measures the membrane at the last step.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, sigma, size=(steps, trials))
    if mode == "two_step":
        u = x[-1] + tau * x[-2]
    elif mode == "ilif":
        _, u, _ = kernels.ilif_forward(x, np.zeros(trials), tau, neuron.v_th, neuron.d_max)
        u = u[-1]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    var_u = float(u.var(ddof=1))
    ratio = var_u / (sigma * sigma)
    # standard error of a sample variance for a Gaussian-like variable
    se = ratio * math.sqrt(2.0 / (trials - 1))
    return {"tau": tau, "sigma": sigma, "mode": mode, "var_u": var_u, "ratio": ratio,
            "expected": 1.0 + tau * tau, "stderr": se}


def _chain_variances(kind, k, n_trials, seed, channels, size, alpha, neuron):
    seeds = np.random.SeedSequence(seed).spawn(n_trials)

    def run(ss):
        rng = np.random.default_rng(ss)
        x = ag.Tensor(rng.standard_normal((1, 1, channels, size, size)))
        sq = np.zeros(k)
        s1 = np.zeros(k)
        h = x
        for i in range(k):
            if kind == "ms":
                block = MSBlock(channels, neuron=neuron, rng=rng)
            else:
                block = MDSBlock1(channels, 0, neuron=neuron, alpha=alpha, shortcut="mds", rng=rng)
            h = block(h)
            s1[i] = h.data.sum()
            sq[i] = (h.data ** 2).sum()
        return s1, sq

    res = _pmap(run, seeds)
    n = n_trials * channels * size * size
    s1 = np.sum([r[0] for r in res], axis=0)
    sq = np.sum([r[1] for r in res], axis=0)
    return sq / n - (s1 / n) ** 2


def variance_accumulation(k=8, trials=1000, seed=0, channels=4, size=8, neuron=ILIFParams()):
    """Output variance after each of ``k`` stacked blocks, for an MS-Block chain
    and an MDS-Block1 chain, on unit-variance input with fresh weights per trial.

    tdBN runs in training mode, so each residual path delivers unit variance and
    a membrane shortcut predicts Var after block j of 1 + j.
    """
    ms = _chain_variances("ms", k, trials, seed, channels, size, 1.0, neuron)
    mds = _chain_variances("mds", k, trials, seed + 1, channels, size, 1.0, neuron)
    predicted = [1.0 + j for j in range(1, k + 1)]
    rel = abs(ms[-1] - predicted[-1]) / predicted[-1]
    increasing = bool(np.all(np.diff(ms) > 0))
    ratio = float(mds.max() / mds.min())
    return {"k": k, "trials": trials, "ms": ms.tolist(), "mds": mds.tolist(),
            "additive_prediction": predicted, "ms_final_rel_error": float(rel),
            "ms_strictly_increasing": increasing, "mds_max_min_ratio": ratio,
            "passed": increasing and rel <= 0.15 and ratio < 2.0}


# ------------------------------------------------------------------ block isometry

@dataclass
class IsometryEstimate:
    phi: float          # E[tr(J J^T)] / output dim
    alpha2: float       # output second moment E[|f(x)|^2 / len]
    samples: int
    dims: tuple         # (output dim, input dim)
    phi_stderr: float = 0.0

    def __post_init__(self):
        if self.phi < 0 or self.samples < 1:
            raise ValueError("invalid isometry estimate")


def _jacobian(fn, x):
    """Exact Jacobian of ``fn`` at ``x`` (rows = outputs), one backward pass per row."""
    xt = ag.Tensor(x, requires_grad=True)
    with ag.GradTape() as tape:
        y = fn(xt)
    y = ag.as_tensor(y)
    m = y.data.size
    J = np.empty((m, x.size))
    seed = np.zeros(y.data.shape)
    flat = seed.reshape(-1)
    for i in range(m):
        flat[i] = 1.0
        (g,) = tape.gradients(y, [xt], seed=seed)
        J[i] = g.reshape(-1)
        flat[i] = 0.0
    return J, y.data


def isometry_phi(block, shape, samples=16, seed=0):
    """Estimate phi(J J^T) for ``block``.

    ``block`` is a callable on Tensors, or a factory ``rng -> callable`` (marked
    by a ``factory`` attribute) so each sample gets fresh weights. Inputs are
    standard normal of the given (T, B, C, H, W) shape.
    """
    if int(np.prod(shape)) > 4096:
        raise ValueError("exact Jacobians are limited to small tensors")
    seeds = np.random.SeedSequence(seed).spawn(samples)

    def run(ss):
        rng = np.random.default_rng(ss)
        fn = block(rng) if getattr(block, "factory", False) else block
        x = rng.standard_normal(shape)
        J, y = _jacobian(fn, x)
        return float(np.sum(J * J)) / J.shape[0], float(np.mean(y * y)), J.shape

    res = _pmap(run, seeds)
    phis = np.array([r[0] for r in res])
    se = float(phis.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return IsometryEstimate(float(phis.mean()), float(np.mean([r[1] for r in res])),
                            samples, tuple(res[0][2]), se)


def _factory(make):
    make.factory = True
    return make


def mds_block1_phi(channels=4, size=8, samples=16, seed=0, alpha=1 / math.sqrt(2),
                   neuron=ILIFParams(), bn="batch"):
    """phi(J J^T) of a freshly initialised MDS-Block1 on normalised input.

    ``alpha`` scales the tdBN at the end of both paths; 1/sqrt(2) gives the
    block unit output variance. ``bn="batch"`` differentiates through the
    training-mode statistics, ``bn="running"`` uses the initial running
    statistics (mean 0, variance 1).
    """
    if bn not in ("batch", "running"):
        raise ValueError(f"bn must be 'batch' or 'running', got {bn!r}")

    @_factory
    def make(rng):
        b = MDSBlock1(channels, 0, neuron=neuron, alpha=alpha, shortcut="mds", rng=rng)
        return b.train() if bn == "batch" else b.eval()

    return isometry_phi(make, (1, 1, channels, size, size), samples, seed)


# ------------------------------------------------------------------ saturation

def saturation_curve(sigmas=(1.0, 2.0, 3.0), d_max=4, trials=1_000_000, seed=0, v_th=1.0):
    """Empirical P(spike == d_max) for a single I-LIF step on N(0, sigma^2) input.

    The reference is the Gaussian tail 1 - Phi((d_max - 0.5) / sigma), since
    round-half-away saturates exactly when u >= d_max - 0.5.
    """
    rng = np.random.default_rng(seed)
    out = []
    for sigma in sigmas:
        u = rng.normal(0.0, sigma, size=(1, trials))
        spikes, _, _ = kernels.ilif_forward(u, np.zeros(trials), 0.25, v_th, d_max)
        p = float(np.count_nonzero(spikes == d_max)) / trials
        ref = gaussian_tail((d_max - 0.5) * v_th / sigma)
        tol = 3.0 * math.sqrt(ref * (1 - ref) / trials)
        out.append({"sigma": sigma, "p": p, "expected": ref, "tolerance": tol,
                    "passed": abs(p - ref) <= tol})
    return out


# ------------------------------------------------------------------ suite

def _check_prop1(seed, negative_control=False):
    rows = prop1_cov_check(3, 10_000, seed, negative_control=negative_control)
    return all(r["passed"] for r in rows), rows


def _check_prop2(seed, negative_control=False):
    r = prop2_membrane_variance(0.25, 100_000, seed)
    return abs(r["ratio"] - r["expected"]) <= 3 * r["stderr"], r


def _check_variance(seed, negative_control=False):
    r = variance_accumulation(8, 1000, seed)
    return r["passed"], r


def _check_isometry(seed, negative_control=False):
    est = mds_block1_phi(seed=seed)
    return 0.7 <= est.phi <= 1.3, asdict(est)


def _check_saturation(seed, negative_control=False):
    rows = saturation_curve(seed=seed)
    monotone = all(a["p"] < b["p"] for a, b in zip(rows, rows[1:]))
    return monotone and all(r["passed"] for r in rows), rows


CHECKS = {
    "prop1": _check_prop1,
    "prop2": _check_prop2,
    "variance": _check_variance,
    "isometry": _check_isometry,
    "saturation": _check_saturation,
}


def run_suite(checks=None, seed=0, negative_control=False) -> dict:
    """Run named checks; returns {"passed": bool, "checks": {name: {...}}}."""
    names = list(CHECKS) if not checks else list(checks)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    results = {}
    for name in names:
        ok, est = CHECKS[name](seed, negative_control)
        results[name] = {"passed": bool(ok), "estimates": est}
    return {"seed": seed, "negative_control": negative_control,
            "passed": all(r["passed"] for r in results.values()), "checks": results}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=float)

"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Each check also enforces its time budget.
"""
import math
import sys
import time

import numpy as np
import pytest

from spikedet import autograd as ag
from spikedet.blocks import MDSBlock2, mds_block2
from spikedet.layers import ConvSpec, TdBNParams, conv2d, fold_tdbn_into_conv, tdbn_forward
from spikedet.metrics import (
    LFSIConfig, energy, flops_single, lfsi_layer, sops_single,
)
from spikedet.network import build_network
from spikedet.neuron import MembraneState, SpikeTensor, if_unrolled_count, ilif_step
from spikedet.train import gradient_check, toy_spec, train_toy
from spikedet.verify import (
    isometry_phi, mds_block1_phi, prop1_cov_check, saturation_curve, variance_accumulation,
)

pytestmark = pytest.mark.slow


def report(capsys, n, ok, detail, elapsed, budget):
    ok = ok and elapsed < budget
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s / budget {budget:g}s]"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def c1_neuron_equivalence():
    rng = np.random.default_rng(0)
    u = rng.normal(0, 3, size=10_000)
    u[:200] = rng.integers(-4, 12, 200) / 2  # half-integer ties
    s, _ = ilif_step(MembraneState.zeros(u.shape), u)
    mism = int(np.count_nonzero(if_unrolled_count(u) != s))
    return mism == 0, f"mismatches={mism} of {u.size}"


def c2_tdbn_folding():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        cin, cout = rng.integers(1, 9, size=2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        c = ConvSpec(cin, cout, k, stride, k // 2, weight=rng.normal(size=(cout, cin, k, k)),
                     bias=rng.normal(size=cout))
        p = TdBNParams(rng.uniform(0.2, 3, cout), rng.normal(size=cout), rng.normal(size=cout),
                       rng.uniform(0.01, 4, cout), alpha=rng.uniform(0.3, 1.5), v_th=rng.uniform(0.5, 2))
        x = rng.normal(size=(2, cin, 8, 8))
        worst = max(worst, float(np.max(np.abs(tdbn_forward(conv2d(x, c), p) - conv2d(x, fold_tdbn_into_conv(c, p))))))
    return worst <= 1e-5, f"max sup-norm difference={worst:.3g}"


def c3_mds2_reparam():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        cin = int(rng.integers(2, 7))
        b = MDSBlock2(cin, 2 * cin, n_inner=i % 2, rng=rng)
        sc = b.shortcut
        sc.w_stride.data = np.asarray(rng.uniform(-1, 1))
        sc.w_pool.data = np.asarray(rng.uniform(-1, 1))
        sc.conv.bias.data = rng.normal(size=2 * cin)
        sc.bn.lam.data = rng.uniform(0.5, 2, 2 * cin)
        sc.bn.beta.data = rng.normal(size=2 * cin)
        sc.bn._buffers["running_mean"][...] = rng.normal(size=2 * cin)
        sc.bn._buffers["running_var"][...] = rng.uniform(0.2, 3, 2 * cin)
        b.train(bool(i % 3))
        x = rng.normal(0, 1.5, size=(2, 1, cin, 8, 8))
        worst = max(worst, float(np.max(np.abs(mds_block2(x, b, "train") - mds_block2(x, b, "reparam")))))
    return worst <= 1e-5, f"max |train - split| = {worst:.3g}"


def c4_prop1():
    rows = prop1_cov_check(depth=3, trials=10_000, seed=0)
    bad = prop1_cov_check(depth=3, trials=10_000, seed=0, negative_control=True)
    ok = all(r["passed"] for r in rows) and not any(r["passed"] for r in bad)
    fr = ", ".join(f"d{r['depth']}={r['fraction_within']:.3f}" for r in rows)
    nc = ", ".join(f"d{r['depth']}={r['fraction_within']:.3f}" for r in bad)
    return ok, f"fraction within 3/sqrt(N): {fr}; negative control: {nc}"


def c5_variance_trend():
    r = variance_accumulation(k=8, trials=1000, seed=0)
    ms = ", ".join(f"{v:.2f}" for v in r["ms"])
    return r["passed"], (f"MS {ms} (final rel. error {r['ms_final_rel_error']:.3f}); "
                         f"MDS max/min {r['mds_max_min_ratio']:.3f}")


def c6_saturation():
    rows = saturation_curve(sigmas=(1.0, 2.0, 3.0), d_max=4, trials=1_000_000, seed=0)
    ok = all(r["passed"] for r in rows) and rows[0]["p"] < rows[1]["p"] < rows[2]["p"]
    detail = "; ".join(f"sigma={r['sigma']:g}: {r['p']:.4g} vs {r['expected']:.4g} (+-{r['tolerance']:.2g})"
                       for r in rows)
    return ok, detail


def _brute_lfsi(data, d_max, S):
    sat = data.sum(axis=0) == data.shape[0] * d_max
    r = S // 2
    C, H, W = sat.shape
    vals = []
    for c in range(C):
        for i in range(H):
            for j in range(W):
                win = sat[c, max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1]
                vals.append(int(win.sum()) / win.size)
    return math.fsum(vals) / len(vals)


def c7_lfsi():
    rng = np.random.default_rng(7)
    exact = 0
    for i in range(100):
        T, C, H, W = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 11), rng.integers(1, 11)
        S = int(rng.choice([1, 3, 5]))
        data = np.where(rng.random((T, C, H, W)) < 0.6, 4, rng.integers(0, 5, (T, C, H, W)))
        exact += lfsi_layer(SpikeTensor(data, 4), LFSIConfig(S)) == _brute_lfsi(data, 4, S)
    full = lfsi_layer(SpikeTensor(np.full((2, 3, 6, 6), 4), 4))
    none = lfsi_layer(SpikeTensor(np.zeros((2, 3, 6, 6), dtype=int), 4))
    centre = np.zeros((1, 1, 5, 5), dtype=int)
    centre[0, 0, 2, 2] = 4
    single = lfsi_layer(SpikeTensor(centre, 4), LFSIConfig(3))
    monotone = 0
    cases = 0
    for L in (16, 24, 32):
        for k in range(1, 9):
            o = np.zeros((1, 1, L, L), dtype=int)
            o[0, 0, :k, :k] = 4
            vals = [lfsi_layer(SpikeTensor(o, 4), LFSIConfig(S)) for S in (1, 3, 5, 7, 9)]
            monotone += all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
            cases += 1
    ok = exact == 100 and full == 1.0 and none == 0.0 and abs(single - 0.04) < 1e-15 and monotone == cases
    return ok, (f"oracle exact {exact}/100; all={full}, none={none}, centre={single:.15g}; "
                f"S-monotone on {monotone}/{cases} corner clusters")


def c8_sops_energy():
    sops = sops_single(0.5, 2, 4, 3, 8, 8)
    e_ac = energy(1e9, 0)
    e_mac = energy(0, 2e9)
    flops = flops_single(3, 64, 3, 320, 320)
    ok = sops == 2304 and e_ac == 0.9 and e_mac == 4.6 and flops == 2 * 3 * 64 * 9 * 320 ** 2
    return ok, f"SOPs={sops:g}, E(1e9 SOPs)={e_ac!r} mJ, E(2e9 FLOPs)={e_mac!r} mJ"


def c9_gradients():
    from spikedet.blocks import MDSBlock1, Sequential, SFBlock
    from spikedet.layers import LCB
    from spikedet.network import ClassifierHead
    from spikedet.neuron import ILIFParams

    worst = 0.0
    count = 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        net = Sequential(LCB(2, 4, 3, stride=2, rng=rng), MDSBlock1(4, 1, rng=rng), SFBlock(4, rng=rng),
                         ClassifierHead(4, 3, ILIFParams(), rng))
        net.assign_names()
        x = rng.normal(0, 1.5, size=(2, 2, 2, 8, 8))
        w, n = gradient_check(net, x, per_param=3, seed=seed)
        worst, count = max(worst, w), count + n
    kw = dict(task="patterns", seed=3, epochs=3, n_train=128, n_test=64)
    _, h1 = train_toy(toy_spec(), **kw)
    _, h2 = train_toy(toy_spec(), **kw)
    same = h1.to_csv() == h2.to_csv()
    return worst <= 1e-4 and same, f"worst FD relative error={worst:.2g} over {count} entries; deterministic={same}"


def c10_toy_trend():
    n_params = {}
    rows = []
    for shortcut in ("mds", "ms"):
        n_params[shortcut] = sum(p.data.size for _, p in build_network(toy_spec(shortcut)).named_parameters())
    for seed in range(5):
        res = {}
        for shortcut in ("mds", "ms"):
            _, h = train_toy(toy_spec(shortcut), "patterns", seed, epochs=30)
            res[shortcut] = h.final
        rows.append(res)
    matched = abs(n_params["mds"] - n_params["ms"]) / n_params["ms"] <= 0.01
    wins = sum(r["mds"]["lfsi"] < r["ms"]["lfsi"] and r["mds"]["acc"] >= 0.9 and r["ms"]["acc"] >= 0.9
               for r in rows)
    per_seed = "; ".join(f"s{i}: {r['mds']['lfsi']:.4f}/{r['ms']['lfsi']:.4f} acc {r['mds']['acc']:.2f}/{r['ms']['acc']:.2f}"
                         for i, r in enumerate(rows))
    return matched and wins >= 4, (f"params mds={n_params['mds']} ms={n_params['ms']}; "
                                   f"MDS lower LFSI in {wins}/5 (mds/ms {per_seed})")


def c11_isometry():
    ident = isometry_phi(lambda x: x, (1, 1, 4, 8, 8), samples=2).phi
    double = isometry_phi(lambda x: ag.scale(x, 2.0), (1, 1, 4, 8, 8), samples=2).phi
    est = mds_block1_phi(channels=4, size=8, samples=16, seed=0)
    ok = ident == 1.0 and double == 4.0 and 0.7 <= est.phi <= 1.3
    return ok, (f"identity={ident}, scale2={double}; MDS-Block1 phi={est.phi:.3f} +- {est.phi_stderr:.3f} "
                f"(output second moment {est.alpha2:.3f}, dims {est.dims[0]})")


CRITERIA = [
    (1, c1_neuron_equivalence, 1),
    (2, c2_tdbn_folding, 5),
    (3, c3_mds2_reparam, 10),
    (4, c4_prop1, 60),
    (5, c5_variance_trend, 120),
    (6, c6_saturation, 30),
    (7, c7_lfsi, 10),
    (8, c8_sops_energy, 1),
    (9, c9_gradients, 60),
    (10, c10_toy_trend, 1200),
    (11, c11_isometry, 60),
]


def run(n, fn, budget, capsys=None):
    with Timer() as t:
        ok, detail = fn()
    return report(capsys, n, ok, detail, t.elapsed, budget)


@pytest.mark.parametrize("n,fn,budget", CRITERIA, ids=[f"criterion_{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(n, fn, budget, capsys):
    assert run(n, fn, budget, capsys)


if __name__ == "__main__":
    results = [run(n, fn, budget) for n, fn, budget in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)

"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0] [--json out.json]

Every kernel runs on the same inputs in both backends; the outputs are
compared before timing, so a speedup is only reported for matching results.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from spikedet import _kernels_py as py

try:
    from spikedet import _ckernels as cy
except ImportError:
    cy = None


def cases(scale: float):
    rng = np.random.default_rng(0)
    n = max(1, int(200_000 * scale))
    x = rng.normal(0, 2, size=(4, n))
    h0 = np.zeros(n)
    u = py.ilif_forward(x, h0, 0.25, 1.0, 4)[1]
    g = rng.normal(size=x.shape)
    flat = rng.normal(0, 3, size=4 * n)
    side = max(8, int(128 * scale ** 0.5))
    mask = (rng.random((16, side, side)) < 0.3).astype(np.uint8)
    ne = max(1, int(500_000 * scale))
    ev = [rng.integers(0, 100_001, ne), rng.integers(0, 64, ne), rng.integers(0, 64, ne), rng.integers(0, 2, ne)]
    ev = [np.ascontiguousarray(a, dtype=np.int64) for a in ev]
    hw = max(8, int(32 * scale ** 0.5))
    cols = rng.normal(size=(4, 16, 3, 3, hw, hw))
    return [
        ("ilif_forward", lambda k: k.ilif_forward(x, h0, 0.25, 1.0, 4)),
        ("ilif_backward", lambda k: k.ilif_backward(g, u, 0.25, 1.0, 4)),
        ("lif_forward", lambda k: k.lif_forward(x, h0, 0.25, 1.0)),
        ("lif_backward", lambda k: k.lif_backward(g, u, 0.25, 1.0, 1.0)),
        ("round_half_away", lambda k: k.round_half_away(flat)),
        ("if_unrolled_count", lambda k: k.if_unrolled_count(flat, 1.0, 4)),
        ("box_density S=3", lambda k: k.box_density(mask, 3)),
        ("box_density S=7", lambda k: k.box_density(mask, 7)),
        ("event_bin", lambda k: k.event_bin(*ev, 4, 100_000, 64, 64)),
        ("col2im", lambda k: k.col2im(cols, hw, hw, 1, 1)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies the problem sizes")
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first",
              file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, call in cases(args.scale):
        if not same(call(py), call(cy)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = best_of(lambda: call(py), args.repeat)
        t_cy = best_of(lambda: call(cy), args.repeat)
        rows.append({"kernel": name, "python_s": t_py, "cython_s": t_cy, "speedup": t_py / t_cy})
        print(f"{name:<20}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>9.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"scale": args.scale, "results": rows}, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

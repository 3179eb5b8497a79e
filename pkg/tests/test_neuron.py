import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikedet.neuron import (
    ILIFParams, LIFParams, MembraneState, NumericError, SpikeTensor, if_unrolled_count,
    ilif_run, ilif_step, ilif_surrogate, lif_step, lif_surrogate, rate_decode,
    round_half_away, unroll_to_binary,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def step1(h, x, p=ILIFParams()):
    s, st_ = ilif_step(MembraneState(np.array([h])), np.array([x]), p)
    return int(s[0]), float(st_.h[0])


def test_ilif_step_examples():
    assert step1(2.0, 1.0) == (2, -0.5)
    s, h = step1(0.0, 5.7)
    assert s == 4 and h == pytest.approx(1.7)
    assert step1(0.0, -0.3) == (0, -0.3)


def test_round_half_away():
    assert list(round_half_away(np.array([1.5, -0.5, 2.5, 0.49, -1.5]))) == [2, -1, 3, 0, -2]


def test_ilif_step_errors():
    with pytest.raises(ValueError, match="dimension"):
        ilif_step(MembraneState.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(NumericError):
        ilif_step(MembraneState.zeros(2), np.array([1.0, np.nan]))
    with pytest.raises(NumericError):
        ilif_run(np.array([[np.inf]]))


def test_params_validation():
    with pytest.raises(ValueError):
        ILIFParams(tau=1.0)
    with pytest.raises(ValueError):
        ILIFParams(v_th=0)
    with pytest.raises(ValueError):
        ILIFParams(d_max=0)
    with pytest.raises(ValueError):
        LIFParams(a=0)


def test_ilif_surrogate_examples():
    assert ilif_surrogate(2.0) == 1
    assert ilif_surrogate(-0.1) == 0
    assert ilif_surrogate(4.0) == 1
    assert ilif_surrogate(4.01) == 0


def test_lif_examples():
    def one(h, x):
        s, st_ = lif_step(MembraneState(np.array([h])), np.array([x]))
        return int(s[0]), float(st_.h[0])

    s, h = one(1.0, 0.9)
    assert s == 1 and h == pytest.approx(0.15)
    s, _ = one(0.8, 0.1)
    assert s == 0
    assert one(0.0, 1.0) == (1, 0.0)


def test_lif_surrogate_examples():
    assert lif_surrogate(1.2) == 1.0
    assert lif_surrogate(2.0) == 0
    assert lif_surrogate(1.5) == 1.0
    assert lif_surrogate(1.2, LIFParams(a=2.0)) == 0.5


def test_unroll_examples():
    s = SpikeTensor(np.array([3, 0, 4]).reshape(1, 3, 1, 1), 4)
    b = unroll_to_binary(s)
    assert b.shape == (4, 3, 1, 1)
    assert list(b[:, 0, 0, 0]) == [1, 1, 1, 0]
    assert list(b[:, 1, 0, 0]) == [0, 0, 0, 0]
    assert list(b[:, 2, 0, 0]) == [1, 1, 1, 1]


def test_spike_tensor_range():
    with pytest.raises(ValueError):
        SpikeTensor(np.array([5]), 4)
    with pytest.raises(ValueError):
        SpikeTensor(np.array([-1]), 4)


def test_rate_decode_examples():
    s = SpikeTensor(np.array([2, 0, 4]).reshape(3, 1, 1, 1), 4)
    r = rate_decode(s)
    assert r.shape == (1, 1, 1, 1) and r[0, 0, 0, 0] == 2.0
    assert rate_decode(SpikeTensor(np.zeros((3, 2, 2, 2)), 4)).sum() == 0
    one = np.arange(8).reshape(1, 2, 2, 2) % 5
    assert np.array_equal(rate_decode(SpikeTensor(one, 4)), one.astype(float))


@settings(max_examples=200, deadline=None)
@given(h=arrays(np.float64, 16, elements=finite), x=arrays(np.float64, 16, elements=finite))
def test_soft_reset_identity(h, x):
    p = ILIFParams()
    s, new = ilif_step(MembraneState(h), x, p)
    u = p.tau * h + x
    assert np.array_equal(new.h + p.v_th * s, u)
    assert s.min() >= 0 and s.max() <= p.d_max


@settings(max_examples=100, deadline=None)
@given(h=arrays(np.float64, 8, elements=finite), x=arrays(np.float64, 8, elements=finite))
def test_lif_output_binary(h, x):
    s, _ = lif_step(MembraneState(h), x)
    assert set(np.unique(s)) <= {0, 1}


@settings(max_examples=100, deadline=None)
@given(arrays(np.int32, (3, 2, 2, 2), elements=st.integers(0, 4)))
def test_unroll_sum_equals_counts(data):
    s = SpikeTensor(data, 4)
    assert np.array_equal(unroll_to_binary(s).reshape(3, 4, 2, 2, 2).sum(axis=1), data)


def test_if_equivalence_random():
    rng = np.random.default_rng(1)
    u = rng.normal(0, 3, size=10_000)
    s, _ = ilif_step(MembraneState.zeros(u.shape), u)
    assert np.array_equal(if_unrolled_count(u), s)


def test_if_equivalence_half_integers():
    u = np.arange(-2.0, 6.01, 0.5)
    s, _ = ilif_step(MembraneState.zeros(u.shape), u)
    assert np.array_equal(if_unrolled_count(u), s)


def test_surrogate_matches_straight_through_slope():
    # inside (0, D) and away from half-integers the linear envelope has slope 1
    rng = np.random.default_rng(2)
    base = rng.integers(0, 4, size=200) + rng.uniform(0.1, 0.4, size=200) + 0.5
    eps = 1e-3
    slope = ((base + eps) - (base - eps)) / (2 * eps)
    assert np.allclose(slope, ilif_surrogate(base))


def test_ilif_run_stateful():
    x = np.array([[1.2], [1.2], [1.2]])
    s, u, state = ilif_run(x)
    # t0: u=1.2, o=1, h=0.2; t1: u=0.05+1.2=1.25, o=1, h=0.25; t2: u=1.2625
    assert list(s.data[:, 0]) == [1, 1, 1]
    assert u[:, 0] == pytest.approx([1.2, 1.25, 1.2625])
    assert state.h[0] == pytest.approx(0.2625)

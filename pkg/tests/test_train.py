import numpy as np
import pytest

from spikedet import autograd as ag
from spikedet.blocks import MDSBlock1, Sequential, SFBlock
from spikedet.layers import LCB
from spikedet.network import ClassifierHead, build_network, mdsnet_spec
from spikedet.neuron import ILIFParams
from spikedet.train import (
    History, OptimState, TrainingError, block_gradient_norms, forward_backward, gradient_check,
    make_dataset, sgd_step, toy_spec, train_toy,
)


def smooth_net(rng):
    """Pool-free stack: strided LCB, MDS-Block1 with an inner MS-Block, SF-Block, head."""
    net = Sequential(LCB(2, 4, 3, stride=2, rng=rng), MDSBlock1(4, 1, rng=rng), SFBlock(4, rng=rng),
                     ClassifierHead(4, 3, ILIFParams(), rng))
    net.assign_names()
    return net


def test_sgd_examples():
    p = {"w": ag.Parameter(np.array([1.0]))}
    sgd_step(p, {"w": np.array([1.0])}, OptimState(lr=0.1, momentum=0.0))
    assert p["w"].data[0] == pytest.approx(0.9)

    p = {"w": ag.Parameter(np.array([1.0, -2.0]))}
    sgd_step(p, {"w": np.zeros(2)}, OptimState(lr=0.1, momentum=0.9))
    assert np.array_equal(p["w"].data, [1.0, -2.0])

    p = {"w": ag.Parameter(np.array([0.0]))}
    opt = OptimState(lr=0.1, momentum=0.9)
    sgd_step(p, {"w": np.array([1.0])}, opt)
    sgd_step(p, {"w": np.array([1.0])}, opt)
    assert opt.velocity["w"][0] == pytest.approx(1.9)
    assert p["w"].data[0] == pytest.approx(-0.1 - 0.19)


def test_sgd_weight_decay_and_lr_check():
    p = {"w": ag.Parameter(np.array([2.0]))}
    sgd_step(p, {"w": np.array([0.0])}, OptimState(lr=0.5, momentum=0.0, weight_decay=0.1))
    assert p["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.2)
    with pytest.raises(ValueError):
        OptimState(lr=0.0)


def test_forward_backward_zero_weight_lcb():
    lcb = LCB(2, 3, 1)
    lcb.conv.weight.data[...] = 0
    lcb.bn.beta.data = np.array([0.5, -1.0, 2.0])
    x = np.random.default_rng(0).normal(size=(1, 1, 2, 4, 4))
    target = np.ones((1, 1, 3, 4, 4))
    loss, grads = forward_backward(lcb, x, ag.mse, target)
    const = np.broadcast_to(lcb.bn.beta.data.reshape(1, 1, 3, 1, 1), target.shape)
    assert loss == pytest.approx(float(np.mean((const - target) ** 2)))
    assert set(grads) == {"conv.weight", "conv.bias", "bn.lam", "bn.beta"}
    # d mean((beta - 1)^2) / d beta_c = 2 (beta_c - 1) / C
    assert np.allclose(grads["bn.beta"], 2 * (lcb.bn.beta.data - 1) / 3)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_forward_backward_nonfinite_loss():
    lcb = LCB(1, 1, 1)
    with pytest.raises(FloatingPointError):
        forward_backward(lcb, np.zeros((1, 1, 1, 2, 2)), lambda y, t: ag.scale(ag.mean(y, (0, 1, 2, 3, 4)), np.inf))
    # the message points at the op that first went non-finite
    with pytest.raises(FloatingPointError, match="scale in the loss"):
        forward_backward(lcb, np.zeros((1, 1, 1, 2, 2)), lambda y, t: ag.scale(ag.mean(y, (0, 1, 2, 3, 4)), np.inf))


def test_nonfinite_weight_is_attributed_to_its_layer():
    net = smooth_net(np.random.default_rng(0))
    net.layers[0].conv.weight.data[0, 0, 0, 0] = np.nan
    x = np.random.default_rng(1).normal(size=(1, 2, 2, 8, 8))
    with pytest.raises(FloatingPointError, match=r"layers\.0\.conv"):
        forward_backward(net, x, ag.cross_entropy, np.array([0, 1]))


def test_frozen_spikes_conv_grad_matches_fd():
    # weights sit after the neuron, so the real forward is smooth in them
    rng = np.random.default_rng(1)
    lcb = LCB(3, 4, 3, rng=rng)
    x = rng.normal(0, 2, size=(2, 2, 3, 5, 5))
    r = rng.normal(size=(2, 2, 4, 5, 5))
    _, grads = forward_backward(lcb, x, ag.dot, r)
    w = lcb.conv.weight.data.reshape(-1)
    eps = 1e-3
    for i in rng.choice(w.size, 10, replace=False):
        old = w[i]
        w[i] = old + eps
        lp = np.sum(lcb(ag.Tensor(x)).data * r)
        w[i] = old - eps
        lm = np.sum(lcb(ag.Tensor(x)).data * r)
        w[i] = old
        fd = (lp - lm) / (2 * eps)
        an = grads["conv.weight"].reshape(-1)[i]
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)


@pytest.mark.parametrize("seed", [0, 1])
def test_surrogate_gradients_match_straight_through_fd(seed):
    rng = np.random.default_rng(seed)
    net = smooth_net(rng)
    x = rng.normal(0, 1.5, size=(2, 2, 2, 8, 8))
    worst, count = gradient_check(net, x, per_param=3, seed=seed)
    assert count > 50
    assert worst <= 1e-4


def test_gradient_norm_ratio_at_init():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 64, 64))
    for depth in (10, 34):
        net = build_network(mdsnet_spec(depth, width=0.125, fusion_directions=0))
        norms = block_gradient_norms(net, x)
        assert len(norms) == sum(len(s.inner) for s in net.spec.stages)
        assert 0.1 <= norms[0] / norms[-1] <= 10


def test_make_dataset():
    x, y = make_dataset("patterns", 20, 32, seed=3)
    assert x.shape == (20, 1, 32, 32) and set(np.unique(y)) <= {0, 1}
    x2, y2 = make_dataset("patterns", 20, 32, seed=3)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    _, yb = make_dataset("blobs", 60, 32, seed=3)
    assert set(np.unique(yb)) == {0, 1, 2}
    with pytest.raises(ValueError):
        make_dataset("mnist", 4)


def test_epochs_zero_is_chance():
    accs = [train_toy(toy_spec(), "patterns", seed, epochs=0, n_train=64, n_test=256)[1].final["acc"]
            for seed in range(3)]
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_training_is_deterministic():
    kw = dict(task="patterns", seed=4, epochs=2, n_train=96, n_test=64)
    _, h1 = train_toy(toy_spec(), **kw)
    _, h2 = train_toy(toy_spec(), **kw)
    assert h1.to_csv() == h2.to_csv()
    assert [r["epoch"] for r in h1.rows] == [0, 1, 2]


def test_history_csv():
    h = History()
    h.append(epoch=0, loss=1.5, acc=0.5, firing_rate=0.1, lfsi=0.01)
    lines = h.to_csv().splitlines()
    assert lines[0] == "epoch,loss,acc,firing_rate,lfsi"
    assert lines[1] == "0,1.5,0.5,0.1,0.01"


def test_divergence_raises():
    with pytest.raises(TrainingError):
        train_toy(toy_spec(), "patterns", 0, epochs=1, lr=1e6, n_train=64, n_test=32)


def test_blob_task_learns():
    _, h = train_toy(toy_spec(num_classes=3), "blobs", seed=0, epochs=8, n_train=256, n_test=128)
    assert h.final["acc"] > h.rows[0]["acc"]
    assert h.final["loss"] < h.rows[1]["loss"]

import struct

import numpy as np
import pytest

from spikedet import autograd as ag
from spikedet.network import build_network, mdsnet_spec
from spikedet.serialize import MAGIC, FormatError, dumps, load_model, loads, save_model
from spikedet.train import toy_spec


def small_net(seed=0):
    return build_network(mdsnet_spec(10, width=0.0625, fusion_directions=2), seed=seed)


def test_roundtrip_is_bit_exact(tmp_path):
    net = small_net(3)
    blob = dumps(net)
    assert blob[:4] == MAGIC
    back = loads(blob)
    assert dumps(back) == blob
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    save_model(net, tmp_path / "m.sdl")
    assert (tmp_path / "m.sdl").read_bytes() == blob
    assert dumps(load_model(tmp_path / "m.sdl")) == blob


def test_roundtrip_preserves_outputs():
    net = build_network(toy_spec(), seed=1).eval()
    back = loads(dumps(net)).eval()
    x = ag.Tensor(np.random.default_rng(0).standard_normal((1, 2, 1, 32, 32)))
    assert np.array_equal(net(x)["logits"].data, back(x)["logits"].data)


def test_header_layout():
    blob = dumps(small_net())
    (hlen,) = struct.unpack("<I", blob[4:8])
    assert blob[8:8 + hlen].startswith(b"{")


def test_corrupt_inputs():
    blob = dumps(small_net())
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        loads(blob[:-3])
    with pytest.raises(FormatError, match="trailing"):
        loads(blob + b"\0")
    with pytest.raises(FormatError):
        loads(blob[:4] + struct.pack("<I", 3) + b"{{{" + blob[8:])

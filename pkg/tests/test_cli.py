import json

import numpy as np
import pytest

from spikedet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from spikedet.config import DEFAULTS, config_hash, load_config
from spikedet.blocks import ConfigError


def write_ini(path, text):
    path.write_text(text)
    return str(path)


TOY_TRAIN = """
[network]
preset = toy
width = 0.125
[train]
epochs = {epochs}
n_train = 64
n_test = 32
batch_size = 32
"""


def test_simulate_zero_input(tmp_path):
    ini = write_ini(tmp_path / "c.ini", "[input]\nkind = zeros\nheight = 32\nwidth = 32\n")
    assert main(["simulate", "--config", ini, "--out", str(tmp_path / "o")]) == EXIT_OK
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert "firing_rate" in rep and rep["lfsi"] == 0.0
    assert (tmp_path / "o" / "report.csv").read_text().startswith("layer,shape,")
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config_hash"] == rep["extra"]["config_hash"]


def test_simulate_mdsnet10_has_four_stages(tmp_path):
    ini = write_ini(tmp_path / "c.ini", "[network]\ndepth = 10\n[metrics]\nS = 3,5\n")
    assert main(["simulate", "--config", ini, "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["extra"]["stages"]) == 4
    assert set(rep["extra"]["lfsi_by_S"]) == {"3", "5"}
    assert rep["sops"] > 0 and rep["energy_mj"] > 0


def test_missing_or_bad_config(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    ini = write_ini(tmp_path / "c.ini", "[network]\ncolour = red\n")
    assert main(["simulate", "--config", ini, "--out", str(tmp_path)]) == EXIT_CONFIG
    ini = write_ini(tmp_path / "d.ini", "[metrics]\nS = 4\n")
    assert main(["simulate", "--config", ini, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_train_is_reproducible_and_loadable(tmp_path):
    ini = write_ini(tmp_path / "c.ini", TOY_TRAIN.format(epochs=1))
    for run in ("a", "b"):
        assert main(["train", "--config", ini, "--seed", "2", "--out", str(tmp_path / run)]) == EXIT_OK
    for name in ("history.csv", "model.sdl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sim = write_ini(tmp_path / "s.ini", f"[network]\nmodel = {tmp_path / 'a' / 'model.sdl'}\n"
                    "[input]\nheight = 32\nwidth = 32\n")
    assert main(["simulate", "--config", sim, "--out", str(tmp_path / "sim")]) == EXIT_OK


def test_train_zero_epochs_snapshot(tmp_path):
    ini = write_ini(tmp_path / "c.ini", TOY_TRAIN.format(epochs=0))
    assert main(["train", "--config", ini, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "history.csv").read_text().count("\n") == 2


def test_corrupt_model_file(tmp_path, capsys):
    bad = tmp_path / "bad.sdl"
    bad.write_bytes(b"NOPE" + b"\0" * 16)
    ini = write_ini(tmp_path / "c.ini", f"[network]\nmodel = {bad}\n")
    assert main(["simulate", "--config", ini, "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "magic" in capsys.readouterr().err


def test_verify_subset_and_formats(tmp_path):
    assert main(["verify", "--checks", "prop2,saturation", "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and set(rep["checks"]) == {"prop2", "saturation"}
    assert main(["verify", "--checks", "prop2", "--format", "csv", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "verify.csv").read_text() == "check,passed\nprop2,1\n"


def test_verify_unknown_check(tmp_path):
    assert main(["verify", "--checks", "prop7", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_verify_negative_control_fails(tmp_path):
    rc = main(["verify", "--checks", "prop1", "--negative-control", "--out", str(tmp_path)])
    assert rc == EXIT_VERIFY


def test_encode_events(tmp_path):
    csv = tmp_path / "ev.csv"
    csv.write_text("t,x,y,p\n10,1,1,0\n20,2,3,1\n99999,63,63,1\n")
    ini = write_ini(tmp_path / "c.ini", f"[codec]\npath = {csv}\n")
    assert main(["encode", "--config", ini, "--out", str(tmp_path)]) == EXIT_OK
    t = np.load(tmp_path / "tensor.npy")
    assert t.shape == (4, 2, 64, 64) and t.sum() == 3


def test_encode_direct(tmp_path):
    img = np.random.default_rng(0).normal(size=(3, 5, 5))
    np.save(tmp_path / "img.npy", img)
    ini = write_ini(tmp_path / "c.ini", f"[codec]\nmode = direct\nT = 4\npath = {tmp_path / 'img.npy'}\n")
    assert main(["encode", "--config", ini, "--out", str(tmp_path)]) == EXIT_OK
    t = np.load(tmp_path / "tensor.npy")
    assert t.shape == (4, 3, 5, 5) and all(np.array_equal(t[i], img) for i in range(4))


def test_encode_malformed_line(tmp_path, capsys):
    csv = tmp_path / "ev.csv"
    csv.write_text("1000,5,7,1\n1000,5,7,2\n")
    ini = write_ini(tmp_path / "c.ini", f"[codec]\npath = {csv}\n")
    assert main(["encode", "--config", ini, "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "line 2" in capsys.readouterr().err


def test_config_defaults_and_hash(tmp_path):
    cfg = load_config(None)
    assert cfg == DEFAULTS
    assert config_hash(cfg, 0) == config_hash(load_config(None), 0)
    assert config_hash(cfg, 0) != config_hash(cfg, 1)
    ini = write_ini(tmp_path / "c.ini", "[neuron]\nT = 2\n[codec]\nclip = none\n")
    cfg = load_config(ini)
    assert cfg["neuron"]["T"] == 2 and cfg["codec"]["clip"] is None
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "e.ini", "[extras]\na = 1\n"))
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "f.ini", "[neuron]\nT = two\n"))

"""INI experiment configuration.

Sections and keys (all optional; defaults shown)::

    [network]
    preset = mdsnet        ; mdsnet | toy
    depth = 10             ; 10 | 18 | 34 | 104
    width = 0.125          ; channel multiplier
    in_channels = 3
    shortcut = mds         ; mds | ms
    fusion_directions = 4  ; 0 (no neck) | 1 | 2 | 4 | 6
    num_classes = 0
    model =                ; SDL1 file; overrides the fields above

    [neuron]
    tau = 0.25
    v_th = 1.0
    d_max = 4
    T = 1

    [metrics]
    S = 3                  ; comma list, e.g. 3,5,7; the first is the headline value

    [input]
    kind = random          ; random | zeros | npy | events
    path =
    height = 64
    width = 64
    batch = 1

    [train]
    task = patterns        ; patterns | blobs
    epochs = 30
    lr = 0.05
    momentum = 0.9
    weight_decay = 0.0001
    batch_size = 32
    n_train = 512
    n_test = 256

    [verify]
    checks =               ; comma list; empty runs every check
    negative_control = false

    [codec]
    mode = events          ; events | direct
    path =
    T = 4
    window = 100000        ; microseconds
    height = 64
    width = 64
    clip = 4               ; "none" disables clipping
    normalize = false

    [output]
    format = json          ; json | csv
"""
from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .blocks import ConfigError

__all__ = ["DEFAULTS", "load_config", "config_hash", "ConfigError"]

DEFAULTS = {
    "network": {"preset": "mdsnet", "depth": 10, "width": 0.125, "in_channels": 3,
                "shortcut": "mds", "fusion_directions": 4, "num_classes": 0, "model": ""},
    "neuron": {"tau": 0.25, "v_th": 1.0, "d_max": 4, "T": 1},
    "metrics": {"S": [3]},
    "input": {"kind": "random", "path": "", "height": 64, "width": 64, "batch": 1},
    "train": {"task": "patterns", "epochs": 30, "lr": 0.05, "momentum": 0.9,
              "weight_decay": 1e-4, "batch_size": 32, "n_train": 512, "n_test": 256},
    "verify": {"checks": [], "negative_control": False},
    "codec": {"mode": "events", "path": "", "T": 4, "window": 100_000, "height": 64,
              "width": 64, "clip": 4.0, "normalize": False},
    "output": {"format": "json"},
}

_CHOICES = {
    ("network", "preset"): ("mdsnet", "toy"),
    ("network", "shortcut"): ("mds", "ms"),
    ("input", "kind"): ("random", "zeros", "npy", "events"),
    ("train", "task"): ("patterns", "blobs"),
    ("codec", "mode"): ("events", "direct"),
    ("output", "format"): ("json", "csv"),
}


def _convert(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            v = raw.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, list):
            return [int(s) for s in raw.split(",") if s.strip()] if key == "S" else \
                [s.strip() for s in raw.split(",") if s.strip()]
        if key == "clip" and raw.lower() == "none":
            return None
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def load_config(path=None, overrides=None) -> dict:
    """Read an INI file over the defaults. Unknown sections or keys are errors."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key [{section}] {key}")
                cfg[section][key] = _convert(section, key, raw, DEFAULTS[section][key])
    for (section, key), value in (overrides or {}).items():
        cfg[section][key] = value
    _validate(cfg)
    return cfg


def _validate(cfg):
    for (section, key), allowed in _CHOICES.items():
        if cfg[section][key] not in allowed:
            raise ConfigError(f"[{section}] {key} must be one of {allowed}, got {cfg[section][key]!r}")
    if not cfg["metrics"]["S"] or any(s < 1 or s % 2 == 0 for s in cfg["metrics"]["S"]):
        raise ConfigError("[metrics] S values must be odd and >= 1")
    if cfg["train"]["epochs"] < 0 or cfg["train"]["lr"] <= 0:
        raise ConfigError("[train] needs epochs >= 0 and lr > 0")
    if cfg["neuron"]["T"] < 1 or cfg["codec"]["T"] < 1:
        raise ConfigError("T must be >= 1")
    if cfg["input"]["kind"] in ("npy", "events") and not cfg["input"]["path"]:
        raise ConfigError(f"[input] kind={cfg['input']['kind']} needs a path")
    for section, key in (("input", "path"), ("codec", "path"), ("network", "model")):
        path = cfg[section][key]
        if path and not Path(path).is_file():
            raise ConfigError(f"[{section}] {key}: file not found: {path}")


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

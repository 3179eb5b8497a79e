"""Command-line runner: ``spikedet {simulate,train,verify,encode}``.

Exit codes: 0 ok, 1 runtime error, 2 usage or config error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import codec, metrics, train, verify
from .blocks import ConfigError
from .config import config_hash, load_config
from .layers import activity
from .network import NetworkSpec, build_network, mdsnet_spec
from .serialize import FormatError, load_model, save_model

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _network_spec(cfg, for_training=False) -> NetworkSpec:
    n, nr = cfg["network"], cfg["neuron"]
    neuron = {"tau": nr["tau"], "v_th": nr["v_th"], "d_max": nr["d_max"]}
    num_classes = n["num_classes"]
    in_channels = n["in_channels"]
    if for_training:
        in_channels = 1
        num_classes = num_classes or (2 if cfg["train"]["task"] == "patterns" else 3)
    if n["preset"] == "toy":
        spec = train.toy_spec(n["shortcut"], num_classes, width=max(1, round(64 * n["width"])),
                              T=nr["T"], d_max=nr["d_max"])
        spec.in_channels = in_channels
        spec.tau, spec.v_th = nr["tau"], nr["v_th"]
        return NetworkSpec.from_dict(spec.to_dict())
    spec = mdsnet_spec(n["depth"], n["width"], in_channels, n["fusion_directions"], n["shortcut"],
                       num_classes, **neuron)
    spec.T = nr["T"]
    return NetworkSpec.from_dict(spec.to_dict())


def _encoding_config(section) -> codec.EncodingConfig:
    return codec.EncodingConfig(section["T"], section["window"], section["height"], section["width"],
                                section["clip"], section["normalize"])


def _load_input(cfg, spec, seed):
    inp = cfg["input"]
    T, B, C = spec.T, inp["batch"], spec.in_channels
    H, W = inp["height"], inp["width"]
    if inp["kind"] == "zeros":
        return np.zeros((T, B, C, H, W))
    if inp["kind"] == "random":
        return np.random.default_rng(seed).standard_normal((T, B, C, H, W))
    if inp["kind"] == "npy":
        x = np.load(inp["path"])
        if x.ndim == 3:            # static (C, H, W) image, direct coding
            x = codec.direct_encode(x, T)
        if x.ndim == 4:
            x = x[:, None]
        return x.astype(np.float64)
    with open(inp["path"], "rb") as f:
        events = codec.parse_event_csv(f)
    frames = codec.event_bin(events, _encoding_config(cfg["codec"]))
    return frames[:, None]


def _write(out_dir: Path, name, text):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(out_dir, command, cfg, seed, files):
    body = {"command": command, "config_hash": config_hash(cfg, seed), "seed": seed,
            "outputs": sorted(Path(f).name for f in files)}
    _write(out_dir, "manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def _stage_summary(report, n_stages):
    rows = []
    for i in range(n_stages):
        layers = [l for l in report.layers if l["layer"].startswith(f"stages.{i}.")]
        rows.append({"stage": i + 1, "layers": len(layers),
                     "lfsi": float(np.mean([l["lfsi"] for l in layers])) if layers else 0.0,
                     "input_var": [l["input_var"] for l in layers]})
    return rows


def cmd_simulate(cfg, seed, out_dir: Path):
    if cfg["network"]["model"]:
        net = load_model(cfg["network"]["model"])
        spec = net.spec
    else:
        spec = _network_spec(cfg)
        net = build_network(spec, seed=seed)
    net.eval()
    x = _load_input(cfg, spec, seed)
    S_list = cfg["metrics"]["S"]
    report, _ = metrics.measure(net, x, metrics.LFSIConfig(S_list[0]), input_shape=x.shape[2:])
    with activity() as rec:
        net(ag.Tensor(x))
    report.extra = {
        "config_hash": config_hash(cfg, seed),
        "network": spec.name,
        "lfsi_by_S": {str(S): metrics.report_from_activity(rec, metrics.LFSIConfig(S)).lfsi
                      for S in S_list},
        "stages": _stage_summary(report, len(spec.stages)),
    }
    files = [_write(out_dir, "report.json", report.to_json() + "\n"),
             _write(out_dir, "report.csv", report.to_csv())]
    _manifest(out_dir, "simulate", cfg, seed, files)
    print(f"firing_rate={report.firing_rate:.6g} lfsi={report.lfsi:.6g} sops={report.sops:.6g} "
          f"energy_mj={report.energy_mj:.6g}")
    return EXIT_OK


def cmd_train(cfg, seed, out_dir: Path):
    t = cfg["train"]
    spec = _network_spec(cfg, for_training=True)
    net, hist = train.train_toy(spec, t["task"], seed, t["epochs"], lr=t["lr"], momentum=t["momentum"],
                                weight_decay=t["weight_decay"], batch_size=t["batch_size"],
                                n_train=t["n_train"], n_test=t["n_test"],
                                cfg=metrics.LFSIConfig(cfg["metrics"]["S"][0]))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(net, out_dir / "model.sdl")
    files = [out_dir / "model.sdl", _write(out_dir, "history.csv", hist.to_csv())]
    _manifest(out_dir, "train", cfg, seed, files)
    f = hist.final
    print(f"epoch={f['epoch']} loss={f['loss']:.6g} acc={f['acc']:.4g} lfsi={f['lfsi']:.6g}")
    return EXIT_OK


def cmd_verify(cfg, seed, out_dir: Path, fmt):
    v = cfg["verify"]
    try:
        report = verify.run_suite(v["checks"], seed, v["negative_control"])
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    report["config_hash"] = config_hash(cfg, seed)
    if fmt == "csv":
        lines = ["check,passed"] + [f"{k},{int(r['passed'])}" for k, r in report["checks"].items()]
        files = [_write(out_dir, "verify.csv", "\n".join(lines) + "\n")]
    else:
        files = [_write(out_dir, "verify.json", verify.report_json(report) + "\n")]
    _manifest(out_dir, "verify", cfg, seed, files)
    for name, r in report["checks"].items():
        print(f"{name}: {'pass' if r['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_encode(cfg, seed, out_dir: Path):
    c = cfg["codec"]
    if not c["path"]:
        raise ConfigError("[codec] path is required for encode")
    if c["mode"] == "events":
        with open(c["path"], "rb") as f:
            events = codec.parse_event_csv(f)
        tensor = codec.event_bin(events, _encoding_config(c))
        print(f"events={len(events)} sum={tensor.sum():.6g} shape={tensor.shape}")
    else:
        tensor = codec.direct_encode(np.load(c["path"]), c["T"])
        print(f"shape={tensor.shape}")
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "tensor.npy", tensor)
    _manifest(out_dir, "encode", cfg, seed, [out_dir / "tensor.npy"])
    return EXIT_OK


def build_parser():
    p = _Parser(prog="spikedet", description="Integer-spike detection network toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("simulate", "forward pass and activity report"),
                        ("train", "train a toy network on synthetic data"),
                        ("verify", "Monte Carlo property checks"),
                        ("encode", "encode events or an image into a tensor")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="INI config file")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--format", choices=("json", "csv"), default=None)
        if name == "verify":
            s.add_argument("--checks", help="comma-separated subset of: " + ",".join(verify.CHECKS))
            s.add_argument("--negative-control", action="store_true",
                           help="use positive constant weights in the input-correlation check")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        overrides = {}
        if args.format:
            overrides[("output", "format")] = args.format
        if args.command == "verify":
            if args.checks:
                overrides[("verify", "checks")] = [c.strip() for c in args.checks.split(",") if c.strip()]
            if args.negative_control:
                overrides[("verify", "negative_control")] = True
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.seed, args.out)
        if args.command == "verify":
            return cmd_verify(cfg, args.seed, args.out, cfg["output"]["format"])
        return cmd_encode(cfg, args.seed, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"model file error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (codec.ParseError, codec.RecordError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

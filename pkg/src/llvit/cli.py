"""Command-line entry point: ``llvit {train,eval,stats,perf,export,fetch}``.

Exit codes: 0 success, 2 user or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import PRESETS, RunConfig, load_run_config, preset
from .data import FormatError
from .nn_core import ConfigError, TrainingError, UsageError

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        raise CliError("give --config or --preset")
    return cfg


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _emit(text: str, path=None):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .train import load_splits, run

    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    if args.data_root:
        cfg.data.root = args.data_root
    if args.out:
        cfg.output_dir = args.out
    cfg.validate()
    train, test = load_splits(cfg)
    if train.num_classes != cfg.model.num_classes:
        raise CliError(f"dataset has {train.num_classes} classes, config expects "
                       f"{cfg.model.num_classes}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    hist = run(cfg, out, train, test, resume=args.resume, stop_after=args.stop_after,
               log_every=args.log_every)
    print(json.dumps(hist[-1] if hist else {}, sort_keys=True))
    return EXIT_OK


def _int_model(model, cfg, meta, data_root=None):
    from .int_infer import quantize_model
    from .train import load_splits

    ranges = meta.get("activation_ranges") or None
    if ranges is None:
        if data_root:
            cfg.data.root = data_root
        train, _ = load_splits(cfg)
        n = min(cfg.data.calib_samples, len(train))
        for m in model.lut_mixers:
            m.condsum.quantize(cfg.model.mixer.encoded_bits, cfg.model.mixer.per_channel)
        return quantize_model(model, train.normalize(train.images[:n]))
    return quantize_model(model, ranges=ranges)


def cmd_eval(args) -> int:
    from .data import batches
    from .model import accuracy_report, evaluate
    from .train import clear_quantized, load_model, load_splits

    model, cfg, meta = load_model(args.checkpoint)
    if args.data_root:
        cfg.data.root = args.data_root
    _, test = load_splits(cfg)
    if test.num_classes != cfg.model.num_classes:
        raise CliError(f"dataset has {test.num_classes} classes, checkpoint expects "
                       f"{cfg.model.num_classes}")
    if args.limit:
        test = test.subset(args.limit)
    report = {"checkpoint": str(args.checkpoint), "tool_version": __version__,
              "config": cfg.to_dict(), "float": evaluate(model, test)}
    if args.int8:
        im = _int_model(model, cfg, meta, args.data_root)
        clear_quantized(model)
        ip, fp, labels = [], [], []
        for x, y in batches(test, 256, 0, 0, augment=False, shuffle=False):
            ip.append(im.forward(x).argmax(1))
            fp.append(model.forward(x).argmax(1))
            labels.append(y)
        ip, fp, labels = np.concatenate(ip), np.concatenate(fp), np.concatenate(labels)
        report["int8"] = accuracy_report(ip, labels, cfg.model.num_classes)
        report["int8"]["argmax_agreement"] = float((ip == fp).mean())
    text = json.dumps(report, indent=2, sort_keys=True)
    _emit(text, args.json)
    if args.json:
        line = f"float top-1 {report['float']['accuracy']:.4f}"
        if args.int8:
            line += (f"  int8 top-1 {report['int8']['accuracy']:.4f}"
                     f"  agreement {report['int8']['argmax_agreement']:.4f}")
        print(line)
    return EXIT_OK


def cmd_stats(args) -> int:
    from . import stats

    cfg = _config(args)
    rep = stats.cost_report(cfg.model)
    summary = None
    if args.baseline:
        bpath = Path(args.baseline)
        base = load_run_config(bpath) if bpath.exists() else preset(args.baseline)
        summary = stats.reduction_summary(rep, stats.cost_report(base.model))
    if args.csv:
        _emit(stats.format_csv(rep), args.json)
        return EXIT_OK
    extra = {"config": cfg.to_dict(), "tool_version": __version__,
             "int_mults": stats.int_mults(cfg.model)}
    if args.json:
        _emit(stats.to_json(rep, summary, extra), args.json)
    print(stats.format_text(rep, summary))
    return EXIT_OK


def cmd_perf(args) -> int:
    from dataclasses import replace

    from . import perf

    cfg = _config(args)
    hw = cfg.hw
    if args.P is not None:
        hw = replace(hw, P=args.P)
    if args.clock is not None:
        hw = replace(hw, clock_mhz=args.clock)
    if args.lanes is not None:
        hw = replace(hw, nonlinear_lanes=args.lanes)
    hw.validate()
    if args.sweep:
        rows = perf.sweep(cfg.model, hw)
        _emit(perf.sweep_csv(rows), args.csv)
        return EXIT_OK
    rep = perf.model_latency(cfg.model, hw)
    if args.json:
        _emit(perf.to_json(rep, {"config": cfg.to_dict(), "hw": vars(hw),
                                 "tool_version": __version__}), args.json)
    print(perf.format_text(rep))
    return EXIT_OK


def cmd_export(args) -> int:
    from .export import build_netlist, dumps
    from .train import load_model

    model, cfg, meta = load_model(args.checkpoint, quantized=True)
    if not model.lut_mixers:
        raise CliError("nothing to export: checkpoint has MLP channel mixers")
    im = _int_model(model, cfg, meta, args.data_root)
    net = build_netlist(im, cfg.to_dict(), cfg.model.mixer.encoded_bits,
                        {k: float(v) for k, v in sorted((meta.get("activation_ranges") or {}).items())})
    _emit(dumps(net).rstrip("\n"), args.out)
    print(f"wrote {args.out}: {len(net['encoders'])} encoder mixer(s)")
    return EXIT_OK


def cmd_fetch(args) -> int:
    from .data import data_root, fetch

    manifest = fetch(args.dataset, data_root(args.root))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_config(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="run config JSON")
    g.add_argument("--preset", choices=PRESETS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="llvit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=0,
                    help="BLAS thread count; 1 gives bitwise-reproducible training")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--data-root")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (for resumption)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--int8", action="store_true", help="also run the integer path")
    p.add_argument("--data-root")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--json", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="parameter / MAC / byte accounting")
    _add_config(p)
    p.add_argument("--baseline", help="baseline config JSON or preset name")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--json", help="write JSON (or CSV with --csv) here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("perf", help="latency / throughput model")
    _add_config(p)
    p.add_argument("--P", type=int)
    p.add_argument("--clock", type=float, help="MHz")
    p.add_argument("--lanes", type=int, help="nonlinear-kernel lanes (0 = D)")
    p.add_argument("--sweep", action="store_true", help="CSV over P in {8,16,32,64}")
    p.add_argument("--csv", help="sweep CSV path (stdout if omitted)")
    p.add_argument("--json")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("export", help="write the LUT mixer netlist")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fetch", help="download a dataset with checksum verification")
    p.add_argument("--dataset", default="mnist", choices=("mnist", "cifar10", "cifar100"))
    p.add_argument("--root")
    p.set_defaults(func=cmd_fetch)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except TrainingError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, CliError, CheckpointError, FormatError, FileNotFoundError,
            NotADirectoryError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())

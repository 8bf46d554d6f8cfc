"""Train tiny-mnist with the MLP and the LUT mixer under identical settings.

Writes runs/parity/{mlp,lut}/ checkpoints + metrics and runs/parity/summary.json.
Usage: python scripts/run_parity.py [--epochs N] [--out runs/parity]
"""

import argparse
import json
import time
from pathlib import Path

from llvit.config import preset
from llvit.train import load_splits, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default="runs/parity")
    ap.add_argument("--only", choices=("mlp", "lut"), default=None)
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    summary = {}
    if (out / "summary.json").exists():
        summary = json.loads((out / "summary.json").read_text())
    for kind, name in (("mlp", "tiny-mnist-mlp"), ("lut", "tiny-mnist")):
        if args.only and kind != args.only:
            continue
        cfg = preset(name)
        if args.epochs:
            cfg.optim.epochs = args.epochs
        train, test = load_splits(cfg)
        t0 = time.time()
        hist = run(cfg, out / kind, train, test, resume=args.resume,
                   log=lambda s, k=kind: print(f"[{k}] {s}", flush=True))
        summary[kind] = {"final_test_accuracy": hist[-1]["test_accuracy"],
                         "epochs": len(hist), "seconds": round(time.time() - t0, 1)}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if "mlp" in summary and "lut" in summary:
        gap = summary["mlp"]["final_test_accuracy"] - summary["lut"]["final_test_accuracy"]
        summary["gap_points"] = round(100 * gap, 3)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

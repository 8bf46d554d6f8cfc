"""PTQ width sweep and integer-path fidelity for the parity checkpoints.

Writes runs/parity/int_eval.json.
Usage: python scripts/eval_int.py [--runs runs/parity] [--limit N]
"""

import argparse
import json
import time
from pathlib import Path

from llvit.ablation import encoded_bits_sweep, integer_fidelity
from llvit.train import load_model, load_splits


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", default="runs/parity")
    ap.add_argument("--limit", type=int, default=0)
    args = ap.parse_args()
    runs = Path(args.runs)
    report = {}
    for kind in ("mlp", "lut"):
        ck = runs / kind / "last.ckpt"
        if not ck.exists():
            print(f"skip {kind}: {ck} missing")
            continue
        t0 = time.time()
        model, cfg, meta = load_model(ck)
        train, test = load_splits(cfg)
        if args.limit:
            test = test.subset(args.limit)
        rec = {"checkpoint": str(ck), "epoch": meta["epoch"]}
        if model.lut_mixers:
            rec["ptq"] = encoded_bits_sweep(model, test)
        calib = train.normalize(train.images[:cfg.data.calib_samples])
        rec["integer"] = integer_fidelity(model, test, meta.get("activation_ranges"),
                                          cfg.model.mixer.encoded_bits, calib)
        rec["seconds"] = round(time.time() - t0, 1)
        report[kind] = rec
        print(kind, json.dumps(rec, indent=2))
    (runs / "int_eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

"""Latency/FPS of the baseline and LUT-mixer geometries over systolic sizes.

Writes runs/perf/sweep.csv and runs/perf/summary.json.
Usage: python scripts/perf_sweep.py [--out runs/perf]
"""

import argparse
import csv
import json
from pathlib import Path

from llvit import perf, stats
from llvit.config import preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/perf")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base, ours = preset("ivit-t"), preset("llvit-t")
    rows = []
    for name, cfg in (("ivit-t", base), ("llvit-t", ours)):
        for r in perf.sweep(cfg.model, cfg.hw):
            rows.append({"model": name, **r})
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    b32 = perf.model_latency(base.model, base.hw)
    o32 = perf.model_latency(ours.model, ours.hw)
    summary = {
        "baseline_ms": b32.latency_ms, "llvit_ms": o32.latency_ms,
        "ratio": b32.latency_ms / o32.latency_ms,
        "fps_p16": next(r["fps"] for r in rows if r["model"] == "llvit-t" and r["P"] == 16),
        "reduction": stats.reduction_summary(stats.cost_report(ours.model),
                                             stats.cost_report(base.model)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in rows:
        print(f"{r['model']:<8} P={r['P']:<3} {r['latency_ms']:9.3f} ms {r['fps']:9.1f} FPS")
    print(f"ratio at P=32: {summary['ratio']:.3f}")


if __name__ == "__main__":
    main()

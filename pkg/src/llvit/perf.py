"""Analytical latency and throughput of a layer-pipelined accelerator.

GEMMs run on a P x P output-stationary systolic array; every tile of the
output costs its reduction length plus a fill/drain of 2P cycles. The
nonlinear kernels (layernorm, softmax, GELU) process one element per cycle
on each of ``lanes`` lanes (D lanes by default). A LUT channel mixer is a
row pipeline whose slowest step is the cond-sum adder, which visits the J
final-layer LUT outputs one per cycle.

Each encoder has two pipeline stages: the token mixer (LN1, QKV, attention,
output projection) and the channel mixer (LN2 and the MLP or LUT PE).
Patch embedding and the classifier head are stages of their own. Frames
stream through the stages, so throughput is set by the slowest one.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .config import HwConfig, ModelConfig
from .nn_core import ConfigError


def _ceil(a, b):
    return -(-a // b)


def gemm_cycles(m: int, k: int, p_: int, P: int) -> int:
    """Cycles for an ``[m, k] @ [k, p_]`` product on a P x P array."""
    if min(m, k, p_) < 1:
        raise ConfigError("GEMM dimensions must be positive")
    if P < 1:
        raise ConfigError("P must be >= 1", "hw.P")
    return _ceil(m, P) * _ceil(p_, P) * (k + 2 * P)


def mixer_pe_cycles(widths, n_rows: int) -> int:
    """Row-pipelined LUT mixer: J cycles per row at steady state plus the fill.

    The fill is one cycle for the thermometer compare and one per LUT layer.
    """
    j = int(widths[-1])
    return n_rows * max(1, 1, j) + 1 + len(widths)


def nonlinear_cycles(elements: int, lanes: int) -> int:
    return _ceil(elements, lanes)


@dataclass
class LatencyReport:
    stages: list = field(default_factory=list)  # (name, cycles)
    clock_mhz: float = 200.0

    @property
    def total_cycles(self) -> int:
        return sum(c for _, c in self.stages)

    @property
    def bottleneck_cycles(self) -> int:
        return max(c for _, c in self.stages)

    @property
    def latency_ms(self) -> float:
        return self.total_cycles / (self.clock_mhz * 1e3)

    @property
    def fps(self) -> float:
        return self.clock_mhz * 1e6 / self.bottleneck_cycles

    def encoder_cycles(self) -> int:
        return sum(c for n, c in self.stages if n.startswith("blocks."))

    def to_dict(self) -> dict:
        return {"stages": [{"name": n, "cycles": c} for n, c in self.stages],
                "total_cycles": self.total_cycles, "bottleneck_cycles": self.bottleneck_cycles,
                "latency_ms": self.latency_ms, "fps": self.fps, "clock_mhz": self.clock_mhz}


def token_mixer_cycles(cfg: ModelConfig, hw: HwConfig) -> int:
    n, d, h, P = cfg.tokens, cfg.dim, cfg.heads, hw.P
    lanes = hw.nonlinear_lanes or d
    dh = d // h
    c = nonlinear_cycles(n * d, lanes)  # LN1
    c += 3 * gemm_cycles(n, d, d, P)
    c += h * (gemm_cycles(n, dh, n, P) + gemm_cycles(n, n, dh, P))
    c += nonlinear_cycles(n * n * h, lanes)  # softmax
    c += gemm_cycles(n, d, d, P)
    return c


def channel_mixer_cycles(cfg: ModelConfig, hw: HwConfig) -> int:
    n, d, P = cfg.tokens, cfg.dim, hw.P
    lanes = hw.nonlinear_lanes or d
    c = nonlinear_cycles(n * d, lanes)  # LN2
    mix = cfg.mixer
    if mix.kind == "mlp":
        hid = mix.hidden_ratio * d
        c += gemm_cycles(n, d, hid, P) + nonlinear_cycles(n * hid, lanes) + gemm_cycles(n, hid, d, P)
    else:
        c += mixer_pe_cycles(mix.widths, n)
    return c


def model_latency(cfg: ModelConfig, hw: HwConfig) -> LatencyReport:
    cfg.validate()
    hw.validate()
    n, d = cfg.tokens, cfg.dim
    lanes = hw.nonlinear_lanes or d
    pdim = cfg.patch_size**2 * cfg.channels
    stages = [("embed", gemm_cycles(n - 1, pdim, d, hw.P))]
    tok = token_mixer_cycles(cfg, hw)
    chan = channel_mixer_cycles(cfg, hw)
    for i in range(cfg.depth):
        stages.append((f"blocks.{i}.token_mixer", tok))
        stages.append((f"blocks.{i}.channel_mixer", chan))
    stages.append(("head", nonlinear_cycles(d, lanes) + gemm_cycles(1, d, cfg.num_classes, hw.P)))
    return LatencyReport(stages, hw.clock_mhz)


def sweep(cfg: ModelConfig, hw: HwConfig, sizes=(8, 16, 32, 64)) -> list:
    from dataclasses import replace

    out = []
    for P in sizes:
        r = model_latency(cfg, replace(hw, P=P))
        out.append({"P": P, "latency_ms": r.latency_ms, "fps": r.fps,
                    "total_cycles": r.total_cycles, "bottleneck_cycles": r.bottleneck_cycles})
    return out


def sweep_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["P", "latency_ms", "fps", "total_cycles", "bottleneck_cycles"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def format_text(report: LatencyReport) -> str:
    lines = [f"{'stage':<28} {'cycles':>12}"]
    for name, c in report.stages:
        lines.append(f"{name:<28} {c:>12,}")
    lines.append(f"{'total':<28} {report.total_cycles:>12,}")
    lines.append(f"latency {report.latency_ms:.3f} ms at {report.clock_mhz:g} MHz; "
                 f"bottleneck {report.bottleneck_cycles:,} cycles -> {report.fps:.1f} FPS")
    return "\n".join(lines)


def to_json(report: LatencyReport, extra: dict | None = None) -> str:
    d = report.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)

"""Closed-form parameter, MAC and byte accounting per layer family.

Encoder rows follow the usual per-layer formulas with biases left out;
embedding, head, biases and norms are separate rows that enter the totals.

Two byte totals are kept apart:

* ``memory_bytes``: tensors that live in on-chip/off-chip memory and feed
  multipliers (int8 dense weights, biases, norms, embeddings, head).
* ``logic_bytes``: the LUT channel mixer when mapped to logic (1 bit per
  truth-table entry, int4 encoded values, real32 thresholds).

Two MAC conventions are exposed for the LUT model: ``macs`` counts
multiply-accumulates only; ``macs_plus_condsum`` also counts one operation
per cond-sum addition (every LUT firing, worst case).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .config import ModelConfig
from .nn_core import UsageError

FAMILIES = ("qkv", "qkT", "softmaxV", "concat", "ff1", "ff2", "lut-mixer", "embed", "head", "other")
TABLE_ROWS = ("qkv", "qkT", "softmaxV", "concat", "ff1", "ff2")


@dataclass
class CostRow:
    params: int = 0
    macs: int = 0
    bytes: float = 0.0
    logic_bytes: float = 0.0
    adds: int = 0

    def to_dict(self):
        return {"params": self.params, "macs": self.macs, "bytes": self.bytes,
                "logic_bytes": self.logic_bytes, "adds": self.adds}


@dataclass
class CostReport:
    geometry: dict
    mixer: str
    rows: dict = field(default_factory=dict)

    def total(self, key: str) -> float:
        return sum(getattr(r, key) for r in self.rows.values())

    @property
    def params(self) -> int:
        return int(self.total("params"))

    @property
    def macs(self) -> int:
        return int(self.total("macs"))

    @property
    def macs_plus_condsum(self) -> int:
        return self.macs + int(self.rows["lut-mixer"].adds)

    @property
    def memory_bytes(self) -> float:
        return self.total("bytes")

    @property
    def logic_bytes(self) -> float:
        return self.total("logic_bytes")

    @property
    def all_in_bytes(self) -> float:
        return self.memory_bytes + self.logic_bytes

    def table_macs(self) -> int:
        return sum(self.rows[f].macs for f in TABLE_ROWS)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry,
            "mixer": self.mixer,
            "rows": {k: v.to_dict() for k, v in self.rows.items()},
            "totals": {"params": self.params, "macs": self.macs,
                       "macs_plus_condsum": self.macs_plus_condsum,
                       "table_macs": self.table_macs(),
                       "memory_bytes": self.memory_bytes, "logic_bytes": self.logic_bytes,
                       "all_in_bytes": self.all_in_bytes},
        }


def cost_report(cfg: ModelConfig) -> CostReport:
    cfg.validate()
    L, N, D = cfg.depth, cfg.tokens, cfg.dim
    pdim = cfg.patch_size**2 * cfg.channels
    C = cfg.num_classes
    mix = cfg.mixer
    rows = {f: CostRow() for f in FAMILIES}
    rows["qkv"] = CostRow(params=3 * L * D * D, macs=3 * L * N * D * D)
    rows["qkT"] = CostRow(macs=L * N * D * N)
    rows["softmaxV"] = CostRow(macs=L * N * N * D)
    rows["concat"] = CostRow(params=L * D * D, macs=L * N * D * D)
    other = L * (4 * D + 4 * D) + 2 * D  # attention biases, two norms per block, final norm
    if mix.kind == "mlp":
        h = mix.hidden_ratio * D
        rows["ff1"] = CostRow(params=L * D * h, macs=L * N * D * h)
        rows["ff2"] = CostRow(params=L * h * D, macs=L * N * h * D)
        other += L * (h + D)
    else:
        table = 2**mix.fan_in
        entries = sum(int(w) * table for w in mix.widths)
        j = int(mix.widths[-1])
        logic = entries / 8 + D * j * mix.encoded_bits / 8 + D * mix.bits * 4
        rows["lut-mixer"] = CostRow(params=L * (entries + D * j), logic_bytes=L * logic,
                                    adds=L * N * j * D)
    rows["embed"] = CostRow(params=pdim * D + D + N * D + D, macs=(N - 1) * pdim * D)
    rows["head"] = CostRow(params=D * C + C, macs=D * C)
    rows["other"] = CostRow(params=other)
    for f in ("qkv", "concat", "ff1", "ff2", "embed", "head", "other"):
        rows[f].bytes = float(rows[f].params)  # int8 / 1 byte per dense parameter
    geometry = {"depth": L, "tokens": N, "dim": D, "heads": cfg.heads,
                "image_size": cfg.image_size, "patch_size": cfg.patch_size}
    return CostReport(geometry, mix.kind, rows)


def _pct(ours, base):
    return 100.0 * (1.0 - ours / base) if base else 0.0


def reduction_summary(ours: CostReport, baseline: CostReport) -> dict:
    """Percent reductions of ``ours`` relative to ``baseline`` (same N, D, depth)."""
    if ours.geometry != baseline.geometry:
        raise UsageError(f"geometry mismatch: {ours.geometry} vs {baseline.geometry}")
    dense = ("qkv", "concat", "ff1", "ff2", "embed", "head")
    w_ours = sum(ours.rows[f].params for f in dense)
    w_base = sum(baseline.rows[f].params for f in dense)
    return {
        "weight_reduction_pct": _pct(ours.memory_bytes, baseline.memory_bytes),
        "dense_weight_reduction_pct": _pct(w_ours, w_base),
        "all_in_bytes_reduction_pct": _pct(ours.all_in_bytes, baseline.all_in_bytes),
        "mult_reduction_pct": _pct(ours.macs, baseline.macs),
        "mult_reduction_table_rows_pct": _pct(ours.table_macs(), baseline.table_macs()),
        "ops_reduction_with_condsum_pct": _pct(ours.macs_plus_condsum, baseline.macs),
        "memory_mib": {"ours": ours.memory_bytes / 2**20, "baseline": baseline.memory_bytes / 2**20},
        "all_in_mib": {"ours": ours.all_in_bytes / 2**20, "baseline": baseline.all_in_bytes / 2**20},
        "gmacs": {"ours": ours.macs / 1e9, "ours_with_condsum": ours.macs_plus_condsum / 1e9,
                  "baseline": baseline.macs / 1e9},
    }


def mlp_shares(cfg: ModelConfig, total_classes: int | None = None) -> dict:
    """Share of channel-mixer parameters and MACs in an MLP-mixer model.

    The parameter share is over the whole model (embedding, head and all
    biases included); ``total_classes`` overrides the head width. The MAC
    share is over the six per-layer encoder rows.
    """
    import dataclasses

    c = dataclasses.replace(cfg, num_classes=total_classes or cfg.num_classes)
    r = cost_report(c)
    if r.mixer != "mlp":
        raise UsageError("shares are defined for the MLP mixer")
    mlp_p = r.rows["ff1"].params + r.rows["ff2"].params
    mlp_m = r.rows["ff1"].macs + r.rows["ff2"].macs
    return {"param_share": mlp_p / r.params, "mac_share": mlp_m / r.table_macs()}


def int_mults(cfg: ModelConfig, batch: int = 1) -> dict:
    """Multiplications per integer-path inference, by block group.

    Independent closed form of what the instrumented integer forward counts:
    GEMM multiplies, requantizations, and the fixed per-element multiply
    budget of the softmax and layernorm kernels.
    """
    L, N, D, h = cfg.depth, cfg.tokens, cfg.dim, cfg.heads
    dh = D // h
    pdim = cfg.patch_size**2 * cfg.channels
    mix = cfg.mixer
    ln = 3 * N * D
    attn = (3 * (N * D * D + N * D)  # q, k, v GEMMs + requant
            + h * (N * dh * N + N * N * dh)  # scores, P@V
            + h * 4 * N * N  # softmax kernel
            + h * N * dh  # P@V requant
            + N * D * D  # output projection
            + 2 * N * D)  # residual align + requant
    if mix.kind == "mlp":
        H = mix.hidden_ratio * D
        mixer = N * D * H + N * H + N * H * D + 2 * N * D
    else:
        mixer = N * D  # one requantization multiply per output
    out = {
        "input": cfg.image_size**2 * cfg.channels,
        "embed": (N - 1) * pdim * D + (N - 1) * D,
        "ln": L * 2 * ln + 3 * D,
        "attn": L * attn,
        "mixer": L * mixer,
        "head": D * cfg.num_classes,
    }
    out = {k: v * batch for k, v in out.items()}
    out["total"] = sum(out.values())
    return out


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def format_text(report: CostReport, summary: dict | None = None) -> str:
    lines = [f"{'family':<10} {'params':>14} {'MACs':>16} {'mem bytes':>12} {'logic bytes':>12}"]
    for f in FAMILIES:
        r = report.rows[f]
        lines.append(f"{f:<10} {r.params:>14,} {r.macs:>16,} {r.bytes:>12,.0f} {r.logic_bytes:>12,.0f}")
    lines.append(f"{'total':<10} {report.params:>14,} {report.macs:>16,} "
                 f"{report.memory_bytes:>12,.0f} {report.logic_bytes:>12,.0f}")
    if report.mixer == "lut":
        lines.append(f"MACs + cond-sum adds: {report.macs_plus_condsum:,}")
    if summary:
        lines.append("")
        for k in ("weight_reduction_pct", "dense_weight_reduction_pct", "all_in_bytes_reduction_pct",
                  "mult_reduction_pct", "mult_reduction_table_rows_pct",
                  "ops_reduction_with_condsum_pct"):
            lines.append(f"{k:<34} {summary[k]:7.2f}")
        lines.append(f"memory MiB ours/baseline: {summary['memory_mib']['ours']:.3f} / "
                     f"{summary['memory_mib']['baseline']:.3f}")
        lines.append(f"all-in MiB ours/baseline: {summary['all_in_mib']['ours']:.3f} / "
                     f"{summary['all_in_mib']['baseline']:.3f}")
    return "\n".join(lines)


def format_csv(report: CostReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "params", "macs", "bytes", "logic_bytes", "adds"])
    for f in FAMILIES:
        r = report.rows[f]
        w.writerow([f, r.params, r.macs, r.bytes, r.logic_bytes, r.adds])
    return buf.getvalue()


def to_json(report: CostReport, summary: dict | None = None, extra: dict | None = None) -> str:
    d = {"report": report.to_dict()}
    if summary is not None:
        d["reduction"] = summary
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)

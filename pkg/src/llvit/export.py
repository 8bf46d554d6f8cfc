"""JSON netlist of the LUT channel mixers and a pure-Python evaluator for it.

Truth tables are hex strings with LSB-first addressing: character ``k``
holds entries ``4k .. 4k+3`` and entry ``4k`` sits in that character's
least significant bit. A table of 2^n entries is 2^n / 4 characters long
(one character when n < 2).

The evaluator below uses only Python integers, so it doubles as an
independent re-implementation of the integer mixer.
"""

from __future__ import annotations

import json

import numpy as np

from . import __version__
from .int_infer import RES_SHIFT, IntLutMixer, IntModel, Requant

FORMAT = "llvit-lut-netlist"


def table_to_hex(bits) -> str:
    bits = [int(b) for b in bits]
    while len(bits) % 4:
        bits.append(0)
    chars = []
    for k in range(0, len(bits), 4):
        v = bits[k] | bits[k + 1] << 1 | bits[k + 2] << 2 | bits[k + 3] << 3
        chars.append("0123456789abcdef"[v])
    return "".join(chars)


def hex_to_table(s: str, size: int) -> list:
    out = []
    for ch in s:
        v = int(ch, 16)
        out.extend((v >> i) & 1 for i in range(4))
    return out[:size]


def _rq(r: Requant) -> dict:
    return {"m": int(r.m), "shift": int(r.shift)}


def mixer_netlist(mx: IntLutMixer, index: int) -> dict:
    layers = []
    width = int(mx.thresholds.size)
    for table, mapping in zip(mx.tables, mx.mappings):
        layers.append({
            "inputs": width,
            "neurons": int(mapping.shape[0]),
            "fan_in": int(mapping.shape[1]),
            "mapping": mapping.astype(int).tolist(),
            "tables": [table_to_hex(row) for row in table],
        })
        width = int(mapping.shape[0])
    return {
        "index": index,
        "dim": int(mx.wq.shape[0]),
        "thermometer_bits": int(mx.thresholds.shape[1]),
        "thresholds": mx.thresholds.astype(int).tolist(),
        "layers": layers,
        "condsum": {"values": mx.wq.astype(int).tolist(), "align": _rq(mx.align),
                    "out": _rq(mx.out)},
    }


def build_netlist(int_model: IntModel, run_config: dict, encoded_bits: int, scales: dict) -> dict:
    mixers = [b.mixer for b in int_model.blocks]
    if not mixers or not all(isinstance(m, IntLutMixer) for m in mixers):
        raise ValueError("nothing to export: the model has no LUT channel mixers")
    return {
        "format": FORMAT,
        "tool_version": __version__,
        "config": run_config,
        "residual_shift": RES_SHIFT,
        "encoded_bits": encoded_bits,
        "scales": scales,
        "encoders": [mixer_netlist(m, i) for i, m in enumerate(mixers)],
    }


def dumps(netlist: dict) -> str:
    return json.dumps(netlist, sort_keys=True, separators=(",", ":")) + "\n"


# --------------------------------------------------------------------------
# reference evaluator (pure Python integers)
# --------------------------------------------------------------------------


def _requant(x: int, m: int, shift: int) -> int:
    p = x * m
    if shift <= 0:
        return p << -shift
    mag = (abs(p) + (1 << (shift - 1))) >> shift
    return -mag if p < 0 else mag


class ReferenceMixer:
    """Evaluates one encoder's mixer from its netlist entry, token by token."""

    def __init__(self, entry: dict, residual_shift: int):
        self.dim = entry["dim"]
        self.thresholds = entry["thresholds"]
        self.layers = []
        for layer in entry["layers"]:
            size = 1 << layer["fan_in"]
            tables = [hex_to_table(h, size) for h in layer["tables"]]
            self.layers.append((layer["mapping"], tables))
        cs = entry["condsum"]
        a, o = cs["align"], cs["out"]
        self.values = [[_requant(v, a["m"], a["shift"]) for v in row] for row in cs["values"]]
        self.out_m, self.out_shift = o["m"], o["shift"]
        self.shift = residual_shift

    def token(self, z: list, res: list) -> list:
        bits = []
        for d in range(self.dim):
            for t in self.thresholds[d]:
                bits.append(1 if z[d] > t else 0)
        for mapping, tables in self.layers:
            nxt = []
            for j, wires in enumerate(mapping):
                addr = 0
                for i, w in enumerate(wires):
                    addr |= bits[w] << i
                nxt.append(tables[j][addr])
            bits = nxt
        out = []
        for d in range(self.dim):
            acc = res[d] << self.shift
            row = self.values[d]
            for j, b in enumerate(bits):
                if b:
                    acc += row[j]
            y = _requant(acc, self.out_m, self.out_shift)
            out.append(max(-127, min(127, y)))
        return out

    def __call__(self, z_q, res_q) -> np.ndarray:
        z = np.asarray(z_q).reshape(-1, self.dim).tolist()
        r = np.asarray(res_q).reshape(-1, self.dim).tolist()
        return np.array([self.token(a, b) for a, b in zip(z, r)], dtype=np.int8)


def load_reference(netlist: dict | str) -> list:
    if isinstance(netlist, str):
        netlist = json.loads(netlist)
    if netlist.get("format") != FORMAT:
        raise ValueError("not a LUT netlist")
    return [ReferenceMixer(e, netlist["residual_shift"]) for e in netlist["encoders"]]

"""Operation counters for instrumented inference."""

from __future__ import annotations

import json
from collections import Counter, defaultdict

KINDS = ("mults", "adds", "lookups", "compares", "shifts", "divs")


class Tally:
    def __init__(self, census: "Census", block: str):
        self._census = census
        self._block = block

    def add(self, **counts):
        c = self._census.blocks[self._block]
        for k, v in counts.items():
            if k not in KINDS:
                raise KeyError(k)
            c[k] += int(v)

    def gemm(self, family: str, m: int, k: int, p: int):
        macs = m * k * p
        self._census.gemm_macs[family] += macs
        self.add(mults=macs, adds=macs)


class Census:
    """Per-block operation counts plus GEMM MACs keyed by layer family."""

    def __init__(self):
        self.blocks: dict[str, Counter] = defaultdict(Counter)
        self.gemm_macs: Counter = Counter()

    def at(self, block: str) -> Tally:
        return Tally(self, block)

    def total(self, kind: str, prefix: str = "") -> int:
        return sum(c[kind] for b, c in self.blocks.items() if b.startswith(prefix))

    def matching(self, kind: str, predicate) -> int:
        return sum(c[kind] for b, c in self.blocks.items() if predicate(b))

    def to_dict(self) -> dict:
        return {
            "blocks": {b: dict(sorted(c.items())) for b, c in sorted(self.blocks.items())},
            "gemm_macs": dict(sorted(self.gemm_macs.items())),
            "totals": {k: self.total(k) for k in KINDS},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

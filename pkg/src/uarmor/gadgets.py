"""Gadget harvesting and survival analysis across diversified variants."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .firmware import FlatImage
from .isa import try_decode

DEFAULT_DEPTH = 5
# worst case quoted for the reference implementation, used as context only
REFERENCE_AVG_PCT = 10.15
REFERENCE_MAX_PCT = 21.0


@dataclass(frozen=True, order=True)
class Gadget:
    address: int
    bytes: bytes
    length_instructions: int

    @property
    def key(self) -> tuple[int, bytes]:
        return self.address, self.bytes


def harvest(image: FlatImage, max_depth: int = DEFAULT_DEPTH) -> set[Gadget]:
    code = image.code_bytes
    n = len(code) // 4
    decoded = [try_decode(int.from_bytes(code[4 * i:4 * i + 4], "little")) for i in range(n)]
    out: set[Gadget] = set()
    for i, ins in enumerate(decoded):
        if ins is None or not ins.is_indirect_transfer:
            continue
        for k in range(1, max_depth + 1):
            j = i - k + 1
            if j < 0 or decoded[j] is None:
                break
            out.add(Gadget(image.code_base + 4 * j, bytes(code[4 * j:4 * i + 4]), k))
    return out


@dataclass
class SurvivalReport:
    per_gadget_survival: dict[tuple[int, bytes], int]
    avg_survival: float          # mean number of other variants holding the gadget
    max_survival: int
    n_variants: int
    n_gadgets: int = 0
    name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def avg_fraction(self) -> float:
        return self.avg_survival / (self.n_variants - 1)

    @property
    def max_fraction(self) -> float:
        return self.max_survival / (self.n_variants - 1)


def survival(variants: list[FlatImage], max_depth: int = DEFAULT_DEPTH, name: str = "") -> SurvivalReport:
    if len(variants) < 2:
        raise ValueError("survival needs at least two variants")
    harvested = [{g.key for g in harvest(v, max_depth)} for v in variants]
    holders = Counter(k for keys in harvested for k in keys)
    per = {k: c - 1 for k, c in holders.items()}
    instances = [per[k] for keys in harvested for k in keys]
    avg = sum(instances) / len(instances) if instances else 0.0
    return SurvivalReport(per, avg, max(instances, default=0), len(variants), len(instances), name)


def format_survival_table(reports: list[SurvivalReport], reference: bool = True) -> str:
    rows = [("Set", "Avg. GS", "Max. GS", "Avg. GS (%)", "Max. GS (%)", "Variants", "Gadgets")]
    for r in reports:
        rows.append((r.name or "-", f"{r.avg_survival:.2f}", str(r.max_survival), f"{100 * r.avg_fraction:.2f}",
                     f"{100 * r.max_fraction:.2f}", str(r.n_variants), str(r.n_gadgets)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    if reference:
        lines.append("")
        lines.append(f"context: reference worst case {REFERENCE_AVG_PCT}% average / {REFERENCE_MAX_PCT}% maximum "
                     "survival (different ISA and toolchain; qualitative only)")
    return "\n".join(lines) + "\n"

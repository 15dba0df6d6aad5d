"""Device memory map and its key-value config format."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path


class MapConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Range:
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def overlaps(self, other: Range) -> bool:
        return self.base < other.end and other.base < self.end

    def __str__(self) -> str:
        return f"{self.base:#010x}..{self.end:#010x}"


@dataclass(frozen=True)
class MemoryMap:
    flash: Range = Range(0x00000000, 256 * 1024)
    sram: Range = Range(0x20000000, 64 * 1024)
    scb: Range = Range(0xE000ED00, 64)
    # 64-byte aligned window holding the MPU registers (0xE000ED90..)
    mpu_regs: Range = Range(0xE000ED80, 64)
    peripherals: Range = Range(0x40000000, 0x100000)
    sensitive_ranges: tuple[Range, ...] = ()
    ram_code_range: Range | None = None
    stack_size: int = 512
    max_threads: int = 4
    name: str = "lm3s6965"

    @property
    def stack_area(self) -> Range:
        # stacks sit at the very bottom of SRAM so an overflow leaves RAM
        return Range(self.sram.base, self.stack_size * self.max_threads)

    @property
    def data_base(self) -> int:
        return self.stack_area.end

    @property
    def console_out(self) -> int:
        return self.peripherals.base

    @property
    def console_in(self) -> int:
        return self.peripherals.base + 4

    @property
    def flash_ctrl(self) -> int:
        return self.peripherals.base + 0xFD000

    def with_sensitive(self, ranges) -> MemoryMap:
        return replace(self, sensitive_ranges=tuple(ranges))

    def validate(self) -> None:
        named = [("flash", self.flash), ("sram", self.sram), ("scb", self.scb),
                 ("mpu", self.mpu_regs), ("periph", self.peripherals)]
        for i, (na, ra) in enumerate(named):
            if ra.size <= 0:
                raise MapConfigError(f"{na} has non-positive size")
            for nb, rb in named[i + 1:]:
                if ra.overlaps(rb):
                    raise MapConfigError(f"{na} overlaps {nb}")
        if self.stack_area.end > self.sram.end:
            raise MapConfigError("stack area does not fit in SRAM")
        code = [self.flash] + ([self.ram_code_range] if self.ram_code_range else [])
        if self.ram_code_range and not (
            self.sram.base <= self.ram_code_range.base and self.ram_code_range.end <= self.sram.end
        ):
            raise MapConfigError("ram_code range must lie inside SRAM")
        for r in self.sensitive_ranges:
            if r.size <= 0 or not any(c.base <= r.base and r.end <= c.end for c in code):
                raise MapConfigError(f"sensitive range {r} is not inside a code range")


LM3S6965 = MemoryMap()
# Upper half of SRAM holds the relocated code copy when executing from RAM.
LM3S6965_RAM = replace(LM3S6965, ram_code_range=Range(0x20008000, 0x8000))

_RANGE_KEYS = {"flash": "flash", "sram": "sram", "scb": "scb", "mpu": "mpu_regs",
               "mpu_regs": "mpu_regs", "periph": "peripherals", "peripherals": "peripherals"}


def _num(text: str) -> int:
    text = text.strip().replace("_", "")
    mult = 1
    for suffix, m in (("K", 1024), ("M", 1024 * 1024)):
        if text.upper().endswith(suffix):
            text, mult = text[:-1], m
    return int(text, 0) * mult


def _span(text: str) -> Range:
    if ".." not in text:
        raise MapConfigError(f"expected start..end, got {text!r}")
    lo, hi = (_num(p) for p in text.split("..", 1))
    if hi <= lo:
        raise MapConfigError(f"empty range {text!r}")
    return Range(lo, hi - lo)


def parse_map(text: str, base: MemoryMap = LM3S6965) -> MemoryMap:
    """Parse ``key = value`` lines; unspecified keys keep ``base`` values."""
    fields: dict[str, object] = {}
    parts: dict[str, dict[str, int]] = {}
    sensitive: list[Range] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MapConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "sensitive":
                sensitive.append(_span(value))
            elif key in ("ram_code", "ram_code_range"):
                fields["ram_code_range"] = None if value.lower() == "none" else _span(value)
            elif key in ("stack.size", "stack_size"):
                fields["stack_size"] = _num(value)
            elif key in ("threads.max", "max_threads"):
                fields["max_threads"] = _num(value)
            elif key == "name":
                fields["name"] = value
            elif "." in key and key.split(".")[0] in _RANGE_KEYS and key.split(".")[1] in ("base", "size"):
                region, attr = key.split(".", 1)
                parts.setdefault(_RANGE_KEYS[region], {})[attr] = _num(value)
            else:
                raise MapConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            raise MapConfigError(f"line {lineno}: {exc}") from None
    for fname, attrs in parts.items():
        old: Range = getattr(base, fname)
        fields[fname] = Range(attrs.get("base", old.base), attrs.get("size", old.size))
    if sensitive:
        fields["sensitive_ranges"] = tuple(sensitive)
    mm = replace(base, **fields)
    mm.validate()
    return mm


def load_map(path) -> MemoryMap:
    return parse_map(Path(path).read_text())


def dump_map(mm: MemoryMap) -> str:
    lines = [f"name = {mm.name}"]
    for key, r in (("flash", mm.flash), ("sram", mm.sram), ("scb", mm.scb),
                   ("mpu", mm.mpu_regs), ("periph", mm.peripherals)):
        lines.append(f"{key}.base = {r.base:#010x}")
        lines.append(f"{key}.size = {r.size:#x}")
    lines.append(f"stack.size = {mm.stack_size}")
    lines.append(f"threads.max = {mm.max_threads}")
    if mm.ram_code_range:
        lines.append(f"ram_code = {mm.ram_code_range}")
    for r in mm.sensitive_ranges:
        lines.append(f"sensitive = {r}")
    return "\n".join(lines) + "\n"

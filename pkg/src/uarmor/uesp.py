"""MPU model (8 regions, sub-regions, highest-number-wins), region planner
for execute-from-flash / execute-from-RAM, permission oracle and lockdown."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .memmap import MemoryMap, Range

N_REGIONS = 8
MIN_REGION = 32
SUBREGION_MIN = 256


class RegionBudgetExceeded(ValueError):
    pass


class AlignmentUnsatisfiable(ValueError):
    pass


class NoRegionFault(LookupError):
    pass


class AlreadyLocked(RuntimeError):
    pass


@dataclass(frozen=True)
class Permission:
    read: bool
    write: bool
    execute: bool

    @property
    def label(self) -> str:
        return ("RW" if self.write else "RO") + (" + X" if self.execute else " + XN")

    def __str__(self) -> str:
        return self.label


RO_X = Permission(True, False, True)
RO_XN = Permission(True, False, False)
RW_XN = Permission(True, True, False)


class Scenario(enum.Enum):
    FLASH = "flash"
    RAM = "ram"


@dataclass(frozen=True)
class MpuRegion:
    number: int
    base: int
    size: int
    perm: Permission
    srd: int = 0
    enabled: bool = True
    description: str = ""
    at_lock: bool = False  # switched on (and given its final sub-region mask) by lock_mpu
    lock_srd: int | None = None

    def __post_init__(self):
        if not 0 <= self.number < N_REGIONS:
            raise ValueError("region number out of range")
        if self.size < MIN_REGION or self.size & (self.size - 1):
            raise ValueError(f"region size {self.size} is not a power of two >= 32")
        if self.base % self.size:
            raise ValueError(f"region base {self.base:#x} not aligned to size {self.size:#x}")
        if self.srd and self.size < SUBREGION_MIN:
            raise ValueError("sub-regions need a region of at least 256 bytes")
        if self.perm.write and self.perm.execute:
            raise ValueError("RW + X is never allowed")

    @property
    def end(self) -> int:
        return self.base + self.size

    def covers(self, addr: int) -> bool:
        if not (self.enabled and self.base <= addr < self.end):
            return False
        if self.size >= SUBREGION_MIN and self.srd:
            idx = (addr - self.base) // (self.size // 8)
            return not (self.srd >> idx) & 1
        return True


@dataclass(frozen=True)
class MpuPlan:
    regions: tuple[MpuRegion, ...]
    scenario: Scenario = Scenario.FLASH
    locked: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def region(self, number: int) -> MpuRegion:
        for r in self.regions:
            if r.number == number:
                return r
        raise KeyError(number)

    def permission(self, addr: int) -> Permission:
        # every boundary is a multiple of 32, so one lookup per 32-byte granule
        key = addr >> 5
        hit = self._cache.get(key)
        if hit is None:
            hit = effective_permission(self, addr)
            self._cache[key] = hit
        return hit

    def boundaries(self) -> list[int]:
        pts = set()
        for r in self.regions:
            step = r.size // 8 if r.size >= SUBREGION_MIN else r.size
            for k in range(0, r.size + 1, step):
                pts.add((r.base + k) & 0xFFFFFFFF)
        return sorted(pts)


def effective_permission(plan: MpuPlan, addr: int) -> Permission:
    for r in sorted(plan.regions, key=lambda r: -r.number):
        if r.covers(addr):
            return r.perm
    raise NoRegionFault(f"no MPU region covers {addr:#010x}")


def _pow2_at_least(n: int) -> int:
    s = MIN_REGION
    while s < n:
        s <<= 1
    return s


def cover(spans: list[tuple[int, int]], forbid_extra: bool = True) -> tuple[int, int, int] | None:
    """Smallest aligned power-of-two region (base, size, srd) whose enabled
    sub-regions cover exactly the union of ``spans`` (or a superset if
    ``forbid_extra`` is False). None when impossible."""
    spans = _merge(spans)
    lo = min(a for a, _ in spans)
    hi = max(b for _, b in spans)
    size = _pow2_at_least(hi - lo)
    while size <= 1 << 32:
        base = lo - lo % size
        if base + size >= hi:
            if size < SUBREGION_MIN:
                if not forbid_extra or _exact(spans, base, base + size):
                    return base, size, 0
            else:
                sub = size // 8
                srd = 0
                ok = True
                for i in range(8):
                    a, b = base + i * sub, base + (i + 1) * sub
                    inside = _covered_bytes(spans, a, b)
                    if inside == 0:
                        srd |= 1 << i
                    elif inside != sub and forbid_extra:
                        ok = False
                        break
                if ok:
                    return base, size, srd
            if forbid_extra and size >= SUBREGION_MIN:
                # a larger region only coarsens sub-regions
                return None
        size <<= 1
    return None


def _covered_bytes(spans, a: int, b: int) -> int:
    return sum(max(0, min(b, y) - max(a, x)) for x, y in spans)


def _exact(spans, a: int, b: int) -> bool:
    return _covered_bytes(_merge(spans), a, b) == b - a


def _merge(spans, touching: bool = True) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for a, b in sorted(spans):
        if out and (a <= out[-1][1] if touching else a < out[-1][1]):
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _group_overlays(spans: list[tuple[int, int]]) -> list[tuple[int, int, int]]:
    """Greedily merge sorted sensitive spans into as few coverable regions as possible."""
    regions = []
    group: list[tuple[int, int]] = []
    # adjacent spans stay separate so each can still fall back to its own region
    for span in _merge(spans, touching=False):
        trial = group + [span]
        if group and cover(trial) is not None:
            group = trial
            continue
        if group:
            regions.append(cover(group))
        if cover([span]) is None:
            raise AlignmentUnsatisfiable(
                f"sensitive range {span[0]:#x}..{span[1]:#x} cannot be covered by an aligned region")
        group = [span]
    if group:
        regions.append(cover(group))
    return regions


def _code_region(span: Range, mm: MemoryMap, what: str) -> tuple[int, int, int]:
    # Rounding flash up past its end is harmless; in SRAM, extra coverage
    # would turn data read-only and executable, so it must be trimmable.
    in_sram = mm.sram.contains(span.base)
    c = cover([(span.base, span.end)], forbid_extra=in_sram)
    if c is None:
        raise AlignmentUnsatisfiable(f"{what} {span} cannot be covered by an aligned region")
    return c


def plan_mpu(mm: MemoryMap, scenario: Scenario | str = Scenario.FLASH,
             merge_scb_mpu: bool = False) -> MpuPlan:
    scenario = Scenario(scenario)
    if scenario is Scenario.RAM and mm.ram_code_range is None:
        raise AlignmentUnsatisfiable("execute-from-RAM needs a ram_code range in the map")
    spans = [(r.base, r.end) for r in mm.sensitive_ranges]
    flash_sens = [s for s in spans if mm.flash.contains(s[0])]
    ram_sens = [s for s in spans if not mm.flash.contains(s[0])]
    if scenario is Scenario.FLASH and ram_sens:
        raise AlignmentUnsatisfiable("sensitive RAM ranges need the execute-from-RAM scenario")
    flash_ov = _group_overlays(flash_sens) if flash_sens else []
    ram_ov = _group_overlays(ram_sens) if ram_sens else []

    # (description, base, size, srd, perm, at_lock, lock_srd), listed bottom-up
    fixed_sys = []
    if merge_scb_mpu:
        c = cover([(mm.scb.base, mm.scb.end), (mm.mpu_regs.base, mm.mpu_regs.end)])
        if c is None or c[1] < SUBREGION_MIN:
            raise AlignmentUnsatisfiable("SCB and MPU windows cannot share one region")
        base, size, srd = c
        sub = size // 8
        mpu_bits = sum(1 << i for i in range(8) if _covered_bytes(
            [(mm.mpu_regs.base, mm.mpu_regs.end)], base + i * sub, base + (i + 1) * sub))
        fixed_sys.append(("SCB + MPU", base, size, srd | mpu_bits, RO_XN, False, srd))
    else:
        fixed_sys.append(("SCB", mm.scb.base, mm.scb.size, 0, RO_XN, False, None))
        fixed_sys.append(("MPU", mm.mpu_regs.base, mm.mpu_regs.size, 0, RO_XN, True, None))
        for _, b, s, *_ in fixed_sys:
            if s & (s - 1) or b % s:
                raise AlignmentUnsatisfiable("system control windows must be aligned powers of two")

    stack = list(fixed_sys)
    if scenario is Scenario.RAM:
        b, s, d = _code_region(mm.ram_code_range, mm, "RAM code range")
        stack.append(("Code (other, RAM)", b, s, d, RO_X, False, None))
        stack += [("Code (sensitive, RAM)", b2, s2, d2, RO_XN, True, None) for b2, s2, d2 in ram_ov]
    b, s, d = _code_region(mm.flash, mm, "flash")
    stack.append(("Code (other, flash)" if scenario is Scenario.RAM else "Code (other)", b, s, d, RO_X, False, None))
    label = "Code (sensitive, flash)" if scenario is Scenario.RAM else "Code (sensitive)"
    stack += [(label, b2, s2, d2, RO_XN, True, None) for b2, s2, d2 in flash_ov]

    # Pin the canonical numbering when at most one overlay per code area is needed.
    needed = 1 + len(stack)
    if needed > N_REGIONS:
        raise RegionBudgetExceeded(f"{needed} regions needed, the MPU has {N_REGIONS}")
    if scenario is Scenario.FLASH and len(flash_ov) <= 1 and not merge_scb_mpu:
        numbers = [4, 5, 6, 7][:len(stack)]
    elif scenario is Scenario.RAM and len(flash_ov) <= 1 and len(ram_ov) == 1 and not merge_scb_mpu:
        numbers = [2, 3, 4, 5, 6, 7][:len(stack)]
    else:
        numbers = list(range(N_REGIONS - len(stack), N_REGIONS))
    regions = [MpuRegion(0, 0, 1 << 32, RW_XN, description="Default")]
    for n, (desc, b, s, d, perm, at_lock, lock_srd) in zip(numbers, stack):
        regions.append(MpuRegion(n, b, s, perm, d, enabled=not at_lock, description=desc,
                                 at_lock=at_lock, lock_srd=lock_srd))
    return MpuPlan(tuple(regions), scenario)


def lock_mpu(plan: MpuPlan) -> MpuPlan:
    if plan.locked:
        raise AlreadyLocked("MPU configuration is already locked")
    regions = []
    for r in plan.regions:
        if r.at_lock:
            r = replace(r, enabled=True)
        if r.lock_srd is not None:
            r = replace(r, srd=r.lock_srd)
        regions.append(r)
    return MpuPlan(tuple(regions), plan.scenario, True)


def format_size(n: int) -> str:
    for unit, mult in (("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= mult and n % mult == 0:
            return f"{n // mult} {unit}"
    return f"{n} B"


def plan_rows(plan: MpuPlan) -> list[tuple[int, str, str, str]]:
    return [(r.number, r.description, r.perm.label, format_size(r.size))
            for r in sorted(plan.regions, key=lambda r: r.number)]


def format_plan(plan: MpuPlan) -> str:
    head = ("Region No.", "Description", "Perms.", "Size")
    rows = [tuple(str(c) for c in row) for row in plan_rows(plan)]
    widths = [max(len(head[i]), *(len(r[i]) for r in rows)) for i in range(4)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*r) for r in rows]
    title = "execute-from-flash" if plan.scenario is Scenario.FLASH else "execute-from-RAM"
    state = "locked" if plan.locked else "pre-lock"
    return f"MPU plan ({title}, {state})\n" + "\n".join(lines) + "\n"


def format_plan_detail(plan: MpuPlan) -> str:
    lines = []
    for r in sorted(plan.regions, key=lambda r: r.number):
        lines.append(f"{r.number}: base={r.base:#010x} size={format_size(r.size)} perm={r.perm.label} "
                     f"srd={r.srd:#04x} enabled={r.enabled} at_lock={r.at_lock} {r.description}")
    return "\n".join(lines) + "\n"

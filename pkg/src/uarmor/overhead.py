"""Overhead measurement: protected image versus its unprotected baseline."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .firmware import F_SSP, FlatImage, decode, longest_call_chain
from .memmap import LM3S6965, MemoryMap
from .scenario import DEFAULT_BUDGET, Scenario, run_scenario
from .sim import SimConfig, boot
from .urng import SramDevice

CANARY_BYTES = 4


class WorkloadDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class RunMeasure:
    cycles: int
    peak_stack: int
    observable: tuple


@dataclass(frozen=True)
class OverheadReport:
    code_base: int
    code_prot: int
    data_base: int               # initialised globals
    data_prot: int
    state_bytes: int             # added zero-initialised state (guard word, generator state)
    stack_estimate: int          # static worst case added by canaries
    peak_stack_base: int
    peak_stack_prot: int
    cycles_base: float
    cycles_prot: float
    flash_size: int
    sram_size: int
    runs: int

    @staticmethod
    def _pct(new, old) -> float:
        if old == 0:
            return 0.0 if new == 0 else float("inf")
        return 100.0 * (new - old) / old

    @property
    def code_bytes(self) -> int:
        return self.code_prot - self.code_base

    @property
    def data_bytes(self) -> int:
        return self.data_prot - self.data_base

    @property
    def memory_bytes(self) -> int:
        """Worst-case extra SRAM: added state plus the larger of the static and measured stack growth."""
        measured = max(0, self.peak_stack_prot - self.peak_stack_base)
        return self.state_bytes + max(self.stack_estimate, measured)

    @property
    def code_pct_app(self) -> float:
        return self._pct(self.code_prot, self.code_base)

    @property
    def data_pct_app(self) -> float:
        return self._pct(self.data_prot, self.data_base)

    @property
    def runtime_pct_app(self) -> float:
        return self._pct(self.cycles_prot, self.cycles_base)

    @property
    def code_pct_res(self) -> float:
        return 100.0 * self.code_bytes / self.flash_size

    @property
    def data_pct_res(self) -> float:
        return 100.0 * self.data_bytes / self.sram_size

    @property
    def memory_pct_res(self) -> float:
        return 100.0 * self.memory_bytes / self.sram_size

    def as_dict(self) -> dict:
        return {
            "code_bytes": self.code_bytes, "data_bytes": self.data_bytes, "memory_bytes": self.memory_bytes,
            "code_pct_app": self.code_pct_app, "data_pct_app": self.data_pct_app,
            "runtime_pct_app": self.runtime_pct_app, "code_pct_res": self.code_pct_res,
            "data_pct_res": self.data_pct_res, "memory_pct_res": self.memory_pct_res,
            "cycles_base": self.cycles_base, "cycles_prot": self.cycles_prot, "runs": self.runs,
        }


def canary_stack_estimate(image: FlatImage, memory_map: MemoryMap = LM3S6965) -> int:
    """Longest call chain times one canary word, if the image carries canaries at all."""
    if not any(s.flags & F_SSP for s in image.functions()):
        return 0
    return longest_call_chain(decode(image, memory_map)).length * CANARY_BYTES


def data_split(image: FlatImage) -> tuple[int, int]:
    """(initialised, zero-initialised) global bytes."""
    init = zero = 0
    for g in image.globals():
        off = g.addr - image.data_base
        if any(image.data_bytes[off:off + g.size]):
            init += g.size
        else:
            zero += g.size
    return init, zero


def workload_cycles(machine) -> int:
    """Cycles spent after the first thread started, so boot work is not counted."""
    start = next((e.cycle for e in machine.log if e.kind == "ThreadStart"), 0)
    return machine.cycle - start


def measure_run(image: FlatImage, workload: Scenario, mm: MemoryMap, device: SramDevice, boot_seed: int,
                config: SimConfig) -> RunMeasure:
    sc = replace(workload, image=image)
    machine = boot(image, mm, device, boot_seed, config, workload.console_input)
    if sc.script:
        run_scenario(sc, machine)
    else:
        machine.run(DEFAULT_BUDGET)
    if not machine.halted:
        raise WorkloadDivergence(f"workload {workload.name!r} did not halt")
    peak = max((t.peak_stack_bytes for t in machine.threads if t is not None), default=0)
    return RunMeasure(workload_cycles(machine), peak, machine.observable())


def measure_overhead(baseline: FlatImage, protected: FlatImage, workload: Scenario, runs: int = 25,
                     mm: MemoryMap = LM3S6965, config: SimConfig | None = None,
                     check_output: bool = True, device_seed: int = 0) -> OverheadReport:
    config = config or SimConfig()
    device = SramDevice.generate(mm.sram.size, device_seed)
    base_c, prot_c, base_peak, prot_peak = [], [], 0, 0
    for seed in range(runs):
        b = measure_run(baseline, workload, mm, device, seed, config)
        p = measure_run(protected, workload, mm, device, seed, config)
        if check_output and b.observable != p.observable:
            raise WorkloadDivergence(f"observable output differs on run {seed}")
        base_c.append(b.cycles)
        prot_c.append(p.cycles)
        base_peak = max(base_peak, b.peak_stack)
        prot_peak = max(prot_peak, p.peak_stack)
    (bi, bz), (pi, pz) = data_split(baseline), data_split(protected)
    return OverheadReport(
        len(baseline.code_bytes), len(protected.code_bytes), bi, pi, pz - bz,
        canary_stack_estimate(protected, mm), base_peak, prot_peak,
        sum(base_c) / runs, sum(prot_c) / runs, mm.flash.size, mm.sram.size, runs)

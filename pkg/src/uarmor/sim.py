"""Deterministic uVM machine: MPU-checked memory, threads, SVCs, cold boot."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from .firmware import SYM_FUNC, FlatImage
from .isa import ALU_OPS, BR_NOT_TAKEN_CYCLES, BR_TAKEN_CYCLES, LR, PC, SP, InvalidInstruction, \
    decode_instruction
from .memmap import MemoryMap, Range
from .uesp import MpuPlan, NoRegionFault, Scenario, lock_mpu, plan_mpu
from .urng import EntropyModel, EntropySource, RngConfig, rand32, rng_init, sram_startup_sample, SramDevice
from .ussp import GUARD_SYMBOL, SVC_VIOLATION, CanaryConfig, MasterCanary, PolicyKind, ViolationPolicy, \
    generate_master_canary, handle_violation

M32 = 0xFFFFFFFF
THREAD_RETURN = 0xFFFFFFFE
BOOT_RETURN = 0xFFFFFFFC
SVC_EXIT, SVC_YIELD, SVC_RAND, SVC_SPAWN, SVC_REG_RESTART, SVC_DEREG_RESTART = 0, 1, 2, 3, 4, 5
SVC_TID, SVC_WAIT = 7, 8
MPU_CTRL, CTRL_ENABLE, CTRL_LOCK = 0x04, 1, 4
RNG_STATE_SYMBOL = "__urng_state"
MPU_INIT_SYMBOL, MPU_LOCK_SYMBOL = "__mpu_init", "__mpu_lock"
BOOT_STEPS = ("suv", "rng_init", "canary", "mpu_plan", "sensitive_init", "lock", "threads")

_ALU_INDEX = {name: i for i, name in enumerate(ALU_OPS)}
_SIGNED_CONDS = {"LT", "GE"}
(K_ALU, K_ALUI, K_MOV, K_MOVI, K_MOVT, K_LOAD, K_LOADB, K_STORE, K_STOREB, K_BR, K_CALL, K_CALLR,
 K_RET, K_PUSHM, K_POPM, K_SVC, K_NOP, K_HALT, K_TRAP, K_MPUWR, K_FLASHWR) = range(21)
_KIND = {"MOV": K_MOV, "MOVI": K_MOVI, "MOVT": K_MOVT, "LOAD": K_LOAD, "LOADB": K_LOADB, "STORE": K_STORE,
         "STOREB": K_STOREB, "BR": K_BR, "CALL": K_CALL, "CALLR": K_CALLR, "RET": K_RET, "PUSHM": K_PUSHM,
         "POPM": K_POPM, "SVC": K_SVC, "NOP": K_NOP, "HALT": K_HALT, "TRAP": K_TRAP, "MPUWR": K_MPUWR,
         "FLASHWR": K_FLASHWR}


class BootError(RuntimeError):
    pass


class _Fault(Exception):
    def __init__(self, kind: str, addr: int, reason: str):
        super().__init__(kind, addr, reason)
        self.kind, self.addr, self.reason = kind, addr, reason


@dataclass
class SimConfig:
    scenario: Scenario = Scenario.FLASH
    policy: PolicyKind = PolicyKind.FATAL
    canary: CanaryConfig = field(default_factory=CanaryConfig)
    rng: RngConfig = field(default_factory=RngConfig)
    entropy: EntropyModel = field(default_factory=EntropyModel)
    esp: bool | None = None            # None: on iff the image carries the MPU init/lock stubs
    quantum: int = 64
    fault_policy: str = "thread"       # "thread" kills the faulting thread, "halt" stops the machine
    suv_window: int = 2048             # SRAM bytes sampled for the seed
    trace_accesses: bool = False
    trace_pcs: bool = False
    boot_cycle_limit: int = 200_000


@dataclass
class Event:
    kind: str
    cycle: int
    boot_id: int
    thread: int | None
    pc: int | None
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        pc = "-" if self.pc is None else f"{self.pc:#010x}"
        th = "-" if self.thread is None else str(self.thread)
        extra = " ".join(f"{k}={v:#x}" if isinstance(v, int) and k in ("addr", "src", "handler") else f"{k}={v}"
                         for k, v in self.detail.items())
        return f"boot={self.boot_id} cycle={self.cycle} thread={th} {self.kind} pc={pc} {extra}".rstrip()


@dataclass
class Thread:
    id: int
    stack: Range
    regs: list[int]
    state: str = "ready"
    entry: int = 0
    min_sp: int = 0
    last_transfer: tuple | None = None  # (src, kind, target) of the latest control transfer
    start_cycle: int = 0

    @property
    def pc(self) -> int:
        return self.regs[PC]

    @pc.setter
    def pc(self, value: int) -> None:
        self.regs[PC] = value & M32

    @property
    def alive(self) -> bool:
        return self.state != "dead"

    @property
    def stack_range(self) -> tuple[int, int]:
        return self.stack.base, self.stack.end

    @property
    def peak_stack_bytes(self) -> int:
        return self.stack.end - self.min_sp


class StubRng:
    """Deterministic non-cryptographic generator used when the image has no uRNG."""

    def __init__(self, seed: int = 0):
        self.x = seed & M32 or 1

    def rand32(self) -> int:
        self.x = (1664525 * self.x + 1013904223) & M32
        return self.x


def _sext32(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def _alu(idx: int, a: int, b: int) -> int:
    if idx == 0:
        return (a + b) & M32
    if idx == 1:
        return (a - b) & M32
    if idx == 2:
        return (a * b) & M32
    if idx == 3:
        return a // b if b else 0
    if idx == 4:
        return a % b if b else 0
    if idx == 5:
        return a & b
    if idx == 6:
        return a | b
    if idx == 7:
        return a ^ b
    sh = b & 0xFF
    if idx == 8:
        return (a << sh) & M32 if sh < 32 else 0
    if idx == 9:
        return a >> sh if sh < 32 else 0
    return (_sext32(a) >> min(sh, 31)) & M32


class SimMachine:
    def __init__(self, image: FlatImage, mm: MemoryMap, device: SramDevice, boot_seed: int = 0,
                 config: SimConfig | None = None, console_input: bytes = b""):
        self.image = image
        self.mm = mm
        self.device = device
        self.boot_seed = boot_seed
        self.config = config or SimConfig()
        self.input = bytearray(console_input)
        self.output = bytearray()
        self.log: list[Event] = []
        self.cycle = 0
        self.boot_id = 0
        self.halted = False
        self.halt_code: int | None = None
        self.access_trace: list[tuple[int, str, int, bool]] | None = [] if self.config.trace_accesses else None
        self.pc_digest = 0
        self.breakpoints: dict[int, object] = {}
        self.boot_steps: list[str] = []
        self.canary_history: list[int] = []
        self.policy = ViolationPolicy(PolicyKind(self.config.policy))
        self.esp = self.config.esp
        if self.esp is None:
            names = image.symbol_table
            self.esp = MPU_INIT_SYMBOL in names or MPU_LOCK_SYMBOL in names
        if self.config.scenario is Scenario.RAM and mm.ram_code_range is None:
            raise BootError("execute-from-RAM needs a ram_code range in the memory map")
        if len(image.code_bytes) > mm.flash.size:
            raise BootError("image does not fit flash")
        self.exec_offset = (mm.ram_code_range.base - image.code_base) if self.config.scenario is Scenario.RAM else 0
        self._cold_boot()

    # ----------------------------------------------------------- helpers

    def emit(self, kind: str, thread: Thread | int | None = None, pc: int | None = None, **detail) -> Event:
        if isinstance(thread, Thread):
            tid = thread.id
            if pc is None:
                pc = thread.pc
        else:
            tid = thread
        ev = Event(kind, self.cycle, self.boot_id, tid, pc, detail)
        self.log.append(ev)
        return ev

    def events(self, kind: str | None = None) -> list[Event]:
        return [e for e in self.log if kind is None or e.kind == kind]

    def thread(self, tid: int) -> Thread:
        t = self.threads[tid]
        if t is None:
            raise KeyError(tid)
        return t

    def exec_addr(self, sym_or_addr) -> int:
        """Address of a function as executed (RAM copy in the RAM scenario), or of a global."""
        if isinstance(sym_or_addr, int):
            return sym_or_addr
        s = self.image.symbol(sym_or_addr)
        return s.addr + (self.exec_offset if s.kind == SYM_FUNC else 0)

    def sensitive_ranges(self) -> list[Range]:
        spans = [Range(a, b - a) for a, b in self.image.sensitive_ranges()]
        if self.exec_offset:
            spans += [Range(r.base + self.exec_offset, r.size) for r in spans]
        return list(self.mm.sensitive_ranges) + spans

    def global_bytes(self, name: str) -> bytes:
        s = self.image.symbol(name)
        off = s.addr - self.mm.sram.base
        return bytes(self.sram[off:off + s.size])

    def observable(self) -> tuple[bytes, int | None, dict[str, bytes]]:
        gl = {s.name: self.global_bytes(s.name) for s in self.image.globals() if not s.name.startswith("__")}
        return bytes(self.output), self.halt_code, gl

    # ----------------------------------------------------------- boot

    def _cold_boot(self) -> None:
        cfg, mm, img = self.config, self.mm, self.image
        self.boot_steps = []
        self.flash = bytearray(b"\xff" * mm.flash.size)
        self.flash[:len(img.code_bytes)] = img.code_bytes
        self._dcache: dict[int, tuple] = {}
        self.mpu: MpuPlan | None = None
        self.threads: list[Thread | None] = [None] * mm.max_threads
        self.current = 0
        self.quantum_used = 0
        self.policy.restart_handlers.clear()
        seed = self.boot_seed if self.boot_id == 0 else (self.boot_seed * 1_000_003 + self.boot_id) & 0xFFFFFFFFFFFF
        window = min(cfg.suv_window, mm.sram.size)
        # (1) SRAM powers up; nothing has touched it before the seed is taken
        power_on = sram_startup_sample(self.device, seed, window)
        self.sram = bytearray(mm.sram.size)
        self.sram[:len(power_on)] = power_on
        suv = bytes(self.sram[:window])
        self.boot_steps.append("suv")
        # (2) generator
        if RNG_STATE_SYMBOL in img.symbol_table:
            self.rng = rng_init(cfg.rng, suv, cfg.entropy, [EntropySource.jitter(seed=seed)])
            self._rand = lambda: rand32(self.rng)
        else:
            self.rng = None
            stub = StubRng(0)
            self._rand = stub.rand32
        self.boot_steps.append("rng_init")
        # crt0: initial data image
        d = img.data_base - mm.sram.base
        self.sram[d:d + len(img.data_bytes)] = img.data_bytes
        if self.rng is not None:
            s = img.symbol(RNG_STATE_SYMBOL)
            o = s.addr - mm.sram.base
            blob = bytes(self.rng.sponge.lanes) + bytes(s.size)
            self.sram[o:o + s.size] = blob[:s.size]
        # (3) master canary
        if self.rng is not None:
            self.canary = generate_master_canary(self.rng, cfg.canary, self.boot_id)
        else:
            v = self._rand()
            self.canary = MasterCanary(v & 0xFFFFFF00 if cfg.canary.terminator_style else v, self.boot_id)
        self.canary_history.append(self.canary.value)
        if GUARD_SYMBOL in img.symbol_table:
            o = img.symbol_table[GUARD_SYMBOL] - mm.sram.base
            self.sram[o:o + 4] = self.canary.to_bytes()
        self.boot_steps.append("canary")
        # (4) MPU plan (overlays and the MPU window stay open until lock)
        if self.esp:
            plan_map = mm.with_sensitive(self.sensitive_ranges())
            self.mpu = plan_mpu(plan_map, cfg.scenario)
        self.boot_steps.append("mpu_plan")
        # (5) bootloader copy and sensitive init
        if self.exec_offset:
            r = mm.ram_code_range.base - mm.sram.base
            self.sram[r:r + len(img.code_bytes)] = img.code_bytes
        if MPU_INIT_SYMBOL in img.symbol_table:
            self._boot_call(self.exec_addr(MPU_INIT_SYMBOL))
        self.boot_steps.append("sensitive_init")
        # (6) lock
        if self.esp:
            if MPU_LOCK_SYMBOL in img.symbol_table:
                self._boot_call(self.exec_addr(MPU_LOCK_SYMBOL))
            if not self.mpu.locked:
                self.mpu = lock_mpu(self.mpu)
        self.boot_steps.append("lock")
        # (7) threads
        self.emit("Boot", None, None, canary=f"{self.canary.value:#010x}")
        self._spawn(img.entry + self.exec_offset, 0)
        self.boot_steps.append("threads")

    def _new_thread(self, slot: int, entry: int, arg: int) -> Thread:
        mm = self.mm
        stack = Range(mm.stack_area.base + slot * mm.stack_size, mm.stack_size)
        regs = [0] * 16
        regs[0] = arg & M32
        regs[SP] = stack.end
        regs[LR] = THREAD_RETURN
        regs[PC] = entry & M32
        return Thread(slot, stack, regs, "ready", entry, stack.end, start_cycle=self.cycle)

    def _spawn(self, entry: int, arg: int) -> int | None:
        for slot, t in enumerate(self.threads):
            if t is None or not t.alive:
                self.threads[slot] = self._new_thread(slot, entry, arg)
                self.emit("ThreadStart", slot, entry)
                return slot
        return None

    def _boot_call(self, addr: int) -> None:
        t = self._new_thread(0, addr, 0)
        t.regs[LR] = BOOT_RETURN
        start = self.cycle
        while t.pc != BOOT_RETURN:
            if self.cycle - start > self.config.boot_cycle_limit:
                raise BootError(f"boot routine at {addr:#x} did not return")
            self._exec(t)
            if not t.alive or self.halted:
                raise BootError(f"boot routine at {addr:#x} failed: {self.log[-1].line()}")

    # ----------------------------------------------------------- policy hooks

    def kill_thread(self, tid: int, reason: str = "") -> None:
        t = self.threads[tid]
        if t is not None and t.alive:
            t.state = "dead"
            self.emit("ThreadKilled", t, reason=reason)

    def restart_thread(self, tid: int, handler: int) -> None:
        old = self.threads[tid]
        fresh = self._new_thread(tid, handler, 0)
        self.threads[tid] = fresh
        self.emit("ThreadRestart", tid, old.pc if old else None, handler=handler)

    def reboot(self) -> None:
        self.emit("Reboot", None, None, old_canary=f"{self.canary.value:#010x}")
        self.boot_id += 1
        self._cold_boot()

    def shutdown(self) -> None:
        for t in self.threads:
            if t is not None and t.alive:
                t.state = "dead"
        self.halted = True
        self.emit("Shutdown")

    # ----------------------------------------------------------- memory

    def _check(self, addr: int, kind: str) -> None:
        mpu = self.mpu
        if mpu is None:
            if self.access_trace is not None:
                self.access_trace.append((self.cycle, kind, addr, True))
            return
        try:
            p = mpu.permission(addr)
            ok = p.execute if kind == "fetch" else (p.write if kind == "write" else p.read)
        except NoRegionFault:
            ok = False
        if self.access_trace is not None:
            self.access_trace.append((self.cycle, kind, addr, ok))
        if not ok:
            raise _Fault(kind, addr, "mpu")

    def _checked(self, addr: int, size: int, kind: str) -> None:
        self._check(addr, kind)
        last = addr + size - 1
        if size > 1 and (last >> 5) != (addr >> 5):
            self._check(last & M32, kind)

    def read(self, addr: int, size: int, kind: str = "read") -> int:
        addr &= M32
        self._checked(addr, size, kind)
        mm = self.mm
        if mm.sram.base <= addr and addr + size <= mm.sram.end:
            o = addr - mm.sram.base
            return int.from_bytes(self.sram[o:o + size], "little")
        if mm.flash.base <= addr and addr + size <= mm.flash.end:
            o = addr - mm.flash.base
            return int.from_bytes(self.flash[o:o + size], "little")
        if mm.peripherals.contains(addr):
            if addr == mm.console_in:
                return self.input.pop(0) if self.input else M32 >> (32 - 8 * size)
            return 0
        if mm.scb.contains(addr) or mm.mpu_regs.contains(addr):
            return 0
        raise _Fault(kind, addr, "unmapped")

    def write(self, addr: int, size: int, value: int) -> None:
        addr &= M32
        self._checked(addr, size, "write")
        mm = self.mm
        if mm.sram.base <= addr and addr + size <= mm.sram.end:
            o = addr - mm.sram.base
            self.sram[o:o + size] = (value & ((1 << 8 * size) - 1)).to_bytes(size, "little")
            if self._dcache:
                for a in range(addr & ~3, addr + size, 4):
                    self._dcache.pop(a, None)
            return
        if mm.peripherals.contains(addr):
            if addr == mm.console_out:
                self.output.append(value & 0xFF)
            return
        if mm.scb.contains(addr) or mm.mpu_regs.contains(addr):
            return
        # flash is programmed through the controller, never by plain stores
        raise _Fault("write", addr, "bus" if mm.flash.contains(addr) else "unmapped")

    def _fetch(self, pc: int) -> tuple:
        self._check(pc, "fetch")
        d = self._dcache.get(pc)
        if d is None:
            word = self.read(pc, 4, "fetch") if pc & 3 == 0 else None
            if word is None:
                raise _Fault("fetch", pc, "unaligned")
            try:
                ins = decode_instruction(word)
            except InvalidInstruction:
                return None
            op = ins.op
            if op in _KIND:
                kind = _KIND[op]
                aux = 0
            elif op in _ALU_INDEX:
                kind, aux = K_ALU, _ALU_INDEX[op]
            else:
                kind, aux = K_ALUI, _ALU_INDEX[op[:-1]]
            cost = ins.cycles() if op != "BR" else 0
            d = (kind, ins.rd, ins.rn, ins.rm, ins.imm, ins.cond, ins.regs, cost, aux)
            self._dcache[pc] = d
        return d

    # ----------------------------------------------------------- execution

    def _exec(self, t: Thread) -> None:
        regs = t.regs
        pc = regs[PC]
        if pc in self.breakpoints:
            hook = self.breakpoints.pop(pc)
            hook(self, t)
            if not t.alive or self.halted or regs[PC] != pc:
                return
        if self.config.trace_pcs:
            self.pc_digest = zlib.crc32(pc.to_bytes(4, "little"), self.pc_digest)
        if pc == THREAD_RETURN:
            self._thread_exit(t, regs[0])
            return
        try:
            d = self._fetch(pc)
            if d is None:
                self.cycle += 1
                self.emit("UsageFault", t, word=f"{self.read(pc, 4, 'fetch'):#010x}")
                self._fault_effect(t)
                return
            kind, rd, rn, rm, imm, cond, rlist, cost, aux = d
            npc = pc + 4
            if kind == K_ALUI:
                a = pc if rn == PC else regs[rn]
                val = _alu(aux, a, imm & M32)
                if rd == PC:
                    npc = val
                else:
                    regs[rd] = val
                    if rd == SP and val < t.min_sp:
                        t.min_sp = val
            elif kind == K_ALU:
                val = _alu(aux, pc if rn == PC else regs[rn], pc if rm == PC else regs[rm])
                if rd == PC:
                    npc = val
                else:
                    regs[rd] = val
                    if rd == SP and val < t.min_sp:
                        t.min_sp = val
            elif kind == K_BR:
                a, b = regs[rn], regs[rm]
                if cond == "AL":
                    taken = True
                elif cond == "EQ":
                    taken = a == b
                elif cond == "NE":
                    taken = a != b
                elif cond == "LO":
                    taken = a < b
                elif cond == "HS":
                    taken = a >= b
                elif cond == "LT":
                    taken = _sext32(a) < _sext32(b)
                else:
                    taken = _sext32(a) >= _sext32(b)
                if taken:
                    npc = (pc + 4 * imm) & M32
                    t.last_transfer = (pc, "br" if cond == "AL" else "brc", npc)
                    cost = BR_TAKEN_CYCLES
                else:
                    cost = BR_NOT_TAKEN_CYCLES
            elif kind == K_LOAD or kind == K_LOADB:
                base = pc if rn == PC else regs[rn]
                val = self.read((base + imm) & M32, 4 if kind == K_LOAD else 1)
                if rd == PC:
                    npc = val
                else:
                    regs[rd] = val
            elif kind == K_STORE or kind == K_STOREB:
                base = pc if rn == PC else regs[rn]
                self.write((base + imm) & M32, 4 if kind == K_STORE else 1, regs[rd])
            elif kind == K_MOVI:
                regs[rd] = imm
            elif kind == K_MOV:
                val = pc if rn == PC else regs[rn]
                if rd == PC:
                    npc = val
                else:
                    regs[rd] = val
            elif kind == K_MOVT:
                regs[rd] = (regs[rd] & 0xFFFF) | (imm << 16)
            elif kind == K_CALL:
                regs[LR] = pc + 4
                npc = (pc + 4 * imm) & M32
                t.last_transfer = (pc, "call", npc)
            elif kind == K_RET:
                npc = regs[LR]
                t.last_transfer = (pc, "ret", npc)
            elif kind == K_PUSHM:
                n = len(rlist)
                sp = (regs[SP] - 4 * n) & M32
                for i, r in enumerate(rlist):
                    self.write(sp + 4 * (n - 1 - i), 4, regs[r])
                regs[SP] = sp
                if sp < t.min_sp:
                    t.min_sp = sp
            elif kind == K_POPM:
                sp = regs[SP]
                vals = [self.read(sp + 4 * i, 4) for i in range(len(rlist))]
                for r, v in zip(rlist, vals):
                    regs[r] = v
                regs[SP] = (sp + 4 * len(rlist)) & M32
            elif kind == K_CALLR:
                regs[LR] = pc + 4
                npc = regs[rn]
                t.last_transfer = (pc, "callr", npc)
            elif kind == K_NOP:
                pass
            elif kind == K_SVC:
                self.cycle += cost
                self.quantum_used += cost
                self._svc(t, imm, pc)
                return
            elif kind == K_HALT:
                self.cycle += cost
                self.halted = True
                self.halt_code = regs[0]
                self.emit("Halt", t, code=regs[0])
                return
            elif kind == K_TRAP:
                self.cycle += cost
                self.emit("Trap", t)
                self._fault_effect(t)
                return
            elif kind == K_MPUWR:
                self.write(self.mm.mpu_regs.base + imm, 4, regs[rd])
                if imm == MPU_CTRL and regs[rd] & CTRL_LOCK and self.mpu is not None and not self.mpu.locked:
                    self.mpu = lock_mpu(self.mpu)
                    self.emit("MpuLocked", t)
            elif kind == K_FLASHWR:
                self.write(self.mm.flash_ctrl, 4, regs[rn])
                target = regs[rn]
                if not (self.mm.flash.base <= target and target + 4 <= self.mm.flash.end):
                    raise _Fault("write", target, "flash-controller")
                o = target - self.mm.flash.base
                self.flash[o:o + 4] = regs[rd].to_bytes(4, "little")
                self._dcache.pop(target & ~3, None)
                self.emit("FlashWrite", t, addr=target)
            regs[PC] = npc & M32
            self.cycle += cost
            self.quantum_used += cost
        except _Fault as f:
            self.cycle += 1
            self.emit("MemFault", t, access=f.kind, addr=f.addr, reason=f.reason)
            self._fault_effect(t)

    def _fault_effect(self, t: Thread) -> None:
        if self.config.fault_policy == "halt":
            self.halted = True
            t.state = "dead"
        else:
            self.kill_thread(t.id, reason="fault")

    def _thread_exit(self, t: Thread, code: int) -> None:
        t.state = "dead"
        if t.id in self.policy.restart_handlers:
            self.emit("RegistryLeak", t)
            self.policy.deregister(t.id)
        self.emit("ThreadExit", t, code=code)

    def _svc(self, t: Thread, num: int, pc: int) -> None:
        regs = t.regs
        npc = pc + 4
        if num == SVC_EXIT:
            regs[PC] = npc
            self._thread_exit(t, regs[0])
            return
        if num == SVC_YIELD:
            self.quantum_used = self.config.quantum
        elif num == SVC_RAND:
            regs[0] = self._rand()
        elif num == SVC_SPAWN:
            tid = self._spawn(regs[0], regs[1])
            regs[0] = M32 if tid is None else tid
        elif num == SVC_REG_RESTART:
            self.policy.register(t.id, regs[0])
            self.emit("RestartRegistered", t, handler=regs[0])
        elif num == SVC_DEREG_RESTART:
            self.policy.deregister(t.id)
            self.emit("RestartDeregistered", t)
        elif num == SVC_TID:
            regs[0] = t.id
        elif num == SVC_WAIT:
            other = regs[0]
            if other < len(self.threads) and self.threads[other] is not None and self.threads[other].alive \
                    and other != t.id:
                self.quantum_used = self.config.quantum
                return  # retry the SVC when rescheduled
        elif num == SVC_VIOLATION:
            self._violation(t, pc)
            return
        else:
            self.emit("BadSvc", t, num=num)
        regs[PC] = npc

    def _violation(self, t: Thread, pc: int) -> None:
        lt = t.last_transfer
        kind = self.policy.kind.value
        if lt is not None and lt[1] == "brc" and lt[2] == pc:
            self.emit("CanaryViolation", t, lt[0], policy=kind)
            handle_violation(self, self.policy, t.id, lt[0] + 4)
        else:
            src = lt[0] if lt is not None and lt[2] == pc else None
            self.emit("TrapViolation", t, src, policy=kind)
            handle_violation(self, self.policy, t.id, None)

    # ----------------------------------------------------------- scheduling

    def ready_threads(self) -> list[Thread]:
        return [t for t in self.threads if t is not None and t.alive]

    def _pick(self) -> Thread | None:
        n = len(self.threads)
        for k in range(n):
            t = self.threads[(self.current + k) % n]
            if t is not None and t.alive:
                if k:
                    self.current = (self.current + k) % n
                    self.quantum_used = 0
                return t
        return None

    def step(self) -> Event | None:
        if self.halted:
            return None
        t = self._pick()
        if t is None:
            return None
        mark = len(self.log)
        boot = self.boot_id
        self._exec(t)
        if self.boot_id == boot and (self.quantum_used >= self.config.quantum or not t.alive):
            self.quantum_used = 0
            self.current = (self.current + 1) % len(self.threads)
        return self.log[mark] if len(self.log) > mark else None

    def run(self, max_cycles: int = 2_000_000) -> str:
        """Run until halt, idle (no live threads) or the cycle budget; returns which."""
        limit = self.cycle + max_cycles
        threads_alive = self._pick
        while not self.halted and self.cycle < limit:
            t = threads_alive()
            if t is None:
                return "idle"
            boot = self.boot_id
            self._exec(t)
            if self.boot_id == boot and (self.quantum_used >= self.config.quantum or not t.alive):
                self.quantum_used = 0
                self.current = (self.current + 1) % len(self.threads)
        if self.halted:
            return "halted"
        return "budget"

    def violation_log(self) -> list[str]:
        kinds = {"CanaryViolation", "TrapViolation", "Alert", "ThreadKilled", "ThreadRestart", "Reboot",
                 "Shutdown", "PolicyFallback"}
        return [e.line() for e in self.log if e.kind in kinds]


def boot(image: FlatImage, mm: MemoryMap, device: SramDevice, boot_seed: int = 0,
         config: SimConfig | None = None, console_input: bytes = b"") -> SimMachine:
    return SimMachine(image, mm, device, boot_seed, config, console_input)

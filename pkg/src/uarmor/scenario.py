"""Scripted attack scenarios: parsing, execution and reports.

Script lines (``#`` comments)::

    name <label>
    load <image-file> | load corpus:<program>
    input "<python string literal>"
    overflow <func>.<local> <hexbytes>   write past a stack local once the prologue has run
    inject <addr|sym[+off]> <hexbytes>   attacker write through the MPU
    call <addr|sym>                      divert the main thread
    reg <reg> <value>                    set a register of the main thread
    run [cycles]
    expect <Event>[(<arg>)]              e.g. MemFault(fetch), Halt(0), CanaryViolation
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from pathlib import Path

from .firmware import FlatImage
from .isa import REG_INDEX, Instruction, encode_bytes
from .memmap import LM3S6965, MemoryMap
from .sim import SimConfig, SimMachine, _Fault, boot
from .urng import SramDevice

EVENT_KINDS = {"MemFault", "CanaryViolation", "TrapViolation", "Alert", "Halt", "ThreadKilled", "ThreadRestart",
               "Reboot", "Shutdown", "PolicyFallback", "UsageFault", "Trap", "ThreadExit", "Output"}
DEFAULT_BUDGET = 2_000_000


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    op: str
    args: tuple = ()
    lineno: int = 0


@dataclass
class Scenario:
    name: str
    image: FlatImage | None
    script: list[Action]
    console_input: bytes = b""
    load_ref: str | None = None

    @property
    def expectations(self) -> list[Action]:
        return [a for a in self.script if a.op == "expect"]


@dataclass
class ExpectResult:
    expectation: str
    passed: bool
    matched: str = ""


@dataclass
class ScenarioReport:
    name: str
    results: list[ExpectResult]
    events: list[str]
    cycles: int
    output: bytes = b""
    errors: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"scenario {self.name}: {'PASS' if self.passed else 'FAIL'} ({self.cycles} cycles)"]
        for r in self.results:
            lines.append(f"  expect {r.expectation:<24} {'pass' if r.passed else 'FAIL'}  {r.matched}")
        lines += [f"  error: {e}" for e in self.errors]
        lines.append("  events:")
        lines += [f"    {e}" for e in self.events]
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        recs = [{"scenario": self.name, "expect": r.expectation, "passed": r.passed, "event": r.matched}
                for r in self.results]
        recs.append({"scenario": self.name, "metric": "cycles", "value": self.cycles})
        recs.append({"scenario": self.name, "metric": "passed", "value": self.passed})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())


def _parse_expect(text: str) -> tuple[str, str | None]:
    text = text.strip()
    if "(" in text:
        if not text.endswith(")"):
            raise ScenarioError(f"bad expectation {text!r}")
        kind, arg = text[:-1].split("(", 1)
        arg = arg.strip()
        if kind == "Output":
            arg = ast.literal_eval(arg)
        return kind.strip(), arg
    return text, None


def parse_scenario(text: str, base_dir=None) -> Scenario:
    name, image, script, inp, ref = "scenario", None, [], b"", None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if op == "name":
                name = rest
            elif op == "load":
                if rest.startswith("corpus:"):
                    ref = rest
                else:
                    path = Path(base_dir or ".") / rest
                    image = FlatImage.from_bytes(path.read_bytes())
                    ref = str(path)
            elif op == "input":
                inp += ast.literal_eval(rest).encode()
            elif op == "overflow":
                target, hexbytes = rest.split()
                func, local = target.split(".", 1)
                script.append(Action("overflow", (func, local, bytes.fromhex(hexbytes)), lineno))
            elif op == "inject":
                target, hexbytes = rest.split()
                script.append(Action("inject", (target, bytes.fromhex(hexbytes)), lineno))
            elif op == "call":
                script.append(Action("call", (rest,), lineno))
            elif op == "reg":
                reg, value = rest.split()
                if reg.lower() not in REG_INDEX:
                    raise ScenarioError(f"bad register {reg!r}")
                script.append(Action("reg", (REG_INDEX[reg.lower()], int(value, 0)), lineno))
            elif op == "run":
                script.append(Action("run", (int(rest, 0) if rest else DEFAULT_BUDGET,), lineno))
            elif op == "expect":
                kind, arg = _parse_expect(rest)
                if kind not in EVENT_KINDS:
                    raise ScenarioError(f"unknown event kind {kind!r}")
                script.append(Action("expect", (kind, arg), lineno))
            else:
                raise ScenarioError(f"unknown action {op!r}")
        except (ValueError, OSError, SyntaxError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    return Scenario(name, image, script, inp, ref)


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


def _resolve(machine: SimMachine, target: str) -> int:
    target = target.strip()
    try:
        return int(target, 0)
    except ValueError:
        pass
    off = 0
    if "+" in target:
        target, o = target.split("+", 1)
        off = int(o, 0)
    try:
        return machine.exec_addr(target) + off
    except KeyError:
        raise ScenarioError(f"unknown symbol {target!r}") from None


def _matches(ev, kind: str, arg) -> bool:
    if ev.kind != kind:
        return False
    if arg is None:
        return True
    if kind == "MemFault":
        return ev.detail.get("access") == arg
    if kind in ("Halt", "ThreadExit"):
        return ev.detail.get("code") == int(arg, 0)
    return str(arg) in " ".join(str(v) for v in ev.detail.values())


def _overflow_hook(func: str, local: str, payload: bytes):
    def hook(machine: SimMachine, t) -> None:
        sym = machine.image.locals_of(func)[local]
        base = (t.regs[13] + sym.addr) & 0xFFFFFFFF
        machine.emit("Overflow", t, target=f"{func}.{local}", length=len(payload))
        try:
            for i, b in enumerate(payload):
                machine.write(base + i, 1, b)
        except _Fault as f:
            machine.emit("MemFault", t, access=f.kind, addr=f.addr, reason=f.reason)
            machine._fault_effect(t)
    return hook


def run_scenario(scenario: Scenario, machine: SimMachine) -> ScenarioReport:
    errors: list[str] = []
    start = len(machine.log)
    ran_since = True
    for act in scenario.script:
        try:
            main = machine.threads[0]
            if act.op == "overflow":
                func, local, payload = act.args
                fsym = machine.image.symbol(func)
                if local not in machine.image.locals_of(func):
                    raise ScenarioError(f"{func} has no local {local!r}")
                at = machine.exec_addr(func) + fsym.prologue
                machine.breakpoints[at] = _overflow_hook(func, local, payload)
                ran_since = False
            elif act.op == "inject":
                addr = _resolve(machine, act.args[0])
                machine.emit("Inject", main, addr=addr, length=len(act.args[1]))
                try:
                    for i, b in enumerate(act.args[1]):
                        machine.write(addr + i, 1, b)
                except _Fault as f:
                    machine.emit("MemFault", main, access=f.kind, addr=f.addr, reason=f.reason)
                    machine._fault_effect(main)
                ran_since = False
            elif act.op == "call":
                if main is None or not main.alive:
                    raise ScenarioError("main thread is not running")
                main.pc = _resolve(machine, act.args[0])
                machine.emit("Hijack", main)
                ran_since = False
            elif act.op == "reg":
                main.regs[act.args[0]] = act.args[1] & 0xFFFFFFFF
                ran_since = False
            elif act.op == "run":
                machine.run(act.args[0])
                ran_since = True
        except (ScenarioError, KeyError) as exc:
            errors.append(f"line {act.lineno}: {exc}")
    if not ran_since or not any(a.op == "run" for a in scenario.script):
        machine.run(DEFAULT_BUDGET)
    log = machine.log[start:]
    results, pos = [], 0
    for act in scenario.expectations:
        kind, arg = act.args
        label = kind if arg is None else f"{kind}({arg!r})" if kind == "Output" else f"{kind}({arg})"
        if kind == "Output":
            results.append(ExpectResult(label, arg.encode() in bytes(machine.output)))
            continue
        hit = next((i for i in range(pos, len(log)) if _matches(log[i], kind, arg)), None)
        if hit is None:
            results.append(ExpectResult(label, False))
        else:
            results.append(ExpectResult(label, True, log[hit].line()))
            pos = hit + 1
    return ScenarioReport(scenario.name, results, [e.line() for e in machine.log], machine.cycle,
                          bytes(machine.output), errors)


def execute(scenario: Scenario, mm: MemoryMap = LM3S6965, device: SramDevice | None = None,
            boot_seed: int = 0, config: SimConfig | None = None) -> tuple[ScenarioReport, SimMachine]:
    if scenario.image is None:
        raise ScenarioError("scenario has no image loaded")
    device = device or SramDevice.generate(mm.sram.size, 0)
    machine = boot(scenario.image, mm, device, boot_seed, config, scenario.console_input)
    return run_scenario(scenario, machine), machine


# ------------------------------------------------------------- attack suite

SHELLCODE = encode_bytes([Instruction("MOVI", rd=0, imm=66), Instruction("HALT")])
SMASH_PAYLOAD = b"A" * 16 + b"\xde\xad\xbe\xef" + b"B" * 12
POLICY_EFFECT = {
    "passive": ["Alert", "Halt(0)"],
    "fatal": ["ThreadKilled", "Halt(0)"],
    "thread-restart": ["ThreadRestart", "Halt(0)"],
    "restart": ["Reboot", "Halt(0)"],
    "shutdown": ["Shutdown"],
}


def attack_scripts(policy: str = "fatal") -> dict[str, tuple[str, str]]:
    """name -> (corpus program, script text) for the standard attack suite."""
    smash = "overflow vuln.buf " + SMASH_PAYLOAD.hex() + "\nexpect CanaryViolation\n"
    smash += "".join(f"expect {e}\n" for e in POLICY_EFFECT[policy])
    return {
        "stack-smash": ("vuln", smash),
        "code-injection": ("bootloader", f"inject 0x20001000 {SHELLCODE.hex()}\ncall 0x20001000\n"
                                         "expect MemFault(fetch)\n"),
        "code-modification": ("bootloader", "inject main 02000000\nexpect MemFault(write)\n"),
        "ret2bootloader": ("bootloader", "reg r0 0x1000\nreg r1 0\ncall flash_write\nexpect MemFault(fetch)\n"),
        "mpu-rewrite": ("bootloader", "reg r0 0\ncall __mpu_lock\nexpect MemFault(write)\n"),
    }

"""``uarmor`` command-line tool.

Option precedence is flag > environment (``UARMOR_SEED``) > config file
(``--config``, ``key = value`` lines named after the long options).
Exit codes: 0 success, 1 expectation or verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import corpus
from .asm import AsmError, expand_includes, parse_asm
from .build import BuildConfig, build_module
from .firmware import FlatImage, ImageFormatError, LinkError
from .gadgets import survival
from .memmap import LM3S6965, LM3S6965_RAM, MapConfigError, Range, dump_map, load_map
from .overhead import WorkloadDivergence, measure_overhead
from .report import format_code_size_table, format_overhead_table, format_survival
from .scenario import Scenario, ScenarioError, attack_scripts, execute, load_scenario, parse_scenario
from .sim import BootError, SimConfig
from .uesp import AlignmentUnsatisfiable, RegionBudgetExceeded, Scenario as ExecMode, format_plan, \
    format_plan_detail, lock_mpu, plan_mpu
from .urng import (EntropyModel, EntropySource, InsufficientSeedEntropy, ReseedMode, ReseedPolicy, RngConfig,
                   SramDevice, random_bytes, rng_init, sram_startup_sample)
from .uscramble import DiversificationSeed, DiversifyConfig, StubKind, variant_seed

SEED_ENV = "UARMOR_SEED"
POLICIES = ("passive", "fatal", "thread-restart", "restart", "shutdown")
DEFAULT_SEED_BASE = "00" * 32

DEFAULTS = {
    "ssp": "off", "canary": "plain", "esp": False, "rng": "stub", "diversify": False, "seed": None,
    "stubs": "nop", "max_stub": 4, "threshold": 8, "policy": "fatal", "exec": "flash", "map": None,
    "no_reg_reorder": False, "no_dead_code": False, "no_func_reorder": False,
}


class InputError(Exception):
    pass


# ------------------------------------------------------------------ config


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS.get(key)
    if isinstance(value, str):
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value, 0)
    return value


def resolve_options(args) -> None:
    """Fill unset options from the environment, then the config file, then defaults."""
    file_cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key, default in DEFAULTS.items():
        if not hasattr(args, key) or getattr(args, key) is not None:
            continue
        if key == "seed" and os.environ.get(SEED_ENV):
            value = os.environ[SEED_ENV]
        elif key in file_cfg:
            value = file_cfg[key]
        else:
            value = default
        setattr(args, key, _coerce(key, value))


def memory_map_for(args):
    if args.map:
        try:
            mm = load_map(args.map)
        except (OSError, MapConfigError) as exc:
            raise InputError(f"memory map: {exc}") from None
        if args.exec == "ram" and mm.ram_code_range is None:
            mm = replace(mm, ram_code_range=LM3S6965_RAM.ram_code_range)
        return mm
    return LM3S6965_RAM if args.exec == "ram" else LM3S6965


def sim_config(args, policy=None) -> SimConfig:
    return SimConfig(scenario=ExecMode(args.exec), policy=policy or args.policy,
                     canary=BuildConfig(canary=args.canary).canary_config)


def build_config(args) -> BuildConfig:
    div, seed = None, None
    if args.diversify:
        if not args.seed:
            raise InputError(f"diversification needs --seed (or {SEED_ENV})")
        try:
            seed = DiversificationSeed.from_hex(args.seed)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        div = DiversifyConfig(not args.no_reg_reorder, not args.no_dead_code, StubKind(args.stubs),
                              args.max_stub, not args.no_func_reorder)
    return BuildConfig(args.ssp, args.canary, bool(args.esp), args.rng, div, seed, args.threshold)


# ------------------------------------------------------------------ sources and manifests


def source_text(ref: str) -> str:
    if ref.startswith("corpus:"):
        try:
            return corpus.source_text(ref.split(":", 1)[1])
        except KeyError as exc:
            raise InputError(str(exc)) from None
    try:
        p = Path(ref)
        return expand_includes(p.read_text(), p.parent)
    except OSError as exc:
        raise InputError(f"cannot read {ref}: {exc}") from None


def load_module(ref: str, mm):
    try:
        return parse_asm(source_text(ref), mm)
    except AsmError as exc:
        raise InputError(f"{ref}: {exc}") from None


def sha256(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def manifest_text(ref: str, args, mm, cfg: BuildConfig, image: FlatImage, variant: int | None = None) -> str:
    fields = [
        ("format", "uarmor-manifest-1"),
        ("source", ref if ref.startswith("corpus:") else str(Path(ref).resolve())),
        ("source_sha256", sha256(source_text(ref))),
        ("map", str(Path(args.map).resolve()) if args.map else "builtin"),
        ("map_sha256", sha256(dump_map(mm))),
        ("exec", args.exec),
        ("ssp", cfg.ssp),
        ("coverage", cfg.canary_config.coverage),
        ("canary", cfg.canary),
        ("threshold", cfg.threshold),
        ("esp", int(cfg.esp)),
        ("rng", cfg.rng),
        ("diversify", int(cfg.diversify is not None)),
    ]
    if cfg.diversify is not None:
        d = cfg.diversify
        fields += [("seed", cfg.seed.hex()), ("stubs", d.dead_code_kind.value), ("max_stub", d.max_stub_instructions),
                   ("no_reg_reorder", int(not d.enable_reg_reorder)), ("no_dead_code", int(not d.enable_dead_code)),
                   ("no_func_reorder", int(not d.enable_func_reorder))]
    if variant is not None:
        fields.append(("variant", variant))
    fields.append(("image_sha256", sha256(image.to_bytes())))
    body = "".join(f"{k} = {v}\n" for k, v in fields)
    return body + f"content_sha256 = {sha256(body)}\n"


def read_manifest(path) -> dict[str, str]:
    text = Path(path).read_text()
    lines = text.splitlines(keepends=True)
    if not lines or not lines[-1].startswith("content_sha256"):
        raise InputError(f"{path}: missing content hash")
    body = "".join(lines[:-1])
    if lines[-1].split("=", 1)[1].strip() != sha256(body):
        raise InputError(f"{path}: content hash mismatch")
    return read_config(path)


def symbol_map_text(image: FlatImage) -> str:
    kinds = {0: "func", 1: "global", 2: "local"}
    lines = []
    for s in image.symbols:
        lines.append(f"{s.addr:#010x} {s.size:6d} {kinds.get(s.kind, s.kind):6s} {s.flags:#04x} {s.name}")
    return "\n".join(lines) + "\n"


def write_build(out: Path, image: FlatImage, manifest: str) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(image.to_bytes())
    out.with_suffix(".syms").write_text(symbol_map_text(image))
    out.with_suffix(".manifest").write_text(manifest)


# ------------------------------------------------------------------ commands


def cmd_build(args) -> int:
    if args.from_manifest:
        man = read_manifest(args.from_manifest)
        for key in DEFAULTS:
            if key in man and key not in ("map",):
                setattr(args, key, _coerce(key, man[key]))
        args.map = None if man.get("map", "builtin") == "builtin" else man["map"]
        args.diversify = man.get("diversify") == "1"
        args.source = man["source"]
        if sha256(source_text(args.source)) != man["source_sha256"]:
            raise InputError("source changed since the manifest was written")
    if not args.source:
        raise InputError("no source given")
    resolve_options(args)
    mm = memory_map_for(args)
    module = load_module(args.source, mm)
    if args.variants:
        args.diversify = True
        base = args.seed_base or args.seed or DEFAULT_SEED_BASE
        outdir = Path(args.out or "variants")
        for i in range(args.variants):
            args.seed = variant_seed(bytes.fromhex(base), i).hex()
            cfg = build_config(args)
            image = build_image(module, cfg)
            write_build(outdir / f"variant_{i:04d}.img", image, manifest_text(args.source, args, mm, cfg, image, i))
        print(f"wrote {args.variants} variants to {outdir}")
        return 0
    cfg = build_config(args)
    image = build_image(module, cfg)
    man = manifest_text(args.source, args, mm, cfg, image)
    if args.from_manifest:
        want = read_config(args.from_manifest)["image_sha256"]
        if sha256(image.to_bytes()) != want:
            print("rebuild differs from manifest", file=sys.stderr)
            return 1
    out = Path(args.out or (Path(args.source.split(":")[-1]).stem + ".img"))
    write_build(out, image, man)
    print(f"{out}: {len(image.code_bytes)} code bytes, {len(image.data_bytes)} data bytes, "
          f"image sha256 {sha256(image.to_bytes())[:16]}")
    return 0


def build_image(module, cfg: BuildConfig) -> FlatImage:
    try:
        return build_module(module, cfg).image
    except (LinkError, ValueError) as exc:
        raise InputError(f"build failed: {exc}") from None


def cmd_diversify(args) -> int:
    args.diversify = True
    return cmd_build(args)


def cmd_plan_mpu(args) -> int:
    resolve_options(args)
    mm = memory_map_for(args)
    spans = list(mm.sensitive_ranges)
    for text in args.sensitive or ():
        lo, hi = (int(p, 0) for p in text.split(".."))
        spans.append(Range(lo, hi - lo))
    if args.image:
        image = read_image(args.image)
        spans += [Range(a, b - a) for a, b in image.sensitive_ranges()]
        if args.exec == "ram":
            off = mm.ram_code_range.base - image.code_base
            spans += [Range(a + off, b - a) for a, b in image.sensitive_ranges()]
    try:
        plan = plan_mpu(mm.with_sensitive(spans), ExecMode(args.exec), merge_scb_mpu=args.merge_scb_mpu)
    except (RegionBudgetExceeded, AlignmentUnsatisfiable, MapConfigError) as exc:
        raise InputError(str(exc)) from None
    if not args.unlocked:
        plan = lock_mpu(plan)
    print(format_plan(plan), end="")
    if args.detail:
        print(format_plan_detail(plan), end="")
    return 0


def read_image(path) -> FlatImage:
    try:
        return FlatImage.from_bytes(Path(path).read_bytes())
    except (OSError, ImageFormatError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _console_input(args, default: bytes = b"") -> bytes:
    if args.input_file:
        return Path(args.input_file).read_bytes()
    if args.input is not None:
        return args.input.encode().decode("unicode_escape").encode("latin-1")
    return default


def _target_image(args, ref: str, mm) -> tuple[FlatImage, bytes]:
    if ref.startswith("corpus:"):
        name = ref.split(":", 1)[1]
        image = build_image(load_module(ref, mm), build_config(args))
        return image, corpus.console_input(name)
    return read_image(ref), b""


def cmd_simulate(args) -> int:
    if args.attack_suite:
        if args.ssp is None:
            args.ssp = "default"
        if args.esp is None:
            args.esp = True
        if args.rng is None:
            args.rng = "urng"
    resolve_options(args)
    mm = memory_map_for(args)
    reports = []
    try:
        if args.attack_suite:
            policies = POLICIES if args.all_policies else (args.policy,)
            for policy in policies:
                for name, (prog, text) in attack_scripts(policy).items():
                    if policy != policies[0] and name != "stack-smash":
                        continue
                    sc = parse_scenario(text)
                    sc.name = f"{name}[{policy}]" if name == "stack-smash" else name
                    sc.image, sc.console_input = _target_image(args, f"corpus:{prog}", mm)
                    reports.append(execute(sc, mm, SramDevice.generate(mm.sram.size, args.device_seed),
                                           args.boot_seed, sim_config(args, policy))[0])
        else:
            if args.scenario_file:
                sc = load_scenario(args.scenario_file)
                if sc.image is None and sc.load_ref:
                    sc.image, inp = _target_image(args, sc.load_ref, mm)
                    sc.console_input = sc.console_input or inp
            else:
                sc = Scenario("run", None, [], b"")
            if args.target:
                sc.image, inp = _target_image(args, args.target, mm)
                sc.console_input = sc.console_input or inp
            if sc.image is None:
                raise InputError("nothing to simulate: give an image, corpus:<name> or a scenario with load")
            sc.console_input = _console_input(args, sc.console_input)
            report, machine = execute(sc, mm, SramDevice.generate(mm.sram.size, args.device_seed),
                                      args.boot_seed, sim_config(args))
            reports.append(report)
            if not sc.expectations:
                sys.stdout.write(machine.output.decode("latin-1"))
    except (ScenarioError, BootError, InsufficientSeedEntropy, OSError) as exc:
        raise InputError(str(exc)) from None
    for r in reports:
        if args.verbose or not r.passed or args.attack_suite or r.results:
            print(r.to_text() if args.verbose else r.to_text().split("  events:")[0], end="")
    if args.json:
        Path(args.json).write_text("".join(r.to_jsonl() for r in reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_analyze_coverage(args) -> int:
    resolve_options(args)
    if args.variants_dir:
        paths = sorted(Path(args.variants_dir).glob("*.img"))
        images = [read_image(p) for p in paths]
        name = args.name or Path(args.variants_dir).name
    elif args.program:
        mm = memory_map_for(args)
        module = load_module(args.program, mm)
        base = args.seed_base or args.seed or DEFAULT_SEED_BASE
        images = []
        for i in range(args.variants):
            args.seed, args.diversify = variant_seed(bytes.fromhex(base), i).hex(), True
            images.append(build_image(module, build_config(args)))
        name = args.name or args.program.split(":")[-1]
    else:
        raise InputError("give --variants-dir or --program")
    if len(images) < 2:
        raise InputError("need at least two variants")
    report = survival(images, args.depth, name)
    text = format_survival([report])
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if args.json:
        Path(args.json).write_text(json.dumps({
            "set": name, "avg_gs": report.avg_survival, "max_gs": report.max_survival,
            "avg_fraction": report.avg_fraction, "max_fraction": report.max_fraction,
            "variants": report.n_variants, "gadgets": report.n_gadgets}) + "\n")
    return 0


COMPONENTS = {
    "esp": ("Executable space protection", BuildConfig(esp=True)),
    "ssp": ("Stack canaries", BuildConfig(ssp="default")),
    "urng": ("Random number generator", BuildConfig(rng="urng")),
}


def cmd_bench(args) -> int:
    resolve_options(args)
    mm = memory_map_for(args)
    programs = args.programs.split(",") if args.programs else corpus.program_names()
    components = args.components.split(",")
    out = []
    records = []
    for comp in components:
        if comp not in COMPONENTS and comp != "scramble":
            raise InputError(f"unknown component {comp!r}")
        rows = []
        for prog in programs:
            module = load_module(f"corpus:{prog}", mm)
            base = build_module(module, BuildConfig()).image
            wl = Scenario(prog, None, [], corpus.console_input(prog))
            if comp == "scramble":
                seed_base = bytes.fromhex(args.seed_base or DEFAULT_SEED_BASE)
                reps = []
                for i in range(args.runs):
                    cfg = BuildConfig(diversify=DiversifyConfig(max_stub_instructions=args.max_stub),
                                      seed=variant_seed(seed_base, i))
                    reps.append(measure_overhead(base, build_module(module, cfg).image, wl, 1, mm, sim_config(args)))
                r = replace(reps[0], code_prot=sum(x.code_prot for x in reps) / len(reps))
            else:
                cfg = COMPONENTS[comp][1]
                try:
                    r = measure_overhead(base, build_module(module, cfg).image, wl, args.runs, mm, sim_config(args),
                                         check_output=comp != "urng")
                except WorkloadDivergence as exc:
                    print(f"{prog}: {exc}", file=sys.stderr)
                    return 1
            rows.append((prog, r))
            records.append({"component": comp, "program": prog, **r.as_dict()})
        if comp == "scramble":
            out.append(format_code_size_table(f"Code diversification (average of {args.runs} variants)", rows))
        else:
            out.append(format_overhead_table(f"{COMPONENTS[comp][0]} ({args.runs} runs)", rows))
    text = "\n".join(out)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    if args.json:
        Path(args.json).write_text("".join(json.dumps(r) + "\n" for r in records))
    return 0


def cmd_rng(args) -> int:
    mode = ReseedMode(args.reseed)
    policy = ReseedPolicy(mode, args.threshold_bytes) if args.threshold_bytes else ReseedPolicy(mode)
    try:
        config = RngConfig(args.strength, 2 * args.strength, policy)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    device = SramDevice.generate(args.sram_size, args.device_seed)
    suv = sram_startup_sample(device, args.boot_seed, args.suv_bytes)
    try:
        state = rng_init(config, suv, EntropyModel(sram_size_bytes=args.sram_size),
                         [EntropySource.jitter(seed=args.boot_seed)])
    except InsufficientSeedEntropy as exc:
        raise InputError(str(exc)) from None
    data = random_bytes(state, args.bytes)
    if args.out == "-":
        sys.stdout.write(data.hex() + "\n")
    else:
        Path(args.out).write_bytes(data)
        print(f"wrote {len(data)} bytes to {args.out}; {state.reseeds} reseeds, "
              f"{state.credited_bits:g} bits credited")
    return 0


# ------------------------------------------------------------------ parser


def _build_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("build")
    g.add_argument("--ssp", choices=("off", "default", "all"), default=None)
    g.add_argument("--canary", choices=("plain", "terminator"), default=None)
    g.add_argument("--esp", action="store_const", const=True, default=None)
    g.add_argument("--rng", choices=("stub", "urng"), default=None)
    g.add_argument("--threshold", type=int, default=None, help="smallest protected buffer in bytes")
    g.add_argument("--diversify", action="store_const", const=True, default=None)
    g.add_argument("--seed", default=None, help=f"64 hex chars (fallback: ${SEED_ENV})")
    g.add_argument("--stubs", choices=("nop", "trap"), default=None)
    g.add_argument("--max-stub", type=int, default=None)
    g.add_argument("--no-reg-reorder", action="store_const", const=True, default=None)
    g.add_argument("--no-dead-code", action="store_const", const=True, default=None)
    g.add_argument("--no-func-reorder", action="store_const", const=True, default=None)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--map", default=None, help="memory-map config file")
    p.add_argument("--exec", choices=("flash", "ram"), default=None, help="execute from flash or from RAM")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uarmor", description="Mitigation toolkit for a toy MCU firmware format.")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn in (("build", cmd_build), ("diversify", cmd_diversify)):
        p = sub.add_parser(name, help="assemble, protect and encode a firmware image"
                           if name == "build" else "build a diversified image")
        p.add_argument("source", nargs="?", help="assembly file or corpus:<program>")
        p.add_argument("--out", help="image path (directory in batch mode)")
        p.add_argument("--from-manifest", help="rebuild from a manifest and check the image hash")
        p.add_argument("--variants", type=int, default=0, help="batch: number of variants")
        p.add_argument("--seed-base", help="batch: 64 hex chars")
        _common(p)
        _build_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("plan-mpu", help="print the MPU region plan")
    _common(p)
    p.add_argument("--image", help="take sensitive ranges from an image")
    p.add_argument("--sensitive", action="append", help="extra sensitive range start..end")
    p.add_argument("--merge-scb-mpu", action="store_true")
    p.add_argument("--unlocked", action="store_true", help="show the plan before locking")
    p.add_argument("--detail", action="store_true")
    p.set_defaults(func=cmd_plan_mpu)

    p = sub.add_parser("simulate", help="run an image or attack scenarios")
    p.add_argument("target", nargs="?", help="image file or corpus:<program>")
    p.add_argument("--scenario-file", help="scenario script")
    p.add_argument("--attack-suite", action="store_true", help="run the built-in attack scenarios")
    p.add_argument("--all-policies", action="store_true", help="attack suite: stack smash under every policy")
    p.add_argument("--policy", choices=POLICIES, default=None)
    p.add_argument("--boot-seed", type=int, default=0)
    p.add_argument("--device-seed", type=int, default=0)
    p.add_argument("--input", help="console input (backslash escapes allowed)")
    p.add_argument("--input-file")
    p.add_argument("--json", help="write one JSON record per expectation and metric")
    p.add_argument("-v", "--verbose", action="store_true", help="include the event log")
    _common(p)
    _build_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze-coverage", help="gadget survival across variants")
    p.add_argument("--variants-dir")
    p.add_argument("--program", help="corpus:<program> or source; variants generated in memory")
    p.add_argument("--variants", type=int, default=200)
    p.add_argument("--seed-base")
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--name")
    p.add_argument("--out")
    p.add_argument("--json")
    _common(p)
    _build_flags(p)
    p.set_defaults(func=cmd_analyze_coverage)

    p = sub.add_parser("bench", help="overhead tables over the corpus")
    p.add_argument("--programs", help="comma-separated corpus programs (default: all)")
    p.add_argument("--components", default="esp,ssp,urng,scramble")
    p.add_argument("--runs", type=int, default=25)
    p.add_argument("--seed-base")
    p.add_argument("--max-stub", type=int, default=4)
    p.add_argument("--policy", default=None)
    p.add_argument("--canary", default=None)
    p.add_argument("--out")
    p.add_argument("--json")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rng", help="emit generator output")
    p.add_argument("--bytes", type=int, default=1024)
    p.add_argument("--device-seed", type=int, default=0)
    p.add_argument("--boot-seed", type=int, default=0)
    p.add_argument("--strength", type=int, default=128)
    p.add_argument("--suv-bytes", type=int, default=2048)
    p.add_argument("--sram-size", type=int, default=64 * 1024)
    p.add_argument("--reseed", choices=("consistent", "periodic"), default="consistent")
    p.add_argument("--threshold-bytes", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_rng)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"uarmor: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"uarmor: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

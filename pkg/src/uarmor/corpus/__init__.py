"""Sample firmware programs used by tests, benchmarks and the CLI."""

from __future__ import annotations

import ast
from functools import lru_cache
from pathlib import Path

from ..asm import expand_includes, load_asm, parse_asm
from ..firmware import FirmwareModule
from ..memmap import LM3S6965, MemoryMap

CORPUS_DIR = Path(__file__).resolve().parent
LIBRARY = "lib"


def program_names() -> list[str]:
    return sorted(p.stem for p in CORPUS_DIR.glob("*.s") if p.stem != LIBRARY)


def source_path(name: str) -> Path:
    path = CORPUS_DIR / f"{name}.s"
    if not path.exists() or name == LIBRARY:
        raise KeyError(f"no corpus program {name!r}")
    return path


@lru_cache(maxsize=None)
def source_text(name: str) -> str:
    """Program text with includes expanded (self-contained)."""
    path = source_path(name)
    return expand_includes(path.read_text(), path.parent)


def load(name: str, memory_map: MemoryMap = LM3S6965) -> FirmwareModule:
    if memory_map is LM3S6965:
        return _load_default(name)
    return load_asm(source_path(name), memory_map)


@lru_cache(maxsize=None)
def _load_default(name: str) -> FirmwareModule:
    return parse_asm(source_text(name))


@lru_cache(maxsize=None)
def inputs() -> dict[str, bytes]:
    out = {}
    for raw in (CORPUS_DIR / "inputs.txt").read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = ast.literal_eval(value).encode()
    return out


def console_input(name: str) -> bytes:
    return inputs().get(name, b"")

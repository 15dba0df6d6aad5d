"""Source-to-image pipeline: runtime support, SSP, diversification, encoding."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .asm import parse_asm
from .firmware import FirmwareModule, FlatImage, GlobalDef, encode
from .sim import MPU_INIT_SYMBOL, MPU_LOCK_SYMBOL, RNG_STATE_SYMBOL
from .urng import state_footprint_bytes
from .uscramble import DiversificationSeed, DiversifyConfig, diversify
from .ussp import CanaryConfig, add_runtime, protect_module

# Stand-in for the MPU programming code: selects each region and writes its
# base/attributes, then enables the MPU. The lock stub stays executable.
MPU_RUNTIME = f"""
.func {MPU_INIT_SYMBOL} sensitive
    ENTER {{r4}}
    MOVI r4, #0
next_region:
    MPUWR r4, #8
    MPUWR r4, #12
    MPUWR r4, #16
    ADD r4, r4, #1
    MOVI r0, #8
    BLO r4, r0, next_region
    MOVI r0, #{1}
    MPUWR r0, #4
    LEAVE
.func {MPU_LOCK_SYMBOL} lock
    MOVI r0, #5
    MPUWR r0, #4
    RET
"""


@dataclass(frozen=True)
class BuildConfig:
    ssp: str = "off"                      # off | default | all
    canary: str = "plain"                 # plain | terminator
    esp: bool = False
    rng: str = "stub"                     # stub | urng
    diversify: DiversifyConfig | None = None
    seed: DiversificationSeed | None = None
    threshold: int = 8

    def __post_init__(self):
        if self.ssp not in ("off", "default", "all"):
            raise ValueError(f"bad ssp mode {self.ssp!r}")
        if self.canary not in ("plain", "terminator"):
            raise ValueError(f"bad canary style {self.canary!r}")
        if self.rng not in ("stub", "urng"):
            raise ValueError(f"bad rng {self.rng!r}")
        if self.diversify is not None and self.seed is None:
            raise ValueError("diversification needs a seed")

    @property
    def canary_config(self) -> CanaryConfig:
        return CanaryConfig(self.canary == "terminator", self.threshold, self.ssp == "all")


@dataclass
class BuildResult:
    module: FirmwareModule
    image: FlatImage
    protected: list[str] = field(default_factory=list)


def add_esp_runtime(module: FirmwareModule) -> FirmwareModule:
    if module.has_function(MPU_INIT_SYMBOL):
        return module
    extra = parse_asm(MPU_RUNTIME, module.memory_map).functions
    return replace(module, functions=module.functions + extra)


def add_rng_runtime(module: FirmwareModule) -> FirmwareModule:
    if any(g.name == RNG_STATE_SYMBOL for g in module.globals):
        return module
    return replace(module, globals=module.globals + (GlobalDef(RNG_STATE_SYMBOL, state_footprint_bytes()),))


def build_module(module: FirmwareModule, config: BuildConfig) -> BuildResult:
    protected: list[str] = []
    if config.ssp != "off":
        module, protected = protect_module(module, config.canary_config)
    elif config.diversify is not None and config.diversify.dead_code_kind.value == "trap":
        module = add_runtime(module)
    if config.esp:
        module = add_esp_runtime(module)
    if config.rng == "urng":
        module = add_rng_runtime(module)
    if config.diversify is not None:
        module = diversify(module, config.seed, config.diversify)
    return BuildResult(module, encode(module), protected)


def build_source(text: str, config: BuildConfig, memory_map=None) -> BuildResult:
    module = parse_asm(text) if memory_map is None else parse_asm(text, memory_map)
    return build_module(module, config)

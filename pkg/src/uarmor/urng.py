"""Sponge-based OS CSPRNG with boot-time SRAM seeding and reseed control.

Entropy is credited from declared per-source densities rather than
estimated online. The ledger on :class:`RngState` tracks what was credited
against what was output so the reseed bounds can be checked directly.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .keccak import SpongeState

log = logging.getLogger(__name__)

MAX_THRESHOLD_BYTES = 1 << 30
COUNTER_MASK = 0xFFFFFFFF
FULL_RESEED_BITS = 256


class InsufficientSeedEntropy(ValueError):
    pass


class ReseedEntropyStarvation(RuntimeWarning):
    """A periodic reseed could not credit a full reseed within its time budget."""


class ReseedMode(enum.Enum):
    CONSISTENT = "consistent"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class ReseedPolicy:
    mode: ReseedMode = ReseedMode.CONSISTENT
    threshold_bytes: int = MAX_THRESHOLD_BYTES
    # No value is given for the reseed time budget; None means unbounded.
    max_reseed_ms: float | None = None

    def __post_init__(self) -> None:
        if not 0 < self.threshold_bytes <= MAX_THRESHOLD_BYTES:
            raise ValueError("threshold must be in (0, 2**30] bytes")
        if self.max_reseed_ms is not None and self.max_reseed_ms < 0:
            raise ValueError("max_reseed_ms must be non-negative")


@dataclass(frozen=True)
class RngConfig:
    security_strength_bits: int = 128
    seed_min_entropy_bits: int = 256
    reseed_policy: ReseedPolicy = field(default_factory=ReseedPolicy)

    def __post_init__(self) -> None:
        if self.seed_min_entropy_bits < 2 * self.security_strength_bits:
            raise ValueError("seed entropy must be at least twice the security strength")


@dataclass(frozen=True)
class EntropyModel:
    sram_size_bytes: int = 64 * 1024
    sram_entropy_density: float = 0.05
    jitter_bits_per_sample: float = 0.5
    adc_bits_per_sample: float = 0.0

    def credited_seed_bits(self, n_bytes: int) -> float:
        return n_bytes * 8 * self.sram_entropy_density

    def min_sram_bytes(self, config: RngConfig) -> int:
        return math.ceil(config.seed_min_entropy_bits / (8 * self.sram_entropy_density))


@dataclass
class SramDevice:
    """Power-up behaviour of one simulated SRAM part.

    ``bit_biases[i]`` is the probability that bit i powers up as 1. Most
    cells are strongly skewed one way; the rest flip from boot to boot.
    """

    bit_biases: np.ndarray
    boot_noise: float = 0.0
    device_id: int = 0

    @classmethod
    def generate(cls, size_bytes: int, device_id: int, boot_noise: float = 0.0,
                 beta: float = 0.05) -> SramDevice:
        rng = np.random.default_rng([0x5AA5, device_id])
        biases = rng.beta(beta, beta, size=size_bytes * 8)
        return cls(biases, boot_noise, device_id)

    @property
    def size_bytes(self) -> int:
        return len(self.bit_biases) // 8


def sram_startup_sample(device: SramDevice, boot_seed: int, n_bytes: int | None = None) -> bytes:
    """SRAM contents at power-up for one boot; a pure function of its inputs."""
    n_bits = len(device.bit_biases) if n_bytes is None else min(len(device.bit_biases), 8 * n_bytes)
    rng = np.random.default_rng([0xB007, device.device_id, boot_seed])
    bits = rng.random(n_bits) < device.bit_biases[:n_bits]
    if device.boot_noise:
        bits ^= rng.random(n_bits) < device.boot_noise
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


@dataclass
class JitterModel:
    nominal_period: float = 1000.0
    stddev: float = 3.0
    quantum: float = 1.0
    credit_bits: float = 0.5
    sample_ms: float = 0.01


def jitter_sample(model: JitterModel, n: int, seed: int | np.random.Generator = 0) -> bytes:
    """Low byte of n quantized oscillator periods with Gaussian jitter."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng([0x717, seed])
    periods = model.nominal_period + rng.normal(0.0, model.stddev, n) if model.stddev else np.full(n, model.nominal_period)
    ticks = np.rint(periods / model.quantum).astype(np.int64)
    return (ticks & 0xFF).astype(np.uint8).tobytes()


class EntropySource:
    """A reseed source with a declared entropy credit per sample."""

    def __init__(self, name: str, bits_per_sample: float, sample_ms: float, draw):
        self.name = name
        self.bits_per_sample = bits_per_sample
        self.sample_ms = sample_ms
        self._draw = draw

    def draw(self, n: int) -> bytes:
        return self._draw(n)

    @classmethod
    def jitter(cls, model: JitterModel | None = None, seed: int = 0) -> EntropySource:
        model = model or JitterModel()
        gen = np.random.default_rng([0x717, seed])
        credit = model.credit_bits if model.stddev > 0 else 0.0
        buf = bytearray()

        def draw(n: int) -> bytes:
            # Samples are generated in blocks; the stream is the same either way.
            while len(buf) < n:
                buf.extend(jitter_sample(model, 4096, gen))
            out = bytes(buf[:n])
            del buf[:n]
            return out

        return cls("jitter", credit, model.sample_ms, draw)

    def __repr__(self) -> str:
        return f"EntropySource({self.name!r}, {self.bits_per_sample} bits/sample)"


# C-like layout of the generator's resident state, 4-byte aligned.
STATE_LAYOUT = (
    ("sponge_state", 25, 1),
    ("block_offset", 1, 1),
    ("phase", 1, 1),
    ("reseed_mode", 1, 1),
    ("reseed_counter", 4, 4),
    ("threshold", 4, 4),
    ("max_reseed_ms", 4, 4),
    ("owed_bits", 4, 4),
    ("credited_bits", 8, 4),
)


def state_footprint_bytes() -> int:
    size = 0
    for _, n, align in STATE_LAYOUT:
        size = -(-size // align) * align + n
    return -(-size // 4) * 4


@dataclass
class RngState:
    sponge: SpongeState
    config: RngConfig
    sources: list[EntropySource] = field(default_factory=list)
    reseed_counter: int = 0
    seed_bits: float = 0.0
    reseed_bits: float = 0.0
    output_bits: int = 0
    owed_bits: float = 0.0
    reseeds: int = 0
    sim_time_ms: float = 0.0
    events: list[tuple[str, dict]] = field(default_factory=list)

    @property
    def credited_bits(self) -> float:
        return self.seed_bits + self.reseed_bits

    @property
    def footprint_bytes(self) -> int:
        return state_footprint_bytes()


def rng_init(config: RngConfig, suv_bytes: bytes, model: EntropyModel,
             sources: list[EntropySource] | None = None) -> RngState:
    credited = model.credited_seed_bits(len(suv_bytes))
    if credited < config.seed_min_entropy_bits:
        raise InsufficientSeedEntropy(
            f"{len(suv_bytes)} SUV bytes credit {credited:g} bits, "
            f"need {config.seed_min_entropy_bits}")
    sponge = SpongeState().absorb(suv_bytes)
    sponge.squeeze(0)  # pad and enter the squeezing phase
    if sources is None:
        sources = [EntropySource.jitter()]
    return RngState(sponge, config, list(sources), seed_bits=credited)


def _gather(state: RngState, sources: list[EntropySource], need_bits: float,
            budget_ms: float | None) -> tuple[float, bytes]:
    credited = 0.0
    pool = bytearray()
    spent = 0.0
    usable = [s for s in sources if s.bits_per_sample > 0]
    if not usable:
        return 0.0, bytes(pool)
    while credited < need_bits:
        progressed = False
        for src in usable:
            if budget_ms is not None and spent + src.sample_ms > budget_ms + 1e-9:
                continue
            pool += src.draw(1)
            credited += src.bits_per_sample
            spent += src.sample_ms
            progressed = True
            if credited >= need_bits:
                break
        if not progressed:
            break
    state.sim_time_ms += spent
    return credited, bytes(pool)


def reseed_control(state: RngState, sources: list[EntropySource] | None = None) -> RngState:
    sources = state.sources if sources is None else sources
    policy = state.config.reseed_policy
    if policy.mode is ReseedMode.CONSISTENT:
        if state.owed_bits <= 0:
            return state
        credited, pool = _gather(state, sources, state.owed_bits, None)
        if pool:
            state.sponge.absorb(pool)
        state.reseed_bits += credited
        state.owed_bits -= credited
        if state.owed_bits > 0:
            state.events.append(("starvation", {"owed": state.owed_bits}))
            log.warning("consistent reseed short by %.2f bits", state.owed_bits)
        return state

    if state.reseed_counter < policy.threshold_bytes:
        return state
    credited, pool = _gather(state, sources, FULL_RESEED_BITS, policy.max_reseed_ms)
    if pool:
        state.sponge.absorb(pool)
    state.reseed_bits += credited
    state.reseeds += 1
    state.reseed_counter = 0
    state.events.append(("reseed", {"credited": credited}))
    if credited < FULL_RESEED_BITS:
        # Availability wins: record and keep producing output.
        warning = ReseedEntropyStarvation(f"periodic reseed credited {credited:g} of {FULL_RESEED_BITS} bits")
        state.events.append(("starvation", {"credited": credited, "error": warning}))
        log.warning("%s", warning)
    return state


def fold64(word: int) -> int:
    return ((word >> 32) ^ word) & 0xFFFFFFFF


def rand32(state: RngState) -> int:
    """XOR-fold one 64-bit squeeze into a 32-bit value, then run reseed control."""
    value = fold64(int.from_bytes(state.sponge.squeeze(64), "little"))
    state.output_bits += 64
    state.reseed_counter = (state.reseed_counter + 8) & COUNTER_MASK
    if state.config.reseed_policy.mode is ReseedMode.CONSISTENT:
        state.owed_bits += 1.0
    reseed_control(state)
    return value


def random_bytes(state: RngState, n: int) -> bytes:
    out = bytearray()
    while len(out) < n:
        out += rand32(state).to_bytes(4, "little")
    return bytes(out[:n])

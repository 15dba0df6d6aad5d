import math

import numpy as np
import pytest

from uarmor.urng import (
    EntropyModel,
    EntropySource,
    InsufficientSeedEntropy,
    JitterModel,
    ReseedEntropyStarvation,
    ReseedMode,
    ReseedPolicy,
    RngConfig,
    SramDevice,
    fold64,
    jitter_sample,
    rand32,
    reseed_control,
    rng_init,
    sram_startup_sample,
    state_footprint_bytes,
)

MODEL = EntropyModel()


def _state(mode=ReseedMode.CONSISTENT, **kw):
    cfg = RngConfig(reseed_policy=ReseedPolicy(mode, **kw))
    return rng_init(cfg, bytes(range(256)) * 4, MODEL)


def test_config_invariants():
    with pytest.raises(ValueError):
        RngConfig(security_strength_bits=128, seed_min_entropy_bits=200)
    with pytest.raises(ValueError):
        ReseedPolicy(threshold_bytes=(1 << 30) + 1)


def test_min_sram_bound():
    assert MODEL.min_sram_bytes(RngConfig()) == 640


def test_seed_boundary():
    rng_init(RngConfig(), bytes(640), MODEL)
    with pytest.raises(InsufficientSeedEntropy):
        rng_init(RngConfig(), bytes(639), MODEL)


def test_sram_forced_ones():
    dev = SramDevice(np.ones(64 * 8), boot_noise=0.0)
    assert sram_startup_sample(dev, 3) == b"\xff" * 64


def test_sram_deterministic_and_boot_dependent():
    dev = SramDevice.generate(1024, device_id=4)
    assert sram_startup_sample(dev, 9) == sram_startup_sample(dev, 9)
    assert sram_startup_sample(dev, 9) != sram_startup_sample(dev, 10)
    other = SramDevice.generate(1024, device_id=5)
    assert sram_startup_sample(dev, 9) != sram_startup_sample(other, 9)


def test_boot_hamming_distance_matches_binomial_model():
    dev = SramDevice.generate(512, device_id=11, boot_noise=0.03)
    n = dev.bit_biases.size
    # P(bit=1) per boot, then P(two independent boots differ) per bit.
    q = dev.bit_biases * (1 - dev.boot_noise) + (1 - dev.bit_biases) * dev.boot_noise
    p_diff = 2 * q * (1 - q)
    expected = p_diff.sum()
    sigma_pair = math.sqrt((p_diff * (1 - p_diff)).sum())
    boots = [np.unpackbits(np.frombuffer(sram_startup_sample(dev, b), np.uint8)) for b in range(1000)]
    dists = [int((boots[i] ^ boots[i + 1]).sum()) for i in range(0, 1000, 2)]
    mean = float(np.mean(dists))
    assert abs(mean - expected) <= 3 * sigma_pair / math.sqrt(len(dists))
    assert n == 512 * 8


def test_two_devices_same_boot_seed_distinct_outputs():
    firsts = set()
    for dev_id in range(200):
        dev = SramDevice.generate(1024, device_id=dev_id)
        st = rng_init(RngConfig(), sram_startup_sample(dev, 1), MODEL)
        firsts.add(rand32(st))
    assert len(firsts) == 200


def test_boot_freshness_over_100_boots():
    dev = SramDevice.generate(1024, device_id=3)
    firsts = {rand32(rng_init(RngConfig(), sram_startup_sample(dev, b), MODEL)) for b in range(100)}
    assert len(firsts) == 100


def test_fold64():
    assert fold64(0x0123456789ABCDEF) == 0x88888888


def test_rand32_equal_states_equal_outputs():
    a, b = _state(), _state()
    assert [rand32(a) for _ in range(20)] == [rand32(b) for _ in range(20)]


def test_consistent_one_bit_per_64_output_bits():
    st = _state()
    before = st.reseed_bits
    rand32(st)
    assert st.reseed_bits - before >= 1


def test_consistent_full_reseed_every_2kb():
    st = _state()
    for _ in range(2048 // 8):
        rand32(st)
    assert st.output_bits == 2048 * 8
    assert st.reseed_bits >= 256


def test_consistent_ledger_monotone():
    st = _state()
    prev = st.credited_bits
    for _ in range(300):
        rand32(st)
        assert st.credited_bits >= prev
        assert st.reseed_bits >= math.ceil(st.output_bits / 64)
        prev = st.credited_bits


def test_periodic_threshold():
    st = _state(ReseedMode.PERIODIC, threshold_bytes=4096)
    for _ in range(4096 // 8 - 1):
        rand32(st)
    assert st.reseed_counter == 4096 - 8 and st.reseeds == 0
    rand32(st)
    assert st.reseeds == 1 and st.reseed_counter == 0
    assert st.reseed_bits >= 256


def test_periodic_full_threshold_counter_semantics():
    st = _state(ReseedMode.PERIODIC)
    st.reseed_counter = (1 << 30) - 16
    rand32(st)
    assert st.reseed_counter == (1 << 30) - 8 and st.reseeds == 0
    rand32(st)
    assert st.reseeds == 1 and st.reseed_counter == 0


def test_periodic_starvation_is_logged_not_raised(caplog):
    jm = JitterModel(credit_bits=0.5, sample_ms=1.0)
    st = _state(ReseedMode.PERIODIC, threshold_bytes=8, max_reseed_ms=400.0)
    st.sources = [EntropySource.jitter(jm)]
    rand32(st)
    kinds = [k for k, _ in st.events]
    assert "starvation" in kinds
    info = dict(st.events)["starvation"]
    assert info["credited"] == 200.0
    assert isinstance(info["error"], ReseedEntropyStarvation)
    assert st.reseed_counter == 0
    rand32(st)  # output keeps flowing


def test_reseed_control_noop_below_threshold():
    st = _state(ReseedMode.PERIODIC, threshold_bytes=64)
    before = bytes(st.sponge.lanes)
    reseed_control(st)
    assert bytes(st.sponge.lanes) == before


def test_output_pure_function_of_inputs():
    def run():
        st = rng_init(RngConfig(), bytes(range(200)) * 4, MODEL, [EntropySource.jitter(seed=5)])
        return [rand32(st) for _ in range(50)]
    assert run() == run()


def test_jitter_zero_stddev():
    jm = JitterModel(stddev=0.0)
    data = jitter_sample(jm, 64)
    assert len(set(data)) == 1
    assert EntropySource.jitter(jm).bits_per_sample == 0


def test_jitter_reproducible():
    jm = JitterModel()
    assert jitter_sample(jm, 100, seed=3) == jitter_sample(jm, 100, seed=3)
    assert jitter_sample(jm, 100, seed=3) != jitter_sample(jm, 100, seed=4)


def collision_min_entropy_lower_bound(samples: np.ndarray) -> float:
    # Collision probability from disjoint pairs with a 99% upper bound;
    # p_max <= sqrt(P_coll) so H_min >= -log2(sqrt(P_coll)).
    pairs = samples[: samples.size // 2 * 2].reshape(-1, 2)
    hits = float((pairs[:, 0] == pairs[:, 1]).mean())
    upper = min(1.0, hits + 2.576 * math.sqrt(max(hits * (1 - hits), 1e-12) / pairs.shape[0]))
    return -0.5 * math.log2(upper)


def test_jitter_min_entropy_positive():
    jm = JitterModel(stddev=3.0, quantum=1.0)
    samples = np.frombuffer(jitter_sample(jm, 10**6, seed=1), np.uint8)
    assert collision_min_entropy_lower_bound(samples) > 0.5
    const = np.frombuffer(jitter_sample(JitterModel(stddev=0.0), 10**4), np.uint8)
    assert collision_min_entropy_lower_bound(const) == 0


def test_footprint():
    assert state_footprint_bytes() == 52


def test_one_mib_monobit_and_runs():
    from uarmor.stats import monobit_test, runs_test
    st = rng_init(RngConfig(), bytes(range(256)) * 4, MODEL)
    data = b"".join(rand32(st).to_bytes(4, "little") for _ in range((1 << 20) // 4))
    assert monobit_test(data) > 0.01
    assert runs_test(data) > 0.01

"""Average integrate-and-fire generation, codecs, matvec, threshold scaling."""

import numpy as np
import pytest

from spikescan.quantize import Quantizer, quantize_with_context
from spikescan.spike import (SpikeSite, SpikeTrain, average_if_encode, decode,
                             encode_quantized, if_spike_count, pow2_shift,
                             spiking_matvec, threshold_scale)

GRID_SNAP = 1e-9


def literal_if_simulator(drive, T, theta):
    """Line-by-line average-IF recurrence: average, integrate, fire, subtract."""
    drive = np.asarray(drive, dtype=np.float64)
    avg = drive / T
    v = np.zeros_like(drive)
    bits = np.zeros((T,) + drive.shape)
    for t in range(T):
        v = v + avg
        fire = v >= theta * (1.0 - GRID_SNAP)
        bits[t] = fire
        v = v - theta * fire
    return bits


def test_worked_example_two_thirds_average():
    # total drive 2 over T=3 steps at threshold 1: potential walks 2/3, 4/3, 1
    train = average_if_encode(np.array([2.0]), T=3, theta=1.0)
    assert list(train.bits[:, 0]) == [0, 1, 1]
    assert train.counts[0] == 2


def test_zero_and_negative_drive_never_fire():
    train = average_if_encode(np.array([0.0, -0.5, -100.0]), T=4, theta=0.7)
    assert train.total_spikes == 0


def test_saturated_drive_fires_every_step():
    train = average_if_encode(np.array([3.0 * 0.9]), T=3, theta=0.9)
    assert list(train.bits[:, 0]) == [1, 1, 1]


def test_matches_literal_simulator_on_1000_random_cases():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        T = int(rng.integers(1, 9))
        theta = float(rng.uniform(0.01, 3.0))
        drive = float(rng.uniform(-theta, (T + 1.5) * theta))
        got = average_if_encode(np.array([drive]), T, theta).bits[:, 0]
        want = literal_if_simulator(np.array([drive]), T, theta)[:, 0]
        assert np.array_equal(got, want), (drive, T, theta)


def test_integer_multiples_of_theta_fire_exactly_m():
    rng = np.random.default_rng(7)
    for _ in range(2000):
        T = int(rng.integers(1, 12))
        theta = float(rng.uniform(0.001, 5.0))
        m = int(rng.integers(0, T + 1))
        counts = if_spike_count(np.array([m * theta]), T, theta)
        assert counts[0] == m, (m, T, theta)


def test_encode_validates_window_and_threshold():
    with pytest.raises(ValueError):
        average_if_encode(np.zeros(2), T=0, theta=1.0)
    with pytest.raises(ValueError):
        average_if_encode(np.zeros(2), T=3, theta=0.0)


class TestQuantizedCodec:
    Q = Quantizer(bits=2, alpha=0.5, beta=0.0, name="codec")

    def test_count_equals_code(self):
        train = encode_quantized(np.array([1.0]), self.Q)
        assert train.T == 3
        assert train.counts[0] == 2

    def test_offset_maps_to_silence(self):
        q = Quantizer(bits=2, alpha=0.5, beta=-0.2, name="o")
        train = encode_quantized(np.array([-0.2]), q)
        assert train.counts[0] == 0
        assert decode(train)[0] == -0.2

    def test_max_code_saturates_window(self):
        train = encode_quantized(np.array([1.5]), self.Q)
        assert train.counts[0] == 3 == train.T

    def test_roundtrip_is_bit_exact(self):
        rng = np.random.default_rng(0)
        q = Quantizer(bits=3, alpha=0.37, beta=0.21, name="rt")
        xq, _ = quantize_with_context(rng.normal(size=300) * 2, q)
        assert np.array_equal(decode(encode_quantized(xq, q)), xq)

    def test_off_grid_input_is_rejected_with_location(self):
        vals = np.array([0.5, 0.31, 1.0])
        with pytest.raises(ValueError) as e:
            encode_quantized(vals, self.Q)
        assert "1" in str(e.value)  # names the offending index

    def test_symmetric_quantizer_rejected(self):
        q = Quantizer(bits=2, alpha=0.5, symmetric=True, name="sym")
        with pytest.raises(ValueError):
            encode_quantized(np.array([0.5]), q)


class TestSpikingMatvec:
    def test_zero_train_zero_accs(self):
        q = Quantizer(bits=2, alpha=0.5, beta=0.0, name="z")
        s = encode_quantized(np.zeros(4), q)
        w = np.ones((4, 3))
        out, accs = spiking_matvec(w, np.zeros(3), s)
        assert np.allclose(out, 0.0) and accs == 0

    def test_single_spike_accumulates_one_column(self):
        q = Quantizer(bits=2, alpha=0.5, beta=0.0, name="s1")
        xq = np.array([0.0, 0.5, 0.0])
        s = encode_quantized(xq, q)
        w = np.arange(12, dtype=float).reshape(3, 4)
        out, accs = spiking_matvec(w, np.zeros(4), s)
        assert np.allclose(out, 0.5 * w[1])
        assert accs == 4

    def test_matches_dense_linear(self):
        rng = np.random.default_rng(3)
        q = Quantizer(bits=2, alpha=0.3, beta=-0.1, name="d")
        for _ in range(20):
            xq, _ = quantize_with_context(rng.normal(size=6), q)
            s = encode_quantized(xq, q)
            w = rng.normal(size=(6, 5))
            b = rng.normal(size=5)
            out, accs = spiking_matvec(w, b, s)
            assert np.max(np.abs(out - (xq @ w + b))) < 1e-10
            assert accs == s.total_spikes * 5

    def test_shape_mismatch_is_loud(self):
        q = Quantizer(bits=2, alpha=0.5, name="m")
        s = encode_quantized(np.zeros(4), q)
        with pytest.raises(ValueError):
            spiking_matvec(np.ones((5, 2)), np.zeros(2), s)


class TestThresholdScale:
    def site(self, theta=0.5, T=3):
        return SpikeSite(name="s", theta=theta, scale=theta, offset=0.1, T=T)

    def test_saturated_counts_collapse(self):
        site = self.site()
        pre = np.array([10.0, 0.1 + 3 * 0.5, 0.0])  # counts 3, 3, 0
        before = site.decode_counts(site.encode_counts(pre))
        scaled = threshold_scale(site, 3)
        counts = scaled.encode_counts(pre)
        assert list(counts) == [1, 1, 0]
        after = scaled.decode_counts(counts)
        assert np.array_equal(before, after)

    def test_rate_drops_by_factor(self):
        site = self.site()
        pre = np.full(100, 5.0)  # saturates every neuron
        assert site.encode_counts(pre).sum() == 300
        scaled = threshold_scale(site, 3)
        assert scaled.encode_counts(pre).sum() == 100

    def test_factor_must_divide_window(self):
        with pytest.raises(ValueError):
            threshold_scale(self.site(T=3), 2)

    def test_factor_below_one_rejected(self):
        with pytest.raises(ValueError):
            threshold_scale(self.site(), 0)

    def test_identity_factor(self):
        site = self.site()
        same = threshold_scale(site, 1)
        assert same == site


def test_pow2_shift_is_exact_ldexp():
    v = np.array([1.5, -2.0, 0.75])
    e = np.array([-3, 0, -1])
    assert np.array_equal(pow2_shift(v, e), v * np.exp2(e))
    with pytest.raises(ValueError):
        pow2_shift(v, np.array([0.5, 0.0, 0.0]))


def test_spike_train_invariants():
    train = average_if_encode(np.array([[1.0, 2.0], [0.0, 3.0]]), T=3, theta=1.0)
    assert train.bits.shape == (3, 2, 2)
    assert set(np.unique(train.bits)) <= {0.0, 1.0}
    assert train.total_spikes == int(train.counts.sum())

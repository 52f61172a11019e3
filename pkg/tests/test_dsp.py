import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reverb_t60.dsp import (ComplexSpectrogram, SampleBuffer, StftConfig, convolve, hann_window,
                            istft, load_spectrogram, magnitude, read_wav, resample,
                            save_spectrogram, spectral_energy, stft, write_wav)
from reverb_t60.exceptions import InvalidArgumentError


def dft_oracle(frame, n_fft):
    # O(N^2) DFT straight from the definition
    n = np.arange(len(frame))
    k = np.arange(n_fft // 2 + 1)[:, None]
    return np.sum(frame * np.exp(-2j * np.pi * k * n / n_fft), axis=1)


class TestHann:
    def test_len4(self):
        np.testing.assert_allclose(hann_window(4), [0, 0.5, 1, 0.5], atol=1e-15)

    def test_peak_at_half(self):
        assert hann_window(320)[160] == pytest.approx(1.0)

    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            hann_window(1)

    def test_overlap_add_constant(self):
        w = hann_window(320)
        acc = np.zeros(320 * 8)
        for s in range(0, acc.size - 320 + 1, 160):
            acc[s:s + 320] += w
        np.testing.assert_allclose(acc[320:-320], 1.0, atol=1e-12)

    def test_squared_overlap_add_constant_at_quarter_hop(self):
        w2 = hann_window(320) ** 2
        acc = np.zeros(320 * 8)
        for s in range(0, acc.size - 320 + 1, 80):
            acc[s:s + 320] += w2
        np.testing.assert_allclose(acc[320:-320], 1.5, atol=1e-12)


class TestStft:
    def test_shape_four_seconds(self):
        S = stft(np.zeros(64000))
        assert S.shape == (399, 161)

    def test_zero_input(self):
        assert not np.any(stft(np.zeros(1000)).values)

    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            stft(np.zeros(319))

    def test_matches_dft_definition(self, rng):
        x = rng.standard_normal(1000)
        S = stft(x)
        w = hann_window(320)
        for l in (0, 3):
            ref = dft_oracle(x[l * 160:l * 160 + 320] * w, 320)
            np.testing.assert_allclose(S.values[l], ref, rtol=1e-9, atol=1e-9)

    def test_sine_energy_concentrated(self):
        t = np.arange(16000) / 16000
        S = stft(np.sin(2 * np.pi * 1000 * t))
        p = np.abs(S.values) ** 2
        assert p[:, 19:22].sum() / p.sum() > 0.99

    def test_parseval(self, rng):
        x = rng.standard_normal(64000)
        S = stft(x)
        w = hann_window(320)
        frames = np.lib.stride_tricks.sliding_window_view(x, 320)[::160] * w
        assert spectral_energy(S) == pytest.approx(np.sum(frames ** 2), rel=1e-6)


class TestIstft:
    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, st.integers(960, 4000),
                  elements=st.floats(-1, 1, allow_nan=False)))
    def test_round_trip(self, x):
        y = istft(stft(x)).samples
        n = (len(x) - 320) // 160 * 160 + 320
        inner = slice(160, n - 160)
        scale = max(np.max(np.abs(x)), 1e-12)
        assert np.max(np.abs(y[inner] - x[inner])) <= 1e-6 * scale

    def test_zero(self):
        S = ComplexSpectrogram(np.zeros((5, 161), complex), StftConfig(), 16000, 960)
        assert not np.any(istft(S).samples)

    def test_single_frame_localized(self, rng):
        v = np.zeros((6, 161), complex)
        v[2] = rng.standard_normal(161)
        y = istft(ComplexSpectrogram(v, StftConfig(), 16000, 1120)).samples
        support = np.nonzero(np.abs(y) > 1e-12)[0]
        assert support.min() >= 320 and support.max() < 640

    def test_bad_shape(self):
        with pytest.raises(InvalidArgumentError):
            istft(ComplexSpectrogram(np.zeros((3, 100), complex)))


class TestMagnitude:
    def test_pythagorean(self):
        assert magnitude(np.array([[3 + 4j]]))[0, 0] == 5.0

    def test_zero(self):
        assert not np.any(magnitude(np.zeros((2, 3), complex)))

    def test_conjugates(self, rng):
        z = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
        np.testing.assert_array_equal(magnitude(z), magnitude(np.conj(z)))

    @given(st.complex_numbers(max_magnitude=1e6), st.complex_numbers(max_magnitude=1e6))
    def test_lipschitz(self, a, b):
        ma, mb = magnitude(np.array([a])), magnitude(np.array([b]))
        assert ma[0] >= 0
        assert abs(ma[0] - mb[0]) <= abs(a - b) * (1 + 1e-12) + 1e-9


class TestConvolve:
    def test_identity(self, rng):
        x = rng.standard_normal(50)
        np.testing.assert_array_equal(convolve(x, [1.0]).samples, x)

    def test_small(self):
        np.testing.assert_allclose(convolve([1.0, 1.0], [1.0, 1.0]).samples, [1, 2, 1])

    def test_against_brute_force(self, rng):
        x, h = rng.standard_normal(1000), rng.standard_normal(500)
        ref = np.zeros(1499)
        for i, xi in enumerate(x):
            ref[i:i + 500] += xi * h
        out = convolve(x, h, method="fft").samples
        assert np.max(np.abs(out - ref)) <= 1e-9 * np.max(np.abs(ref))

    def test_commutative_and_linear(self, rng):
        a, b, c = rng.standard_normal(30), rng.standard_normal(20), rng.standard_normal(30)
        np.testing.assert_allclose(convolve(a, b).samples, convolve(b, a).samples, atol=1e-12)
        lhs = convolve(2 * a + c, b).samples
        rhs = 2 * convolve(a, b).samples + convolve(c, b).samples
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_rate_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            convolve(SampleBuffer(np.ones(4), 16000), SampleBuffer(np.ones(4), 8000))


class TestResample:
    def test_sine_frequency_preserved(self):
        t = np.arange(48000) / 48000
        out = resample(SampleBuffer(np.sin(2 * np.pi * 1000 * t), 48000), 16000)
        assert out.sample_rate == 16000 and len(out) == 16000
        spec = np.abs(np.fft.rfft(out.samples * np.hanning(len(out))))
        assert np.argmax(spec) * 16000 / len(out) == pytest.approx(1000, abs=1.0)

    def test_identity(self, rng):
        buf = SampleBuffer(rng.standard_normal(100), 16000)
        assert resample(buf, 16000) is buf

    def test_dc(self):
        out = resample(SampleBuffer(np.full(4800, 0.3), 48000), 16000).samples
        np.testing.assert_allclose(out[200:-200], 0.3, rtol=1e-3)

    def test_passband_ripple(self):
        fs = 48000
        t = np.arange(fs) / fs
        for f in (500.0, 3000.0, 7000.0):
            out = resample(SampleBuffer(np.sin(2 * np.pi * f * t), fs), 16000).samples
            mid = out[2000:-2000]
            gain_db = 20 * np.log10(np.sqrt(2) * np.sqrt(np.mean(mid ** 2)))
            assert abs(gain_db) < 0.1


class TestIO:
    def test_float_round_trip(self, tmp_path, rng):
        buf = SampleBuffer(rng.uniform(-0.5, 0.5, 100), 16000)
        write_wav(tmp_path / "a.wav", buf)
        back = read_wav(tmp_path / "a.wav")
        np.testing.assert_allclose(back.samples, buf.samples, atol=1e-7)
        assert back.sample_rate == 16000

    def test_pcm16(self, tmp_path):
        buf = SampleBuffer(np.array([0.0, 0.5, -0.5]), 8000)
        write_wav(tmp_path / "a.wav", buf, fmt="pcm16")
        np.testing.assert_allclose(read_wav(tmp_path / "a.wav").samples, buf.samples, atol=1e-4)

    def test_multichannel_rejected(self, tmp_path):
        from scipy.io import wavfile
        wavfile.write(tmp_path / "st.wav", 16000, np.zeros((10, 2), np.float32))
        with pytest.raises(InvalidArgumentError, match="mono"):
            read_wav(tmp_path / "st.wav")

    def test_spectrogram_dump(self, tmp_path, rng):
        mag = rng.random((7, 161)).astype(np.float32)
        save_spectrogram(tmp_path / "m.bin", mag)
        raw = (tmp_path / "m.bin").read_bytes()
        assert np.frombuffer(raw[:8], "<i4").tolist() == [7, 161]
        np.testing.assert_array_equal(load_spectrogram(tmp_path / "m.bin"), mag)


class TestSampleBuffer:
    def test_rejects_nan(self):
        with pytest.raises(InvalidArgumentError):
            SampleBuffer(np.array([0.0, np.nan]), 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(InvalidArgumentError):
            SampleBuffer(np.zeros(3), 0)

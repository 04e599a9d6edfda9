import math

import numpy as np
import pytest

from ms2s.errors import FormatError, InputError
from ms2s.features import (
    AudioClip,
    FeatureMatrix,
    fbank,
    load_features,
    mel_center_frequencies,
    read_wav,
    save_features,
    standardize,
    write_wav,
)


def tone(freq, seconds, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


class TestWav:
    def test_silence(self, tmp_path):
        write_wav(tmp_path / "s.wav", AudioClip(np.zeros(16000)))
        clip = read_wav(tmp_path / "s.wav")
        assert len(clip.samples) == 16000 and clip.sample_rate == 16000
        assert not clip.samples.any()

    def test_pcm16_full_scale(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "m.wav", 16000, np.array([32767, -32768, 0], dtype=np.int16))
        s = read_wav(tmp_path / "m.wav").samples
        assert s[0] == pytest.approx(32767 / 32768)
        assert s[1] == -1.0

    def test_pcm16_round_trip_is_sample_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=4000)
        clip = AudioClip(ints / 32768.0)
        write_wav(tmp_path / "r.wav", clip)
        back = read_wav(tmp_path / "r.wav").samples
        np.testing.assert_array_equal(np.round(back * 32768).astype(int), ints)

    def test_float32_and_channel_select(self, tmp_path):
        from scipy.io import wavfile

        stereo = np.stack([np.full(400, 0.25), np.full(400, -0.5)], axis=1).astype(np.float32)
        wavfile.write(tmp_path / "f.wav", 16000, stereo)
        assert read_wav(tmp_path / "f.wav", channel=1).samples[0] == -0.5

    def test_malformed_header(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFFxxxxWAVEjunk")
        with pytest.raises(FormatError):
            read_wav(tmp_path / "bad.wav")

    def test_wrong_rate_rejected(self):
        with pytest.raises(InputError):
            AudioClip(np.zeros(10), 8000)


class TestFbank:
    def test_silence_is_log_floor(self):
        fm = fbank(AudioClip(np.zeros(16000)))
        np.testing.assert_allclose(fm.frames, math.log(1e-10))
        assert fm.frames[0, 0] == pytest.approx(-23.02585093, abs=1e-8)

    def test_pure_tone_peak_bin(self):
        fm = fbank(tone(1000.0, 1.0))
        centers = mel_center_frequencies(40)
        nearest = int(np.argmin(np.abs(centers - 1000.0)))
        peaks = fm.frames.argmax(axis=1)
        assert np.all(peaks == nearest)

    def test_frame_count(self):
        clip = AudioClip(np.zeros(8 * 16000))
        assert fbank(clip).T == 798
        assert fbank(clip, target_frames=800).T == 800

    def test_too_short(self):
        with pytest.raises(InputError):
            fbank(AudioClip(np.zeros(399)))

    def test_shift_covariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=16000) * 0.1
        a = fbank(AudioClip(x)).frames
        b = fbank(AudioClip(np.concatenate([rng.normal(size=160) * 0.1, x]))).frames
        np.testing.assert_allclose(b[1:], a[: len(b) - 1], atol=1e-6)

    def test_energy_scaling(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=8000) * 0.1
        c = 3.0
        a = fbank(AudioClip(x)).frames
        b = fbank(AudioClip(c * x)).frames
        above = a > math.log(1e-10) + 1.0
        np.testing.assert_allclose((b - a)[above], 2 * math.log(c), atol=1e-6)

    def test_deterministic(self):
        clip = tone(440.0, 0.5)
        np.testing.assert_array_equal(fbank(clip).frames, fbank(clip).frames)


class TestStandardize:
    def test_constant_matrix(self):
        out = standardize(FeatureMatrix(np.full((10, 4), 3.0)))
        np.testing.assert_array_equal(out.frames, 0.0)

    def test_fixed_point_and_moments(self):
        rng = np.random.default_rng(3)
        fm = standardize(FeatureMatrix(rng.normal(3.0, 2.0, size=(200, 5))))
        np.testing.assert_allclose(fm.frames.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(fm.frames.std(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(standardize(fm).frames, fm.frames, atol=1e-6)


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    fm = FeatureMatrix(rng.normal(size=(7, 40)).astype(np.float32).astype(np.float64))
    save_features(tmp_path / "x.feat", fm)
    raw = (tmp_path / "x.feat").read_bytes()
    assert raw[:8] == b"MS2SFEAT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 7
    assert int.from_bytes(raw[16:20], "little") == 40
    assert int.from_bytes(raw[20:24], "little") == 10
    back = load_features(tmp_path / "x.feat")
    np.testing.assert_array_equal(back.frames, fm.frames)
    assert back.frame_hop_s == 0.01


def test_truncated_cache_rejected(tmp_path):
    fm = FeatureMatrix(np.zeros((3, 4)))
    save_features(tmp_path / "x.feat", fm)
    p = tmp_path / "x.feat"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_features(p)

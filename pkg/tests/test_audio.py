import math

import numpy as np
import pytest

from smil import audio
from smil.audio import (
    AudioFormatError,
    MfccConfig,
    WaveClip,
    mel_filterbank,
    mfcc_corpus,
    mfcc_raw,
)


def sine(freq, seconds=0.5, phase=0.0, amp=0.4):
    t = np.arange(int(seconds * audio.SAMPLE_RATE)) / audio.SAMPLE_RATE
    return WaveClip(amp * np.sin(2 * math.pi * freq * t + phase), audio.SAMPLE_RATE)


def direct_dft_power(frame, fft_size):
    # independent oracle: explicit DFT sum
    n = np.arange(fft_size)
    padded = np.zeros(fft_size)
    padded[: frame.size] = frame
    k = np.arange(fft_size // 2 + 1)
    basis = np.exp(-2j * math.pi * np.outer(k, n) / fft_size)
    return np.abs(basis @ padded) ** 2


# ------------------------------------------------------------- filterbank


def test_two_filters_share_exactly_one_support_bin():
    bank = mel_filterbank(2, 8, 8000, 0.0, 4000.0)
    assert bank.shape == (2, 5)
    shared = (bank[0] > 0) & (bank[1] > 0)
    assert shared.sum() == 1


def test_filter_centers_monotone():
    centers = audio.filter_centers_hz(26, 0.0, 4000.0)
    assert np.all(np.diff(centers) > 0)


def test_filterbank_rows_nonnegative_with_positive_sum():
    bank = mel_filterbank(26, 512, 8000, 0.0, 4000.0)
    assert np.all(bank >= 0)
    assert np.all(bank.sum(axis=1) > 0)


def test_440hz_sine_peaks_at_nearest_filter():
    bank = mel_filterbank(26, 512, 8000, 0.0, 4000.0)
    centers = audio.filter_centers_hz(26, 0.0, 4000.0)
    frame = sine(440.0).samples[:512] * np.hanning(512)
    power = direct_dft_power(frame, 512)
    responses = bank @ power
    assert responses.argmax() == np.abs(centers - 440.0).argmin()


def test_filterbank_invalid_range_rejected():
    with pytest.raises(AudioFormatError, match="range"):
        mel_filterbank(26, 512, 8000, 5000.0, 4000.0)
    with pytest.raises(AudioFormatError, match="range"):
        mel_filterbank(26, 512, 8000, 0.0, 4001.0)


# ------------------------------------------------------------------ mfcc


def test_all_zero_clip_concentrates_in_coefficient_zero():
    clip = WaveClip(np.zeros(4000), audio.SAMPLE_RATE)
    coeffs = mfcc_raw(clip)
    # log-energies are all log(10^-10); DCT of a constant lives in c0
    expected_c0 = math.log(1e-10) * math.sqrt(26)
    np.testing.assert_allclose(coeffs[:, 0], expected_c0, rtol=1e-12)
    assert np.abs(coeffs[:, 1:]).max() < 1e-12


@pytest.mark.parametrize("n_samples", [500, 4000, 8123, 30000])
def test_output_shape_is_20x20(n_samples):
    clip = WaveClip(np.random.default_rng(n_samples).uniform(-0.5, 0.5, n_samples), audio.SAMPLE_RATE)
    assert mfcc_raw(clip).shape == (20, 20)


def test_distinct_pitches_farther_apart_than_phase_variants():
    base = mfcc_raw(sine(440.0))
    other_pitch = mfcc_raw(sine(1200.0))
    other_phase = mfcc_raw(sine(440.0, phase=1.3))
    d_pitch = np.linalg.norm(base - other_pitch)
    d_phase = np.linalg.norm(base - other_phase)
    assert d_pitch > d_phase


def test_mfcc_deterministic():
    clip = sine(523.0)
    a = mfcc_raw(clip)
    b = mfcc_raw(sine(523.0))
    assert np.array_equal(a, b)


def test_amplitude_scaling_moves_only_coefficient_zero():
    r = np.random.default_rng(3)
    base = r.uniform(-0.25, 0.25, 6000)
    c1 = mfcc_raw(WaveClip(base, audio.SAMPLE_RATE))
    c2 = mfcc_raw(WaveClip(2.0 * base, audio.SAMPLE_RATE))
    delta = c2 - c1
    assert np.abs(delta[:, 1:]).max() < 1e-9
    assert np.all(delta[:, 0] > 0.1)  # log-power shift


def test_wrong_sample_rate_rejected():
    clip = WaveClip(np.ones(100) * 0.1, 16000)
    with pytest.raises(AudioFormatError, match="16000"):
        mfcc_raw(clip)


def test_corpus_standardization_is_zero_mean_unit_std():
    r = np.random.default_rng(4)
    clips = [WaveClip(r.uniform(-0.5, 0.5, r.integers(3000, 9000)), audio.SAMPLE_RATE) for _ in range(12)]
    maps, standardizer = mfcc_corpus(clips)
    assert maps.shape == (12, 20, 20)
    pooled = maps.reshape(-1, 20)
    assert np.abs(pooled.mean(axis=0)).max() < 1e-9
    assert np.abs(pooled.std(axis=0) - 1).max() < 1e-9
    assert standardizer.mean.shape == (20,)


# ------------------------------------------------------------------ files


def test_wav_roundtrip(tmp_path):
    r = np.random.default_rng(5)
    samples = r.uniform(-0.9, 0.9, 2048)
    path = tmp_path / "clip.wav"
    audio.write_wav(path, samples)
    clip = audio.read_wav(path)
    assert clip.sample_rate == 8000
    np.testing.assert_allclose(clip.samples, samples, atol=1.0 / 32768)


def test_wav_wrong_rate_rejected(tmp_path):
    import wave

    path = tmp_path / "bad.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00\x00" * 64)
    with pytest.raises(AudioFormatError, match="16000"):
        audio.read_wav(path)


def test_wav_stereo_rejected(tmp_path):
    import wave

    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(b"\x00\x00\x00\x00" * 64)
    with pytest.raises(AudioFormatError, match="mono"):
        audio.read_wav(path)


def test_feature_file_roundtrip(tmp_path):
    maps = np.random.default_rng(6).normal(size=(7, 20, 20))
    path = tmp_path / "feat.smilf"
    audio.write_features(path, maps)
    back = audio.read_features(path)
    assert np.array_equal(maps, back)


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "junk.smilf"
    path.write_bytes(b"NOPE!" + b"\x00" * 32)
    with pytest.raises(AudioFormatError, match="magic"):
        audio.read_features(path)


def test_feature_file_truncated(tmp_path):
    maps = np.zeros((3, 20, 20))
    path = tmp_path / "feat.smilf"
    audio.write_features(path, maps)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 100])
    with pytest.raises(AudioFormatError, match="truncated"):
        audio.read_features(path)


def test_empty_clip_rejected():
    with pytest.raises(AudioFormatError, match="empty"):
        WaveClip(np.array([]), 8000)

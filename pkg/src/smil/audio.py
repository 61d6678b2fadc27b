"""MFCC feature maps for spoken-digit clips.

The pipeline is fixed: pre-emphasis 0.97, length normalization to exactly
20 frames of 400 samples, Hann window, power spectrum (512-point FFT),
26 triangular mel filters over 0-4000 Hz, log with floor 1e-10, DCT-II
keeping coefficients 0..19, then per-coefficient standardization fitted on
the training corpus. Output is always a 20x20 map (frames x coefficients).

Only 8 kHz PCM16 mono WAV input is accepted; resampling is out of scope.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

SAMPLE_RATE = 8000
NUM_FRAMES = 20
NUM_COEFFS = 20

FEATURE_MAGIC = b"SMILF"


class AudioFormatError(ValueError):
    """Clip violates the supported WAV/stream contract."""


@dataclass(frozen=True)
class WaveClip:
    samples: np.ndarray  # float in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.size == 0:
            raise AudioFormatError("empty clip")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("non-finite samples")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class MfccConfig:
    frame_length: int = 400  # 50 ms at 8 kHz
    num_frames: int = NUM_FRAMES
    num_coeffs: int = NUM_COEFFS
    num_filters: int = 26
    fft_size: int = 512
    low_hz: float = 0.0
    high_hz: float = 4000.0
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def read_wav(path) -> WaveClip:
    """Read a RIFF/WAVE file: PCM16 signed LE, mono, 8000 Hz."""
    with wave.open(str(path), "rb") as wav:
        if wav.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {wav.getnchannels()} channels")
        if wav.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * wav.getsampwidth()}-bit")
        rate = wav.getframerate()
        raw = wav.readframes(wav.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz unsupported, expected {SAMPLE_RATE}")
    return WaveClip(samples=samples, sample_rate=rate)


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    data = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(sample_rate)
        wav.writeframes(pcm.tobytes())


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters, fft_size, sample_rate, low_hz, high_hz):
    """Triangular mel-spaced filters over the rfft bin-center frequencies.

    Returns a (num_filters, fft_size // 2 + 1) non-negative matrix; every
    row has at least one positive entry.
    """
    if num_filters < 2:
        raise AudioFormatError(f"need at least 2 filters, got {num_filters}")
    if not (0 <= low_hz < high_hz <= sample_rate / 2):
        raise AudioFormatError(
            f"invalid frequency range [{low_hz}, {high_hz}] for sample rate {sample_rate}"
        )
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    bank = np.zeros((num_filters, bin_hz.size))
    for m in range(num_filters):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - left) / (center - left)
        down = (right - bin_hz) / (right - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
        if not bank[m].any():
            raise AudioFormatError(
                f"filter {m} has empty support; fft size {fft_size} too coarse for the range"
            )
    return bank


def filter_centers_hz(num_filters, low_hz, high_hz):
    """Peak frequency of each filter, in Hz (monotonically increasing)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 2))
    return edges[1:-1]


def _normalize_length(samples, config):
    """Pick a hop for exactly num_frames frames, then zero-pad at the end or
    center-truncate so the clip length is frame_length + (num_frames-1)*hop."""
    span = config.num_frames - 1
    hop = max(1, int(round((samples.size - config.frame_length) / span)))
    target = config.frame_length + span * hop
    if samples.size < target:
        out = np.zeros(target)
        out[: samples.size] = samples
        return out, hop
    if samples.size > target:
        start = (samples.size - target) // 2
        return samples[start : start + target], hop
    return samples, hop


def mfcc_raw(clip: WaveClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Unstandardized MFCC map, shape (num_frames, num_coeffs)."""
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"sample rate {clip.sample_rate} Hz unsupported, expected {SAMPLE_RATE}")
    emphasized = np.empty_like(clip.samples)
    emphasized[0] = clip.samples[0]
    emphasized[1:] = clip.samples[1:] - config.pre_emphasis * clip.samples[:-1]

    frames_src, hop = _normalize_length(emphasized, config)
    window = np.hanning(config.frame_length)
    bank = mel_filterbank(config.num_filters, config.fft_size, SAMPLE_RATE, config.low_hz, config.high_hz)

    out = np.empty((config.num_frames, config.num_coeffs))
    for i in range(config.num_frames):
        frame = frames_src[i * hop : i * hop + config.frame_length] * window
        power = np.abs(np.fft.rfft(frame, n=config.fft_size)) ** 2
        logmel = np.log(np.maximum(bank @ power, config.log_floor))
        out[i] = scipy.fft.dct(logmel, type=2, norm="ortho")[: config.num_coeffs]
    return out


@dataclass
class CoefficientStandardizer:
    """Per-coefficient mean/std over all frames of the training corpus."""

    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def fit(self, raw_maps):
        stacked = np.concatenate([np.asarray(m) for m in raw_maps], axis=0)
        self.mean = stacked.mean(axis=0)
        self.std = np.maximum(stacked.std(axis=0), 1e-12)
        return self

    def transform(self, raw_map):
        return (np.asarray(raw_map) - self.mean) / self.std


def mfcc_corpus(clips, config: MfccConfig = MfccConfig()):
    """MFCC maps for a training corpus, standardized per coefficient.

    Returns (maps: (N, num_frames, num_coeffs), standardizer).
    """
    raw = [mfcc_raw(clip, config) for clip in clips]
    standardizer = CoefficientStandardizer().fit(raw)
    return np.stack([standardizer.transform(m) for m in raw]), standardizer


def write_features(path, maps):
    """Write 20x20 feature maps: magic, u32 count/rows/cols, f64 LE payload."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[1:] != (NUM_FRAMES, NUM_COEFFS):
        raise AudioFormatError(f"feature maps must be (n, {NUM_FRAMES}, {NUM_COEFFS}), got {maps.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", maps.shape[0], NUM_FRAMES, NUM_COEFFS))
        fh.write(maps.astype("<f8").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != FEATURE_MAGIC:
            raise AudioFormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        count, rows, cols = struct.unpack("<III", fh.read(12))
        if (rows, cols) != (NUM_FRAMES, NUM_COEFFS):
            raise AudioFormatError(f"{path}: unsupported feature shape {rows}x{cols}")
        payload = fh.read(count * rows * cols * 8)
    if len(payload) != count * rows * cols * 8:
        raise AudioFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(count, rows, cols).copy()

"""Waveform ingestion and log-Mel feature pipeline.

``wav -> log_mel -> cmvn_sliding -> crop_or_pad -> spec_augment`` turns any
16 kHz mono recording of at least one frame into a fixed ``D×L`` matrix.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ChannelCountError, IngestionError, MalformedHeaderError, MissingFileError,
                     ParameterError, SampleRateError, TooShortError, UnsupportedEncodingError)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
N_FFT = 512
FEATURE_MAGIC = b"SMLF"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class MelFeature:
    frames: np.ndarray  # D×L
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0

    @property
    def n_mels(self):
        return self.frames.shape[0]

    @property
    def n_frames(self):
        return self.frames.shape[1]

    def with_frames(self, frames):
        return MelFeature(frames, self.frame_length_ms, self.frame_shift_ms)


@dataclass
class FrontendConfig:
    n_mels: int = 64
    frame_ms: float = 25.0
    shift_ms: float = 10.0
    cmvn_window: int = 300
    target_frames: int = 300
    freq_mask_max: int = 8
    time_mask_max: int = 20
    n_freq_masks: int = 1
    n_time_masks: int = 1


# ------------------------------------------------------------------ WAV I/O
def load_wav(path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except wave.Error as e:
        if "unknown format" in str(e):
            raise UnsupportedEncodingError(f"{path}: {e} (only integer PCM is supported)") from None
        raise MalformedHeaderError(f"{path}: {e}") from None
    except (EOFError, struct.error) as e:
        raise MalformedHeaderError(f"{path}: truncated header ({e})") from None
    if channels != 1:
        raise ChannelCountError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave_or_samples, sample_rate=SAMPLE_RATE):
    """Write float samples in [-1, 1] as 16-bit PCM mono (values are clipped)."""
    samples = wave_or_samples.samples if isinstance(wave_or_samples, Waveform) else wave_or_samples
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


# ------------------------------------------------------------------ mel filterbank
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels=64, fmin=0.0, fmax=SAMPLE_RATE / 2):
    """``n_mels + 2`` frequencies: filter ``m`` rises from edge m, peaks at m+1, falls to m+2."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels=64, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Triangular filters on the HTK mel scale, ``n_mels × (n_fft//2 + 1)``."""
    edges = mel_band_edges(n_mels, 0.0, sample_rate / 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(num_samples, frame_samples, shift_samples):
    return (num_samples - frame_samples) // shift_samples + 1


def log_mel(wave: Waveform, n_mels=64, frame_ms=25.0, shift_ms=10.0) -> MelFeature:
    """Hamming-windowed power spectrum through a mel filterbank, natural log with floor."""
    if wave.sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz, got {wave.sample_rate} Hz")
    frame = int(round(SAMPLE_RATE * frame_ms / 1000))
    shift = int(round(SAMPLE_RATE * shift_ms / 1000))
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < frame:
        raise TooShortError(f"{len(x)} samples is shorter than one {frame}-sample frame")
    n = frame_count(len(x), frame, shift)
    idx = np.arange(frame)[None, :] + shift * np.arange(n)[:, None]
    frames = x[idx] * np.hamming(frame)
    power = np.abs(np.fft.rfft(frames, n=max(N_FFT, frame), axis=1)) ** 2
    fb = mel_filterbank(n_mels, max(N_FFT, frame))
    energy = power @ fb.T
    return MelFeature(np.log(np.maximum(energy, LOG_FLOOR)).T.astype(np.float32), frame_ms, shift_ms)


# ------------------------------------------------------------------ normalisation
def _window_bounds(n, window):
    """Start/end of an up-to-``window`` frame span centred on each frame, kept inside [0, n)."""
    t = np.arange(n)
    if n <= window:
        return np.zeros(n, dtype=int), np.full(n, n)
    start = np.clip(t - window // 2, 0, n - window)
    return start, start + window


def cmvn_sliding(feat: MelFeature, window_frames=300) -> MelFeature:
    """Per-bin mean/variance normalisation over a centred sliding window.

    Near the edges the window slides inward rather than shrinking, so an
    utterance shorter than the window gets plain utterance-level normalisation.
    """
    x = feat.frames.astype(np.float64)
    # shifting by the first frame keeps constant rows exactly zero and the sums well conditioned
    x = x - x[:, :1]
    n = x.shape[1]
    start, end = _window_bounds(n, window_frames)
    c1 = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x, axis=1)], axis=1)
    c2 = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x * x, axis=1)], axis=1)
    count = (end - start)[None, :]
    mean = (c1[:, end] - c1[:, start]) / count
    var = np.maximum((c2[:, end] - c2[:, start]) / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return feat.with_frames(((x - mean) / std).astype(np.float32))


# ------------------------------------------------------------------ length and augmentation
def crop_or_pad(feat: MelFeature, target_frames=1200, training=False, rng=None) -> MelFeature:
    """Random (training) or centred crop of long inputs; cyclic repetition of short ones."""
    n = feat.n_frames
    if n == target_frames:
        return feat
    if n > target_frames:
        start = int(rng.integers(0, n - target_frames + 1)) if training else (n - target_frames) // 2
        return feat.with_frames(feat.frames[:, start:start + target_frames].copy())
    return feat.with_frames(feat.frames[:, np.arange(target_frames) % n].copy())


def spec_augment(feat: MelFeature, freq_mask_max=8, time_mask_max=20, n_freq=1, n_time=1,
                 rng=None) -> MelFeature:
    """Zero ``n_freq`` mel bands and ``n_time`` frame spans of uniformly random width."""
    d, n = feat.frames.shape
    if freq_mask_max > d or time_mask_max > n:
        raise ParameterError(f"mask maxima ({freq_mask_max}, {time_mask_max}) exceed feature size {d}×{n}")
    out = feat.frames.copy()
    for _ in range(n_freq):
        width = int(rng.integers(0, freq_mask_max + 1))
        start = int(rng.integers(0, d - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(n_time):
        width = int(rng.integers(0, time_mask_max + 1))
        start = int(rng.integers(0, n - width + 1))
        out[:, start:start + width] = 0.0
    return feat.with_frames(out)


def expected_masked_fraction(d, n, freq_mask_max, time_mask_max):
    """Mean masked area fraction for one frequency and one time mask."""
    ef = freq_mask_max / 2.0 / d
    et = time_mask_max / 2.0 / n
    return ef + et - ef * et


# ------------------------------------------------------------------ pipeline
def extract(wave: Waveform, cfg: FrontendConfig) -> MelFeature:
    """Log-Mel plus sliding CMVN; length is left untouched."""
    return cmvn_sliding(log_mel(wave, cfg.n_mels, cfg.frame_ms, cfg.shift_ms), cfg.cmvn_window)


def prepare(feat: MelFeature, cfg: FrontendConfig, training=False, rng=None, augment=True) -> np.ndarray:
    """Fixed-length network input from a normalised feature."""
    feat = crop_or_pad(feat, cfg.target_frames, training, rng)
    if training and augment:
        feat = spec_augment(feat, cfg.freq_mask_max, cfg.time_mask_max,
                            cfg.n_freq_masks, cfg.n_time_masks, rng)
    return feat.frames


def utterance_rng(seed, *key):
    """Independent generator for one (seed, utterance, ...) key; order of use never matters."""
    words = [int(seed)] + [int(k) if not isinstance(k, str) else int.from_bytes(k.encode()[:8], "little")
                           for k in key]
    return np.random.default_rng(np.random.SeedSequence(words))


# ------------------------------------------------------------------ debug dump
def save_feature(path, feat: MelFeature):
    d, n = feat.frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", d, n))
        f.write(np.ascontiguousarray(feat.frames, dtype="<f4").tobytes())


def load_feature(path) -> MelFeature:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC or len(blob) < 12:
        raise IngestionError(f"{path}: not a feature dump")
    d, n = struct.unpack("<II", blob[4:12])
    body = blob[12:]
    if len(body) != 4 * d * n:
        raise IngestionError(f"{path}: expected {d}×{n} floats, found {len(body) // 4}")
    return MelFeature(np.frombuffer(body, dtype="<f4").reshape(d, n).astype(np.float32))

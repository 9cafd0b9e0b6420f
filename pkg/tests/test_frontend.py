import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smla import frontend as F
from smla.errors import (ChannelCountError, MalformedHeaderError, MissingFileError, ParameterError,
                         SampleRateError, TooShortError, UnsupportedEncodingError)

from oracles import mel_centres_hz


def tone(freq, seconds, amp=0.5, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return F.Waveform(amp * np.sin(2 * np.pi * freq * t))


# ---------------------------------------------------------------- WAV ingestion
def test_wav_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 4000)
    F.write_wav(tmp_path / "a.wav", x)
    w = F.load_wav(tmp_path / "a.wav")
    assert w.sample_rate == 16000 and len(w.samples) == 4000
    assert np.max(np.abs(w.samples - x)) <= 1 / 32768


def _raw_wav(path, channels=1, width=2, rate=16000, frames=800):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(b"\x00" * frames * channels * width)


def test_wav_errors(tmp_path):
    with pytest.raises(MissingFileError):
        F.load_wav(tmp_path / "nope.wav")
    _raw_wav(tmp_path / "st.wav", channels=2)
    with pytest.raises(ChannelCountError):
        F.load_wav(tmp_path / "st.wav")
    _raw_wav(tmp_path / "8k.wav", rate=8000)
    with pytest.raises(SampleRateError):
        F.load_wav(tmp_path / "8k.wav")
    _raw_wav(tmp_path / "u8.wav", width=1)
    with pytest.raises(UnsupportedEncodingError):
        F.load_wav(tmp_path / "u8.wav")
    (tmp_path / "junk.wav").write_bytes(b"RIFF\x10\x00\x00\x00garbage")
    with pytest.raises(MalformedHeaderError):
        F.load_wav(tmp_path / "junk.wav")


def test_float_wav_rejected(tmp_path):
    data = np.zeros(100, "<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)  # IEEE float
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    (tmp_path / "f.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedEncodingError):
        F.load_wav(tmp_path / "f.wav")


# ---------------------------------------------------------------- framing
def test_twelve_seconds_frame_count():
    assert F.log_mel(F.Waveform(np.zeros(12 * 16000))).n_frames == 1198


@settings(max_examples=40, deadline=None)
@given(n=st.integers(400, 6000))
def test_frame_count_formula(n):
    feat = F.log_mel(F.Waveform(np.zeros(n)))
    assert feat.n_frames == (n - 400) // 160 + 1
    assert feat.n_mels == 64


def test_too_short():
    with pytest.raises(TooShortError):
        F.log_mel(F.Waveform(np.zeros(399)))


def test_silence_hits_log_floor():
    feat = F.log_mel(F.Waveform(np.zeros(1600)))
    assert np.all(np.isfinite(feat.frames))
    np.testing.assert_allclose(feat.frames, np.log(1e-10), rtol=1e-6)


def test_wrong_rate_waveform():
    with pytest.raises(SampleRateError):
        F.log_mel(F.Waveform(np.zeros(1600), 8000))


# ---------------------------------------------------------------- mel filterbank
def test_filterbank_peaks_match_mel_centres():
    fb = F.mel_filterbank()
    assert fb.shape == (64, 257)
    assert fb.min() >= 0.0 and fb.max() <= 1.0
    peak_hz = fb.argmax(axis=1) * 16000 / 512
    # each triangle peaks at the FFT bin nearest its centre
    assert np.all(np.abs(peak_hz - mel_centres_hz()) <= 16000 / 512 / 2 + 1e-9)


@pytest.mark.parametrize("freq", [250.0, 1000.0, 3000.0, 6500.0])
def test_tone_lands_in_nearest_mel_band(freq):
    frames = F.log_mel(tone(freq, 0.5)).frames
    predicted = int(np.argmin(np.abs(mel_centres_hz() - freq)))
    assert abs(int(np.median(frames.argmax(axis=0))) - predicted) <= 1


def test_hz_mel_inverse():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(F.mel_to_hz(F.hz_to_mel(f)), f, atol=1e-9)
    assert F.hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))


# ---------------------------------------------------------------- CMVN
def test_cmvn_short_utterance_is_global():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(64, 120)).astype(np.float32)
    out = F.cmvn_sliding(F.MelFeature(x), 300).frames
    assert np.abs(out.mean(axis=1)).max() <= 1e-4
    assert np.abs(out.std(axis=1) - 1.0).max() <= 1e-4


def test_cmvn_sliding_matches_direct_window():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 50)).cumsum(axis=1).astype(np.float32)
    win = 11
    out = F.cmvn_sliding(F.MelFeature(x), win).frames
    for t in (0, 3, 5, 20, 44, 49):
        s = min(max(t - win // 2, 0), 50 - win)
        seg = x[:, s:s + win].astype(np.float64)
        ref = (x[:, t] - seg.mean(axis=1)) / seg.std(axis=1)
        np.testing.assert_allclose(out[:, t], ref, rtol=1e-4, atol=1e-4)


def test_cmvn_constant_rows_are_zero():
    out = F.cmvn_sliding(F.MelFeature(np.full((3, 40), -23.0, np.float32)), 300).frames
    assert np.all(out == 0.0)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.1, 10.0), offset=st.floats(-50.0, 50.0))
def test_cmvn_affine_invariance(scale, offset):
    x = np.random.default_rng(3).normal(size=(5, 80)).astype(np.float32)
    a = F.cmvn_sliding(F.MelFeature(x), 30).frames
    b = F.cmvn_sliding(F.MelFeature(scale * x + offset), 30).frames
    np.testing.assert_allclose(a, b, atol=2e-3)


# ---------------------------------------------------------------- crop / pad
def test_pad_1198_to_1200_is_cyclic():
    x = np.arange(2 * 1198, dtype=np.float32).reshape(2, 1198)
    out = F.crop_or_pad(F.MelFeature(x), 1200).frames
    assert out.shape == (2, 1200)
    np.testing.assert_array_equal(out[:, 1198:], x[:, :2])


def test_center_crop():
    x = np.arange(10, dtype=np.float32)[None, :]
    np.testing.assert_array_equal(F.crop_or_pad(F.MelFeature(x), 4).frames, [[3, 4, 5, 6]])


@settings(max_examples=40)
@given(n=st.integers(1, 50), target=st.integers(1, 50), seed=st.integers(0, 1000))
def test_crop_or_pad_length_and_content(n, target, seed):
    x = np.arange(n, dtype=np.float32)[None, :]
    out = F.crop_or_pad(F.MelFeature(x), target, training=True, rng=np.random.default_rng(seed)).frames
    assert out.shape == (1, target)
    if n >= target:  # contiguous slice
        assert np.all(np.diff(out[0]) == 1)
    else:
        np.testing.assert_array_equal(out[0], np.arange(target) % n)


# ---------------------------------------------------------------- SpecAugment
def test_spec_augment_zero_maxima_identity():
    x = np.random.default_rng(4).normal(size=(64, 300)).astype(np.float32)
    out = F.spec_augment(F.MelFeature(x), 0, 0, rng=np.random.default_rng(0)).frames
    assert out.tobytes() == x.tobytes()


def test_spec_augment_mask_too_large():
    with pytest.raises(ParameterError):
        F.spec_augment(F.MelFeature(np.ones((8, 10))), 9, 2, rng=np.random.default_rng(0))


def test_spec_augment_masked_fraction():
    rng = np.random.default_rng(5)
    ones = F.MelFeature(np.ones((64, 300), np.float32))
    frac = np.mean([np.mean(F.spec_augment(ones, 8, 20, rng=rng).frames == 0) for _ in range(3000)])
    assert frac == pytest.approx(F.expected_masked_fraction(64, 300, 8, 20), abs=0.003)


def test_prepare_eval_is_deterministic():
    cfg = F.FrontendConfig(target_frames=100)
    feat = F.MelFeature(np.random.default_rng(6).normal(size=(64, 173)).astype(np.float32))
    assert F.prepare(feat, cfg).tobytes() == F.prepare(feat, cfg).tobytes()


# ---------------------------------------------------------------- misc
def test_feature_dump_roundtrip(tmp_path):
    feat = F.extract(tone(440.0, 0.3), F.FrontendConfig())
    F.save_feature(tmp_path / "f.bin", feat)
    assert F.load_feature(tmp_path / "f.bin").frames.tobytes() == feat.frames.tobytes()


def test_utterance_rng_keyed():
    a = F.utterance_rng(0, "augment", 3, 7).random(4)
    b = F.utterance_rng(0, "augment", 3, 7).random(4)
    c = F.utterance_rng(0, "augment", 3, 8).random(4)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()

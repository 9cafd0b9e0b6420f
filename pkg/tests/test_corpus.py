import wave

import numpy as np
import pytest

from smla import corpus as C
from smla import frontend as F
from smla.errors import ConfigError, IngestionError

from oracles import mel_centres_hz


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return out, C.generate_corpus(C.SynthCorpusSpec(), out)


def test_counts_and_format(default_corpus):
    out, info = default_corpus
    wavs = sorted((out / "train").glob("*.wav"))
    assert len(wavs) == 160
    assert len((out / "manifest.tsv").read_text().splitlines()) == 160
    with wave.open(str(wavs[0])) as f:
        assert (f.getnchannels(), f.getframerate(), f.getsampwidth(), f.getnframes()) == (1, 16000, 2, 48000)


def test_trials_balanced_and_heldout(default_corpus):
    out, info = default_corpus
    lines = [l.split() for l in (out / "trials.txt").read_text().splitlines()]
    labels = [int(l[0]) for l in lines]
    assert labels.count(1) == labels.count(0) == 8 * 45
    train = {rel for _, rel in info["train"]}
    assert all(l[1].startswith("heldout/") and l[1] not in train for l in lines)
    for lab, a, b in lines:
        assert (a.split("/")[1][:5] == b.split("/")[1][:5]) == (lab == "1")


def test_signatures_distinct():
    sigs = C.speaker_signatures(C.SynthCorpusSpec(num_speakers=12))
    assert len({s.bands for s in sigs}) == 12
    assert len({s.pitch for s in sigs}) == 12
    assert len({round(s.bands[0]) for s in sigs}) == 12


def test_same_seed_byte_identical(tmp_path):
    spec = C.SynthCorpusSpec(num_speakers=2, utterances=2, heldout=2, duration=0.5, seed=3)
    C.generate_corpus(spec, tmp_path / "a")
    C.generate_corpus(spec, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    C.generate_corpus(C.SynthCorpusSpec(num_speakers=2, utterances=2, heldout=2, duration=0.5, seed=4),
                      tmp_path / "c")
    assert (tmp_path / "a/train/spk00_000.wav").read_bytes() != (tmp_path / "c/train/spk00_000.wav").read_bytes()


def test_strongest_band_lands_in_predicted_mel_bin():
    """Averaged over utterances, each speaker's peak mel bin is the one nearest its first band."""
    spec = C.SynthCorpusSpec(noise_level=0.0, distractors=0)
    centres = mel_centres_hz()
    peaks = []
    for s, sig in enumerate(C.speaker_signatures(spec)):
        mean = np.mean([F.log_mel(F.Waveform(C.render_utterance(sig, np.random.default_rng([s, u]), 1.0,
                                                                0.0, 0))).frames.mean(axis=1)
                        for u in range(3)], axis=0)
        low = centres < 3200  # the first band is placed below the other two
        peak = int(np.argmax(np.where(low, mean, -np.inf)))
        assert abs(peak - int(np.argmin(np.abs(centres - sig.bands[0])))) <= 1
        peaks.append(peak)
    assert len(set(peaks)) == len(peaks)


def test_bad_corpus_settings(tmp_path):
    with pytest.raises(ConfigError):
        C.generate_corpus(C.SynthCorpusSpec(num_speakers=1), tmp_path)


def test_manifest_errors(tmp_path):
    with pytest.raises(IngestionError):
        C.read_manifest(tmp_path / "none.tsv")
    (tmp_path / "m.tsv").write_text("spk00 only-one-field\n")
    with pytest.raises(IngestionError, match=":1:"):
        C.read_manifest(tmp_path / "m.tsv")


def test_load_dataset_labels(default_corpus):
    out, _ = default_corpus
    data, speakers = C.load_dataset(out / "manifest.tsv", F.FrontendConfig())
    assert speakers == [f"spk{i:02d}" for i in range(8)]
    assert sorted({lab for _, lab in data}) == list(range(8))
    assert data[0][0].frames.shape == (64, 298)

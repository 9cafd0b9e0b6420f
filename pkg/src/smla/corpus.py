"""Synthetic speaker corpus and manifest handling.

Each synthetic speaker owns three narrow spectral bands and a pitch. An
utterance is a syllable-like on/off envelope applied to those band tones plus
a weak harmonic series, with per-utterance jitter and white noise, so speaker
identity is a learnable spectral property that survives mean/variance
normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frontend
from .errors import ConfigError, IngestionError

SR = frontend.SAMPLE_RATE


@dataclass
class SynthCorpusSpec:
    num_speakers: int = 8
    utterances: int = 20
    heldout: int = 10
    duration: float = 3.0
    noise_level: float = 0.02
    distractors: int = 3
    distractor_gain: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class Signature:
    bands: tuple  # three centre frequencies in Hz, strongest first
    pitch: float


def speaker_signatures(spec: SynthCorpusSpec) -> list[Signature]:
    """Pairwise-distinct signatures drawn from disjoint frequency grids."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    n = spec.num_speakers
    # strongest band on a mel-uniform grid so every speaker peaks in a different mel bin
    grid = frontend.mel_to_hz(np.linspace(frontend.hz_to_mel(400.0), frontend.hz_to_mel(3000.0), n))
    first = rng.permutation(grid)
    second = rng.permutation(np.linspace(3400.0, 5200.0, n))
    third = rng.permutation(np.linspace(5600.0, 7200.0, n))
    pitch = rng.permutation(np.linspace(95.0, 250.0, n))
    return [Signature((float(a), float(b), float(c)), float(p))
            for a, b, c, p in zip(first, second, third, pitch)]


def _envelope(n, rng):
    env = np.zeros(n)
    pos = int(rng.integers(0, int(0.15 * SR)))
    ramp = int(0.01 * SR)
    while pos < n:
        on = int(rng.uniform(0.12, 0.35) * SR)
        seg = np.ones(on)
        r = min(ramp, on // 2)
        seg[:r] = np.linspace(0.0, 1.0, r)
        seg[on - r:] = np.linspace(1.0, 0.0, r)
        env[pos:pos + on] = seg[:max(0, min(on, n - pos))]
        pos += on + int(rng.uniform(0.05, 0.2) * SR)
    return env


def render_utterance(sig: Signature, rng: np.random.Generator, duration=3.0, noise_level=0.02,
                     distractors=3, distractor_gain=0.5):
    """Speaker tones plus utterance-specific distractor tones that carry no identity."""
    n = int(round(duration * SR))
    t = np.arange(n) / SR
    env = _envelope(n, rng)
    warp = rng.uniform(0.99, 1.01)
    x = np.zeros(n)
    for gain, centre in zip((1.0, 0.6, 0.45), sig.bands):
        for offset in (-0.015, 0.0, 0.015):
            x += gain / 3 * np.sin(2 * np.pi * centre * warp * (1 + offset) * t + rng.uniform(0, 2 * np.pi))
    f0 = sig.pitch * rng.uniform(0.97, 1.03)
    vibrato = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / SR
    for k in range(1, int(3000 // f0) + 1):
        x += 0.08 / k * np.sin(k * phase)
    x = x * env
    denv = _envelope(n, rng)
    for _ in range(distractors):
        f = frontend.mel_to_hz(rng.uniform(frontend.hz_to_mel(300.0), frontend.hz_to_mel(7500.0)))
        x += distractor_gain * denv * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x = 0.3 * x / np.max(np.abs(x))
    return x + noise_level * rng.standard_normal(n)


def generate_corpus(spec: SynthCorpusSpec, out_dir) -> dict:
    """Write training WAVs, a manifest, held-out WAVs and a balanced trial list."""
    if spec.num_speakers < 2 or spec.utterances < 1 or spec.heldout < 2:
        raise ConfigError("need >= 2 speakers, >= 1 training and >= 2 held-out utterances per speaker")
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "heldout").mkdir(parents=True, exist_ok=True)
    sigs = speaker_signatures(spec)
    manifest, heldout = [], []
    for s, sig in enumerate(sigs):
        spk = f"spk{s:02d}"
        for u in range(spec.utterances + spec.heldout):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, s, u]))
            samples = render_utterance(sig, rng, spec.duration, spec.noise_level,
                                       spec.distractors, spec.distractor_gain)
            if u < spec.utterances:
                rel = f"train/{spk}_{u:03d}.wav"
                manifest.append((spk, rel))
            else:
                rel = f"heldout/{spk}_h{u - spec.utterances:02d}.wav"
                heldout.append((spk, rel))
            frontend.write_wav(out / rel, samples)
    (out / "manifest.tsv").write_text("".join(f"{spk}\t{rel}\n" for spk, rel in manifest))
    trials = make_trials(heldout, spec.seed)
    (out / "trials.txt").write_text("".join(f"{lab} {a} {b}\n" for lab, a, b in trials))
    return {"manifest": out / "manifest.tsv", "trials": out / "trials.txt",
            "train": manifest, "heldout": heldout, "signatures": sigs}


def make_trials(utts, seed):
    """All same-speaker pairs plus an equal number of random cross-speaker pairs."""
    targets, nontargets = [], []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            (targets if utts[i][0] == utts[j][0] else nontargets).append((utts[i][1], utts[j][1]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    pick = rng.choice(len(nontargets), size=min(len(targets), len(nontargets)), replace=False)
    trials = [(1, a, b) for a, b in targets] + [(0, *nontargets[k]) for k in sorted(pick)]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


def read_manifest(path) -> list[tuple[str, Path]]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{path}:{n}: expected 'speaker<TAB>wav_path'")
        wav = Path(parts[1])
        rows.append((parts[0], wav if wav.is_absolute() else path.parent / wav))
    return rows


def load_dataset(manifest_path, fcfg: frontend.FrontendConfig):
    """Normalised features with integer labels (speakers sorted by id)."""
    rows = read_manifest(manifest_path)
    speakers = sorted({spk for spk, _ in rows})
    index = {spk: i for i, spk in enumerate(speakers)}
    data = [(frontend.extract(frontend.load_wav(p), fcfg), index[spk]) for spk, p in rows]
    return data, speakers

"""Embedding extraction, cosine scoring, EER and minDCF."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frontend
from . import model as M
from . import tensor as T
from .errors import EvaluationError, IngestionError

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"SMLE"


@dataclass
class Trial:
    label: int
    enroll: str
    test: str
    line: int = 0


@dataclass
class ScoreSet:
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise EvaluationError("labels and scores must be 1-d and the same length")

    def validate(self):
        if self.labels.size == 0:
            raise EvaluationError("empty score set")
        if not np.isin(self.labels, (0, 1)).all():
            raise EvaluationError("labels must be 0 (nontarget) or 1 (target)")
        if not (self.labels == 1).any():
            raise EvaluationError("score set has no target trials")
        if not (self.labels == 0).any():
            raise EvaluationError("score set has no nontarget trials")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("non-finite score")


# ------------------------------------------------------------------ embeddings
def _as_feature(source, fcfg):
    if isinstance(source, frontend.MelFeature):
        return source
    if isinstance(source, frontend.Waveform):
        return frontend.extract(source, fcfg)
    return frontend.extract(frontend.load_wav(source), fcfg)


def extract_embeddings(params, config, sources, fcfg=None, batch_size=16) -> np.ndarray:
    """Eval-mode embeddings (``len(sources) × dim``) for paths, waveforms or normalised features."""
    fcfg = fcfg or frontend.FrontendConfig()
    out = np.zeros((len(sources), config.embedding_dim), dtype=np.float32)
    with T.no_grad():
        for i in range(0, len(sources), batch_size):
            X = np.stack([frontend.prepare(_as_feature(s, fcfg), fcfg, training=False)
                          for s in sources[i:i + batch_size]])
            out[i:i + len(X)] = M.forward(params, config, X, training=False).embeddings.data
    return out


def extract_embedding(params, config, source, fcfg=None) -> np.ndarray:
    return extract_embeddings(params, config, [source], fcfg)[0]


def params_digest(params) -> str:
    h = hashlib.sha1()
    for name, t in sorted(params.items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()[:16]


class EmbeddingCache:
    """Embeddings keyed by (utterance id, parameter digest)."""

    def __init__(self, params, config, fcfg=None):
        self.params, self.config, self.fcfg = params, config, fcfg
        self.digest = params_digest(params)
        self._store = {}

    def __len__(self):
        return len(self._store)

    def get_many(self, utt_ids, resolve=lambda u: u):
        todo = [u for u in dict.fromkeys(utt_ids) if (u, self.digest) not in self._store]
        if todo:
            embs = extract_embeddings(self.params, self.config, [resolve(u) for u in todo], self.fcfg)
            for u, e in zip(todo, embs):
                self._store[(u, self.digest)] = e
        return [self._store[(u, self.digest)] for u in utt_ids]


# ------------------------------------------------------------------ scoring
def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvaluationError("cannot score a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def error_rates(scores: ScoreSet):
    """Thresholds (distinct scores, then +inf) with FAR(t)=P(nontarget>=t), FRR(t)=P(target<t)."""
    scores.validate()
    s, lab = scores.scores, scores.labels
    thr = np.unique(s)
    tgt = np.sort(s[lab == 1])
    non = np.sort(s[lab == 0])
    thr = np.append(thr, np.inf)
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, far, frr


def _crossing(thr, far, frr):
    """EER and threshold where FRR-FAR changes sign, interpolated linearly."""
    d = frr - far
    i = int(np.argmax(d >= 0))  # d is nondecreasing and ends at +1
    if d[i] == 0 or i == 0:
        return far[i], thr[i]
    lo, hi = i - 1, i
    w = d[lo] / (d[lo] - d[hi])
    eer = far[lo] + w * (far[hi] - far[lo])
    t_hi = thr[hi] if np.isfinite(thr[hi]) else np.nextafter(thr[lo], np.inf)
    return eer, thr[lo] + w * (t_hi - thr[lo])


def compute_eer(scores: ScoreSet):
    """Equal error rate in percent and the interpolated threshold."""
    thr, far, frr = error_rates(scores)
    eer, t = _crossing(thr, far, frr)
    return 100.0 * float(eer), float(t)


def detection_cost(far, frr, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Normalised DCF: raw cost divided by the cost of the better trivial system."""
    raw = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    return raw / min(c_miss * p_target, c_fa * (1.0 - p_target))


def compute_min_dcf(scores: ScoreSet, p_target=0.01, c_miss=1.0, c_fa=1.0):
    thr, far, frr = error_rates(scores)
    dcf = detection_cost(far, frr, p_target, c_miss, c_fa)
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(thr[i])


def dcf_at(scores: ScoreSet, threshold, p_target=0.01, c_miss=1.0, c_fa=1.0):
    s, lab = scores.scores, scores.labels
    far = np.mean(s[lab == 0] >= threshold)
    frr = np.mean(s[lab == 1] < threshold)
    return float(detection_cost(far, frr, p_target, c_miss, c_fa))


# ------------------------------------------------------------------ trial / score files
def read_trials(path) -> list[Trial]:
    path = Path(path)
    if not path.is_file():
        raise EvaluationError(f"trial list not found: {path}")
    trials = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise EvaluationError(f"{path}:{n}: expected 'label enroll test', got {line!r}")
        trials.append(Trial(int(parts[0]), parts[1], parts[2], n))
    return trials


def resolve_audio(trial_path, utt):
    p = Path(utt)
    return p if p.is_absolute() else Path(trial_path).parent / p


def summary_line(eer, min_dcf, thr_eer, thr_dcf):
    return f"EER={eer:.4f}% minDCF={min_dcf:.4f} thrEER={thr_eer:.6f} thrDCF={thr_dcf:.6f}"


def write_scores(path, scores: ScoreSet, summary: str):
    with open(path, "w") as f:
        for lab, s in zip(scores.labels, scores.scores):
            f.write(f"{lab}\t{s:.6f}\n")
        f.write(summary + "\n")


def score_trials(trials, embeddings_of) -> ScoreSet:
    """Cosine score for every trial; ``embeddings_of`` maps utterance ids to vectors."""
    return ScoreSet([t.label for t in trials],
                    [cosine_score(embeddings_of[t.enroll], embeddings_of[t.test]) for t in trials])


def evaluate(params, config, trial_path, fcfg=None, cache=None):
    """Embed every utterance in a trial list, score, and compute EER / minDCF."""
    trials = read_trials(trial_path)
    utts = list(dict.fromkeys(u for t in trials for u in (t.enroll, t.test)))
    line_of = {}
    for t in trials:
        line_of.setdefault(t.enroll, t.line)
        line_of.setdefault(t.test, t.line)
    for u in utts:
        if not resolve_audio(trial_path, u).is_file():
            raise IngestionError(f"{trial_path}:{line_of[u]}: audio not found: {u}")
    cache = cache or EmbeddingCache(params, config, fcfg)
    embs = dict(zip(utts, cache.get_many(utts, lambda u: resolve_audio(trial_path, u))))
    scores = score_trials(trials, embs)
    eer, thr_eer = compute_eer(scores)
    min_dcf, thr_dcf = compute_min_dcf(scores)
    return scores, {"eer": eer, "min_dcf": min_dcf, "thr_eer": thr_eer, "thr_dcf": thr_dcf}


# ------------------------------------------------------------------ embedding files
def write_embeddings(path, items, dim, text=False):
    """``items`` is a list of ``(utt_id, vector)``."""
    if not items:
        log.warning("no utterances to embed; writing an empty embedding file")
    if text:
        with open(path, "w") as f:
            for utt, vec in items:
                f.write(utt + "\t" + ",".join(repr(float(v)) for v in np.asarray(vec, np.float32)) + "\n")
        return
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC + struct.pack("<I", dim))
        for utt, vec in items:
            key = utt.encode("utf-8")
            f.write(struct.pack("<H", len(key)) + key)
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def read_embeddings(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != EMBEDDING_MAGIC:
        out = {}
        for line in blob.decode("utf-8").splitlines():
            if line.strip():
                utt, vals = line.split("\t")
                out[utt] = np.array([float(v) for v in vals.split(",")], dtype=np.float32)
        return out
    (dim,) = struct.unpack_from("<I", blob, 4)
    pos, out = 8, {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<H", blob, pos)
        utt = blob[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        body = blob[pos:pos + 4 * dim]
        if len(body) != 4 * dim:
            raise IngestionError(f"{path}: truncated embedding for {utt!r}")
        vec = np.frombuffer(body, dtype="<f4")
        out[utt] = vec.astype(np.float32)
        pos += 4 * dim
    return out

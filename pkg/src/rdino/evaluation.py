"""Embedding extraction, cosine scoring, EER / minDCF / DET and the on-disk trial, score and embedding formats."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import Waveform, fbank, instance_normalize, synth_corpus
from .model import NetworkPair, encode


class MetricInputError(ValueError):
    """Score set lacks a class, or trial rows are malformed."""


class EmbeddingFileError(ValueError):
    """Embedding file is malformed or truncated."""


@dataclass
class Trial:
    label: int  # 1 = target, 0 = nontarget
    enroll: str
    test: str


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(int)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricInputError("scores and labels must be equal-length 1-d sequences")
        if not np.all(np.isfinite(self.scores)):
            raise MetricInputError("scores must be finite")


# -- embeddings ----------------------------------------------------------


def extract_embedding(wave: Waveform, pair: NetworkPair) -> np.ndarray:
    """Teacher-encoder embedding of the whole utterance (no cropping, no augmentation)."""
    feat = instance_normalize(fbank(wave, n_mels=pair.encoder.n_mels))
    dtype = next(iter(pair.teacher.values())).dtype
    return encode(feat.frames.astype(dtype), pair.teacher, pair.encoder).data[0].copy()


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricInputError("cosine score is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(trials: list[Trial], embeddings: dict[str, np.ndarray]) -> ScoreSet:
    missing = {t.enroll for t in trials} | {t.test for t in trials}
    missing -= set(embeddings)
    if missing:
        raise MetricInputError(f"no embedding for ids: {sorted(missing)[:5]}")
    scores = [cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials]
    return ScoreSet(np.array(scores), np.array([t.label for t in trials]))


# -- metrics -------------------------------------------------------------


def _check(ss: ScoreSet) -> None:
    n_tgt = int(np.sum(ss.labels == 1))
    if n_tgt == 0 or n_tgt == ss.labels.size:
        raise MetricInputError("need at least one target and one nontarget trial")


def error_rates(ss: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR at every distinct score used as threshold, plus a reject-all point.

    A trial is accepted iff its score is strictly above the threshold.
    Returns ``(thresholds, far, frr)`` ordered by increasing threshold, the
    first entry being threshold = -inf (accept everything).
    """
    _check(ss)
    order = np.argsort(ss.scores, kind="mergesort")
    s = ss.scores[order]
    tgt = (ss.labels[order] == 1).astype(np.float64)
    non = 1.0 - tgt
    n_tgt, n_non = tgt.sum(), non.sum()
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    rejected_tgt = np.cumsum(tgt)[last]
    rejected_non = np.cumsum(non)[last]
    thresholds = np.r_[-np.inf, s[last]]
    frr = np.r_[0.0, rejected_tgt / n_tgt]
    far = np.r_[1.0, (n_non - rejected_non) / n_non]
    return thresholds, far, frr


def eer(ss: ScoreSet) -> float:
    """Equal error rate, linearly interpolated where FAR - FRR changes sign."""
    _, far, frr = error_rates(ss)
    diff = far - frr  # non-increasing along the sweep, starts at 1, ends at -1
    exact = np.nonzero(diff == 0)[0]
    if exact.size:
        return float(far[exact[0]])
    k = int(np.nonzero(diff < 0)[0][0])
    d0, d1 = diff[k - 1], diff[k]
    w = d0 / (d0 - d1)
    return float(far[k - 1] + w * (far[k] - far[k - 1]))


def min_dcf(ss: ScoreSet, p_target: float = 0.05, c_fa: float = 1.0, c_miss: float = 1.0) -> float:
    """Minimum detection cost over thresholds, normalized by the best trivial system."""
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"p_target must lie in (0, 1), got {p_target}")
    _, far, frr = error_rates(ss)
    dcf = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def det_points(ss: ScoreSet) -> list[tuple[float, float]]:
    """(FAR, FRR) pairs along the threshold sweep; FAR non-increasing, FRR non-decreasing."""
    _, far, frr = error_rates(ss)
    return [(float(a), float(r)) for a, r in zip(far, frr)]


@dataclass
class BenchmarkResult:
    eer: float
    min_dcf: float
    intra_cosine: float
    inter_cosine: float


def synthetic_benchmark(
    pair: NetworkPair,
    n_speakers: int = 10,
    utts_per_speaker: int = 10,
    seconds: float = 4.0,
    corpus_seed: int = 1234,
    n_target: int = 200,
    n_nontarget: int = 200,
    trial_seed: int = 5,
) -> BenchmarkResult:
    """Score a seeded held-out synthetic trial list with teacher embeddings.

    The default corpus seed keeps these speakers disjoint from the training
    corpus, which is generated from ``synth_seed`` (7 by default).
    """
    corpus = synth_corpus(n_speakers, utts_per_speaker, seconds, corpus_seed)
    ids = {f"h{i:04d}": spk for i, (spk, _) in enumerate(corpus)}
    emb = {uid: extract_embedding(w, pair) for uid, (_, w) in zip(ids, corpus)}
    trials = make_trials(ids, n_target, n_nontarget, trial_seed)
    ss = score_trials(trials, emb)
    tgt = ss.labels == 1
    return BenchmarkResult(eer(ss), min_dcf(ss), float(ss.scores[tgt].mean()), float(ss.scores[~tgt].mean()))


# -- trials --------------------------------------------------------------


def make_trials(
    speakers: dict[str, int] | list[tuple[str, int]],
    n_target: int,
    n_nontarget: int,
    seed: int,
    allow_no_target: bool = False,
) -> list[Trial]:
    """Seeded same-speaker and cross-speaker pairs without duplicates.

    ``speakers`` maps utterance id to speaker id. Pairs are unordered: (a, b)
    and (b, a) count as the same trial.
    """
    items = sorted(dict(speakers).items())
    by_spk: dict[int, list[str]] = {}
    for uid, spk in items:
        by_spk.setdefault(spk, []).append(uid)
    if n_target < 1 and not allow_no_target:
        raise MetricInputError("metric runs need at least one target trial")
    if n_target < 0 or n_nontarget < 0:
        raise MetricInputError("trial counts must be non-negative")
    same = [(a, b) for utts in by_spk.values() for i, a in enumerate(utts) for b in utts[i + 1:]]
    n_utt = len(items)
    n_cross = n_utt * (n_utt - 1) // 2 - len(same)
    if len(by_spk) < 2 or n_target > len(same) or n_nontarget > n_cross:
        raise MetricInputError(
            f"cannot draw {n_target} target / {n_nontarget} nontarget trials from "
            f"{len(by_spk)} speakers ({len(same)} same-speaker, {n_cross} cross-speaker pairs available)"
        )
    rng = np.random.default_rng(seed)
    trials = [Trial(1, *same[i]) for i in rng.choice(len(same), size=n_target, replace=False)]
    ids = [u for u, _ in items]
    spk_of = dict(items)
    chosen: set[tuple[str, str]] = set()
    while len(chosen) < n_nontarget:
        i, j = rng.choice(n_utt, size=2, replace=False)
        a, b = sorted((ids[i], ids[j]))
        if spk_of[a] != spk_of[b]:
            chosen.add((a, b))
    trials += [Trial(0, a, b) for a, b in sorted(chosen)]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def write_trials(trials: list[Trial], path) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials))


def read_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise MetricInputError(f"{path}:{lineno}: expected 'label enroll_id test_id' with label 1 or 0")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


def write_scores(trials: list[Trial], ss: ScoreSet, path) -> None:
    Path(path).write_text("".join(f"{t.enroll} {t.test} {s:.6f}\n" for t, s in zip(trials, ss.scores)))


def read_scores(path) -> dict[tuple[str, str], float]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MetricInputError(f"{path}:{lineno}: expected 'enroll_id test_id score'")
        out[(parts[0], parts[1])] = float(parts[2])
    return out


def join_scores(trials: list[Trial], scores: dict[tuple[str, str], float]) -> ScoreSet:
    values = []
    for t in trials:
        key = (t.enroll, t.test)
        if key not in scores:
            raise MetricInputError(f"no score for trial {t.enroll} {t.test}")
        values.append(scores[key])
    return ScoreSet(np.array(values), np.array([t.label for t in trials]))


# -- embedding file ------------------------------------------------------

_EMB_MAGIC = "RDINO-EMB"


def save_embeddings(embeddings: dict[str, np.ndarray], path) -> None:
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"embeddings have mixed shapes {dims}")
    e = dims.pop()[0] if dims else 0
    with open(path, "wb") as fh:
        fh.write(f"{_EMB_MAGIC} v1 {e}\n".encode("ascii"))
        for uid, vec in embeddings.items():
            if not uid or any(ch.isspace() for ch in uid):
                raise ValueError(f"embedding id {uid!r} must be non-empty without whitespace")
            fh.write(uid.encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_embeddings(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    head, sep, rest = raw.partition(b"\n")
    parts = head.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 3 or parts[0] != _EMB_MAGIC:
        raise EmbeddingFileError(f"{path}: not an embedding file")
    if parts[1] != "v1":
        raise EmbeddingFileError(f"{path}: unsupported version {parts[1]}")
    e = int(parts[2])
    out: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(rest):
        nl = rest.find(b"\n", pos)
        if nl < 0:
            raise EmbeddingFileError(f"{path}: truncated id line")
        uid = rest[pos:nl].decode("utf-8")
        pos = nl + 1
        block = rest[pos:pos + 4 * e]
        if len(block) != 4 * e:
            raise EmbeddingFileError(f"{path}: truncated vector for {uid!r}")
        out[uid] = np.frombuffer(block, dtype="<f4").copy()
        pos += 4 * e
    return out

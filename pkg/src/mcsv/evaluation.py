"""Verification protocol: utterance embeddings, cosine trial scoring, EER, minDCF.

Threshold convention: a trial is accepted when ``score >= threshold``.  So
``FAR(t) = P(nontarget >= t)`` and ``FRR(t) = P(target < t)``.  Operating
points are taken at every distinct score plus ``+inf`` (accept nothing).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentPolicy, augment_waveform, read_manifest
from .features import Waveform, batch_features, read_wav
from .model import EmbeddingNet

P_TARGET = 0.01
HIST_BIN_WIDTH = 0.02
NOISY_TEST_SEED = 90210
NOISY_TEST_POLICY = dict(noise_snr_db={"speech": (0.0, 10.0), "music": (0.0, 10.0), "noise": (0.0, 10.0)}, reverb_prob=0.5)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    target: bool
    enroll: str
    test: str


class TrialSet(list):
    """List of :class:`Trial` with file IO in the ``label enroll test`` layout."""

    @classmethod
    def read(cls, path: str | Path) -> "TrialSet":
        trials = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3 or parts[0] not in ("0", "1"):
                    raise EvaluationError(f"{path}:{lineno}: expected 'label enroll_id test_id' with label 0/1")
                trials.append(Trial(parts[0] == "1", parts[1], parts[2]))
        return trials

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self:
                fh.write(f"{int(t.target)} {t.enroll} {t.test}\n")

    def check(self) -> None:
        if not self:
            raise EvaluationError("trial list is empty")
        labels = {t.target for t in self}
        if labels != {True, False}:
            raise EvaluationError("trial list needs at least one target and one nontarget trial")


def make_trials(manifest, rng: np.random.Generator | None = None) -> TrialSet:
    """Every same-speaker pair, plus as many random different-speaker pairs."""
    rng = rng or np.random.default_rng(0)
    targets, nontargets = [], []
    for (u1, s1, _), (u2, s2, _) in itertools.combinations(manifest, 2):
        (targets if s1 == s2 else nontargets).append((u1, u2))
    pick = rng.choice(len(nontargets), size=min(len(targets), len(nontargets)), replace=False)
    trials = TrialSet(Trial(True, a, b) for a, b in targets)
    trials.extend(Trial(False, *nontargets[i]) for i in sorted(pick))
    return trials


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != self.scores.shape[0]:
            raise EvaluationError("one score per trial required")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("scores must be finite")

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoreSet":
        labels = np.asarray(labels).astype(bool)
        trials = [Trial(bool(l), f"e{i}", f"t{i}") for i, l in enumerate(labels)]
        return cls(trials, np.asarray(scores, dtype=np.float64))

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.target for t in self.trials], dtype=bool)

    def split(self):
        labels = self.labels
        tar, non = self.scores[labels], self.scores[~labels]
        if tar.size == 0 or non.size == 0:
            raise EvaluationError("need at least one target and one nontarget score")
        return tar, non

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["enroll_id", "test_id", "label", "score"])
            for t, s in zip(self.trials, self.scores):
                w.writerow([t.enroll, t.test, int(t.target), repr(float(s))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ScoreSet":
        trials, scores = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                trials.append(Trial(r["label"] == "1", r["enroll_id"], r["test_id"]))
                scores.append(float(r["score"]))
        return cls(trials, np.array(scores))


@dataclass
class DetMetrics:
    eer: float
    threshold_at_eer: float
    min_dcf: float
    threshold_at_min_dcf: float
    roc: np.ndarray  # rows (threshold, FAR, FRR)


# ---------------------------------------------------------------------------
# embeddings


def crop_starts(n: int, crop: int, num_frames: int) -> np.ndarray:
    if n < crop:
        raise EvaluationError(f"utterance of {n} samples is shorter than one {crop}-sample frame")
    return np.round(np.linspace(0, n - crop, num_frames)).astype(int)


def embed_utterance(w: Waveform, model: EmbeddingNet, num_frames: int = 6, frame_len: float = 2.0) -> np.ndarray:
    """Mean encoder representation over evenly spaced crops, l2-normalized."""
    crop = int(round(frame_len * w.sample_rate))
    starts = crop_starts(len(w), crop, num_frames)
    crops = np.stack([w.samples[s:s + crop] for s in starts])
    reps = model.represent(batch_features(crops))
    mean = reps.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise EvaluationError("model produced a zero representation; cannot normalize")
    return mean / norm


def corrupt(w: Waveform, rng: np.random.Generator) -> Waveform:
    """Test-time noise + reverb from a bank disjoint from the training bank."""
    policy = AugmentPolicy(seed=NOISY_TEST_SEED, **NOISY_TEST_POLICY)
    return augment_waveform(w, policy, rng)[0]


def embed_corpus(corpus_dir: str | Path, model: EmbeddingNet, condition: str = "clean",
                 num_frames: int = 6, frame_len: float = 2.0, ids=None) -> dict[str, np.ndarray]:
    root = Path(corpus_dir)
    wanted = None if ids is None else set(ids)
    out = {}
    for k, (utt, _, rel) in enumerate(read_manifest(root)):
        if wanted is not None and utt not in wanted:
            continue
        path = root / rel
        if not path.exists():
            raise EvaluationError(f"missing audio for utterance {utt}: {path}")
        w = read_wav(path)
        if condition == "noisy":
            w = corrupt(w, np.random.default_rng([NOISY_TEST_SEED, k]))
        elif condition != "clean":
            raise ValueError(f"unknown test condition {condition!r}")
        out[utt] = embed_utterance(w, model, num_frames, frame_len)
    return out


# ---------------------------------------------------------------------------
# scoring and metrics


def score_trials(t: TrialSet, embeddings: dict[str, np.ndarray]) -> ScoreSet:
    scores = np.empty(len(t))
    for k, trial in enumerate(t):
        for utt in (trial.enroll, trial.test):
            if utt not in embeddings:
                raise EvaluationError(f"no embedding for utterance {utt!r}")
        a, b = embeddings[trial.enroll], embeddings[trial.test]
        scores[k] = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return ScoreSet(list(t), scores)


def operating_points(s: ScoreSet) -> np.ndarray:
    """Rows ``(threshold, FAR, FRR)`` at each distinct score and at ``+inf``."""
    tar, non = s.split()
    tar = np.sort(tar)
    non = np.sort(non)
    th = np.append(np.unique(s.scores), np.inf)
    far = (non.size - np.searchsorted(non, th, side="left")) / non.size
    frr = np.searchsorted(tar, th, side="left") / tar.size
    return np.column_stack([th, far, frr])


def _eer_from_points(points: np.ndarray) -> tuple[float, float]:
    th, far, frr = points.T
    diff = frr - far
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k]), float(th[k])
    w = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    thr = th[k - 1] if not np.isfinite(th[k]) else th[k - 1] + w * (th[k] - th[k - 1])
    return float(eer), float(thr)


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """EER with linear interpolation between the two bracketing operating points."""
    return _eer_from_points(operating_points(s))


def _dcf_curve(points, p_target, c_miss, c_fa):
    _, far, frr = points.T
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return (c_miss * frr * p_target + c_fa * far * (1 - p_target)) / norm


def compute_min_dcf(s: ScoreSet, p_target: float = P_TARGET, c_miss: float = 1.0, c_fa: float = 1.0) -> tuple[float, float]:
    points = operating_points(s)
    dcf = _dcf_curve(points, p_target, c_miss, c_fa)
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(points[k, 0])


def normalized_dcf_at(s: ScoreSet, threshold: float, p_target: float = P_TARGET,
                      c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    tar, non = s.split()
    far = np.mean(non >= threshold)
    frr = np.mean(tar < threshold)
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return float((c_miss * frr * p_target + c_fa * far * (1 - p_target)) / norm)


def det_metrics(s: ScoreSet, p_target: float = P_TARGET) -> DetMetrics:
    points = operating_points(s)
    eer, thr = _eer_from_points(points)
    dcf = _dcf_curve(points, p_target, 1.0, 1.0)
    k = int(np.argmin(dcf))
    return DetMetrics(eer, thr, float(dcf[k]), float(points[k, 0]), points)


@dataclass
class ScoreStats:
    mean_pos: float
    mean_neg: float
    gap: float
    bin_left: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray

    def write_histogram(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "pos_count", "neg_count"])
            for left, p, n in zip(self.bin_left, self.pos_counts, self.neg_counts):
                w.writerow([f"{left:.2f}", int(p), int(n)])


def score_stats(s: ScoreSet) -> ScoreStats:
    tar, non = s.split()
    edges = np.linspace(-1.0, 1.0, int(round(2.0 / HIST_BIN_WIDTH)) + 1)
    pos, _ = np.histogram(np.clip(tar, -1, 1), bins=edges)
    neg, _ = np.histogram(np.clip(non, -1, 1), bins=edges)
    mean_pos, mean_neg = float(tar.mean()), float(non.mean())
    return ScoreStats(mean_pos, mean_neg, mean_pos - mean_neg, edges[:-1], pos, neg)


def evaluate(model: EmbeddingNet, corpus_dir: str | Path, trials: TrialSet, condition: str = "clean",
             num_frames: int = 6, frame_len: float = 2.0):
    """Embed the utterances referenced by ``trials`` and score them."""
    trials.check()
    ids = {t.enroll for t in trials} | {t.test for t in trials}
    emb = embed_corpus(corpus_dir, model, condition, num_frames, frame_len, ids=ids)
    missing = sorted(ids - set(emb))
    if missing:
        raise EvaluationError(f"no audio for utterance {missing[0]!r} in {corpus_dir}")
    scores = score_trials(trials, emb)
    return scores, det_metrics(scores), score_stats(scores)

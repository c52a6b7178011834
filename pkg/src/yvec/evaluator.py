"""Verification scoring: trial cosines, EER, minDCF, bootstrap intervals.

Operating points are swept over the sorted unique scores plus accept-all
and reject-all sentinels. A trial is accepted when its score is >= the
threshold, so FRR(t) = P(target < t) and FAR(t) = P(nontarget >= t). The
equal error rate sits where the two curves cross, with linear
interpolation between adjacent operating points when they do not meet
exactly; that convention makes the estimate invariant under any strictly
increasing transform of the scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .aggregator import ScoringError, SpeakerEmbedding, cosine_score
from .audio import Trial


@dataclass
class TrialScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # True for target trials

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be matching 1-d arrays")

    @property
    def n_target(self) -> int:
        return int(self.labels.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.labels).sum())

    def require_both_classes(self) -> None:
        if self.n_target == 0 or self.n_nontarget == 0:
            raise ValueError("need at least one target and one nontarget trial")


@dataclass(frozen=True)
class DcfConfig:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("detection costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must be in (0, 1)")


def score_trials(trials: Sequence[Trial],
                 embeddings: Mapping[str, SpeakerEmbedding | np.ndarray]) -> TrialScoreSet:
    """Cosine score per trial, order preserved."""
    scores, labels = [], []
    for i, t in enumerate(trials, start=1):
        for utt in (t.enroll_id, t.test_id):
            if utt not in embeddings:
                raise ScoringError(f"trial line {i}: no embedding for {utt!r}")
        scores.append(cosine_score(embeddings[t.enroll_id], embeddings[t.test_id]))
        labels.append(t.target)
    return TrialScoreSet(np.asarray(scores), np.asarray(labels))


def roc_points(s: TrialScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, frr, far) over unique scores plus +/-inf sentinels."""
    s.require_both_classes()
    targets = np.sort(s.scores[s.labels])
    nontargets = np.sort(s.scores[~s.labels])
    uniq = np.unique(s.scores)
    thresholds = np.concatenate(([-np.inf], uniq, [np.inf]))
    frr = np.searchsorted(targets, thresholds, side="left") / targets.size
    far = (nontargets.size - np.searchsorted(nontargets, thresholds, side="left")) \
        / nontargets.size
    return thresholds, frr, far


def compute_eer(s: TrialScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold from the swept operating points."""
    thresholds, frr, far = roc_points(s)
    diff = frr - far  # nondecreasing in the threshold
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        return float(frr[idx]), float(thresholds[idx])
    frr1, frr2 = frr[idx - 1], frr[idx]
    far1, far2 = far[idx - 1], far[idx]
    t = (far1 - frr1) / ((frr2 - frr1) - (far2 - far1))
    eer = frr1 + t * (frr2 - frr1)
    th1, th2 = thresholds[idx - 1], thresholds[idx]
    threshold = th2 if np.isinf(th1) else th1 + t * (th2 - th1)
    return float(eer), float(threshold)


def compute_mindcf(s: TrialScoreSet, cfg: DcfConfig = DcfConfig()) -> tuple[float, float]:
    """Minimum normalized detection cost over the sweep (sentinels included)."""
    thresholds, frr, far = roc_points(s)
    dcf = cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1.0 - cfg.p_target) * far
    normalizer = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1.0 - cfg.p_target))
    idx = int(np.argmin(dcf))
    return float(dcf[idx] / normalizer), float(thresholds[idx])


def bootstrap_eer_ci(s: TrialScoreSet, n_resamples: int = 1000,
                     confidence: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the EER over whole-trial resamples.

    Each resample draws trials with replacement from its own derived seed;
    single-class resamples are skipped.
    """
    if n_resamples < 100:
        raise ValueError("need at least 100 resamples for a percentile interval")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    s.require_both_classes()
    n = s.scores.size
    eers = []
    for i in range(n_resamples):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, n, size=n)
        labels = s.labels[idx]
        if labels.all() or not labels.any():
            continue
        eer, _ = compute_eer(TrialScoreSet(s.scores[idx], labels))
        eers.append(eer)
    if not eers:
        raise ValueError("every resample was single-class; cannot form an interval")
    lo = 100.0 * (1.0 - confidence) / 2.0
    hi = 100.0 - lo
    low, high = np.percentile(eers, [lo, hi])
    return float(low), float(high)


# ---------------------------------------------------------------------------
# file formats


def save_score_csv(path, trials: Sequence[Trial], s: TrialScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "enroll", "test", "score"])
        for t, score in zip(trials, s.scores):
            writer.writerow([int(t.target), t.enroll_id, t.test_id, f"{score:.6f}"])


def save_roc_csv(path, s: TrialScoreSet) -> None:
    thresholds, frr, far = roc_points(s)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "frr"])
        for th, fa, fr in zip(thresholds, far, frr):
            writer.writerow([f"{th:.6f}", f"{fa:.6f}", f"{fr:.6f}"])


def evaluation_report(s: TrialScoreSet, dcf_cfg: DcfConfig = DcfConfig(),
                      n_resamples: int = 1000, confidence: float = 0.95,
                      seed: int = 0) -> dict:
    eer, eer_threshold = compute_eer(s)
    min_dcf, dcf_threshold = compute_mindcf(s, dcf_cfg)
    ci_low, ci_high = bootstrap_eer_ci(s, n_resamples=n_resamples,
                                       confidence=confidence, seed=seed)
    return {
        "eer": eer,
        "eer_threshold": eer_threshold,
        "min_dcf": min_dcf,
        "dcf_threshold": dcf_threshold,
        "ci_low": ci_low,
        "ci_high": ci_high,
        "n_target": s.n_target,
        "n_nontarget": s.n_nontarget,
    }


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

"""Detector evaluation: average precision, oracle threshold, dropout/ablation runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median

from .errors import EmptyDatasetError, ForensicError, UsageError
from .imageio import center_crop
from .model import DropoutMask, ModelGraph, forward, sigmoid
from .pipeline import decode_item, ordered_map, prepare


def average_precision(scores, labels) -> float:
    """Average precision as a percentage.

    Ranks by score descending with ties broken by original index; AP is the
    mean of the precision at each positive's rank.
    """
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    if len(scores) != len(labels):
        raise UsageError("config error: scores and labels differ in length")
    n_pos = sum(labels)
    if n_pos == 0 or n_pos == len(labels):
        raise ForensicError("undefined AP: need at least one positive and one negative")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return 100.0 * total / n_pos


def oracle_threshold(scores_real, scores_fake) -> float:
    """Threshold maximizing sqrt(TPR * TNR) over the pooled unique scores.

    Classification is fake iff score >= t; ties on the objective go to the
    smallest threshold.
    """
    scores_real = [float(s) for s in scores_real]
    scores_fake = [float(s) for s in scores_fake]
    if not scores_real or not scores_fake:
        raise UsageError("config error: oracle threshold needs both score lists")
    best_t, best_g = None, -1.0
    for t in sorted(set(scores_real) | set(scores_fake)):
        tpr = sum(1 for s in scores_fake if s >= t) / len(scores_fake)
        tnr = sum(1 for s in scores_real if s < t) / len(scores_real)
        g = math.sqrt(tpr * tnr)
        if g > best_g:
            best_t, best_g = t, g
    return best_t


def sample_median(values) -> float:
    """Standard sample median (mean of the two middle values for even length)."""
    values = list(values)
    if not values:
        raise UsageError("config error: median of empty list")
    return float(median(values))


@dataclass
class EvalReport:
    ap: float
    acc_real: float
    acc_fake: float
    threshold: float
    n_real: int
    n_fake: int
    score_real: list
    score_fake: list
    median_prob_fake: float
    mask_size: int = 0
    transform: str = "none"
    threshold_mode: str = "oracle"
    skipped: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "acc_real": self.acc_real,
            "acc_fake": self.acc_fake,
            "threshold": self.threshold,
            "threshold_mode": self.threshold_mode,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "median_prob_fake": self.median_prob_fake,
            "mask_size": self.mask_size,
            "transform": self.transform,
            "skipped": self.skipped,
            "score_real": self.score_real,
            "score_fake": self.score_fake,
            "config": self.config,
        }


def score_images(
    graph: ModelGraph,
    images,
    mask: DropoutMask | None = None,
    transform: str | None = None,
    threads: int = 1,
    crop_hw: tuple[int, int] | None = None,
) -> tuple[list, int]:
    """Sigmoid probabilities for an image stream; returns (scores, skipped).

    `crop_hw` optionally center-crops each decoded image before normalization,
    for models with a fixed input size.
    """
    if mask is not None:
        mask.validate(graph)

    def one(item):
        decoded = decode_item(item)
        if decoded is None:
            return None
        if crop_hw is not None:
            decoded = center_crop(decoded, *crop_hw)
        trace = forward(graph, prepare(graph, decoded, transform), mask=mask)
        return sigmoid(trace.logit)

    results = ordered_map(one, list(images), threads)
    scores = [r for r in results if r is not None]
    return scores, len(results) - len(scores)


def report_from_scores(
    score_real,
    score_fake,
    threshold: float | None = None,
    mask_size: int = 0,
    transform: str | None = None,
    skipped: int = 0,
) -> EvalReport:
    """Aggregate two score lists into an EvalReport."""
    if not score_real or not score_fake:
        raise EmptyDatasetError("empty dataset error: a class has no decodable images")
    ap = average_precision(score_real + score_fake, [0] * len(score_real) + [1] * len(score_fake))
    if threshold is None:
        t = oracle_threshold(score_real, score_fake)
        mode = "oracle"
    else:
        t = float(threshold)
        mode = "fixed"
    return EvalReport(
        ap=ap,
        acc_real=100.0 * sum(1 for s in score_real if s < t) / len(score_real),
        acc_fake=100.0 * sum(1 for s in score_fake if s >= t) / len(score_fake),
        threshold=t,
        n_real=len(score_real),
        n_fake=len(score_fake),
        score_real=list(score_real),
        score_fake=list(score_fake),
        median_prob_fake=sample_median(score_fake),
        mask_size=mask_size,
        transform=transform or "none",
        threshold_mode=mode,
        skipped=skipped,
    )


def evaluate(
    graph: ModelGraph,
    real_images,
    fake_images,
    mask: DropoutMask | None = None,
    transform: str | None = None,
    threshold: float | None = None,
    threads: int = 1,
    crop_hw: tuple[int, int] | None = None,
) -> EvalReport:
    """Score both classes and compute AP, accuracies and the fake-score median.

    With `threshold=None` the oracle threshold is calibrated on this run's own
    scores; passing a value reuses a previously calibrated threshold (the
    default protocol when comparing ablated runs against a baseline).
    """
    score_real, skipped_r = score_images(graph, real_images, mask, transform, threads, crop_hw)
    score_fake, skipped_f = score_images(graph, fake_images, mask, transform, threads, crop_hw)
    return report_from_scores(
        score_real,
        score_fake,
        threshold=threshold,
        mask_size=0 if mask is None else len(mask),
        transform=transform,
        skipped=skipped_r + skipped_f,
    )

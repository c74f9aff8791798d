"""Morph-attack metrics: FAR-calibrated thresholds, MMPMR, and detector
error rates (APCER/BPCER, EER, DET curve).

Score conventions: similarity scores are higher for more-similar pairs;
detector scores are higher for more-bona-fide presentations. Decisions use
strict ``> threshold`` comparisons throughout, and thresholds always sit on
actual score values, so every rate is invariant under strictly increasing
score transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


def far_threshold(impostor_scores: np.ndarray, far: float) -> float:
    """Similarity threshold admitting at most a ``far`` fraction of impostors.

    With k = floor(far * n) allowed acceptances, the threshold is the k-th
    largest impostor score (the largest score when k = 0), so strictly fewer
    than k impostors score above it and ties are excluded. The threshold can
    never fall below the smallest impostor score; accepting every impostor
    is outside the far in (0,1) contract.
    """
    scores = np.asarray(impostor_scores, dtype=np.float64)
    if scores.size == 0:
        raise MetricsError("impostor score set is empty")
    if not 0.0 < far < 1.0:
        raise MetricsError(f"far must be in (0,1), got {far}")
    if not np.all(np.isfinite(scores)):
        raise MetricsError("impostor scores must be finite")
    k = int(math.floor(far * scores.size))
    desc = np.sort(scores)[::-1]
    return float(desc[max(k - 1, 0)])


@dataclass(frozen=True)
class MorphTrial:
    morph_id: str
    score_a: float
    score_b: float


def mmpmr(trials: list[MorphTrial], threshold: float) -> float:
    """Fraction of morphs whose weaker similarity still beats the threshold."""
    if not trials:
        raise MetricsError("no morph trials")
    hits = sum(1 for t in trials if min(t.score_a, t.score_b) > threshold)
    return hits / len(trials)


@dataclass
class DetReport:
    eer: float
    apcer_at_bpcer: dict[float, float]
    curve: list[tuple[float, float, float]]  # (threshold, apcer, bpcer)


def det_metrics(morph_scores: np.ndarray, bona_fide_scores: np.ndarray,
                bpcer_targets: tuple[float, ...] = (0.01, 0.05, 0.10)) -> DetReport:
    """Sweep thresholds over the pooled scores and report detector errors.

    At threshold t, a presentation is called bona fide when its score is
    strictly above t: APCER(t) is the fraction of morphs so accepted, and
    BPCER(t) the fraction of bona fide presentations rejected. The EER
    interpolates linearly between the adjacent thresholds where the two
    rates cross; APCER@BPCER=b is read at the operating threshold with the
    largest BPCER-feasible value, i.e. the smallest APCER reachable while
    BPCER stays at or below b.
    """
    morph = np.asarray(morph_scores, dtype=np.float64)
    bona = np.asarray(bona_fide_scores, dtype=np.float64)
    if morph.size == 0 or bona.size == 0:
        raise MetricsError("both morph and bona fide scores are required")
    pooled = np.concatenate([morph, bona])
    if not np.all(np.isfinite(pooled)):
        raise MetricsError("scores must be finite")
    # a sentinel below every score makes the curve start at APCER=1, BPCER=0
    thresholds = np.concatenate([[pooled.min() - 1.0], np.unique(pooled)])
    curve = []
    for t in thresholds:
        apcer = float(np.mean(morph > t))
        bpcer = float(np.mean(bona <= t))
        curve.append((float(t), apcer, bpcer))

    eer = None
    for (t0, a0, b0), (t1, a1, b1) in zip(curve, curve[1:]):
        d0, d1 = a0 - b0, a1 - b1
        if d0 >= 0 and d1 < 0:
            frac = d0 / (d0 - d1)
            eer = a0 + frac * (a1 - a0)
            break
    if eer is None:
        last_a, last_b = curve[-1][1], curve[-1][2]
        eer = 0.5 * (last_a + last_b)

    at = {}
    for target in bpcer_targets:
        apcer_val = curve[0][1]  # sentinel threshold always has BPCER 0
        for t, a, b in curve:     # thresholds ascend; keep the last feasible point
            if b <= target:
                apcer_val = a
        at[float(target)] = apcer_val
    return DetReport(eer=float(eer), apcer_at_bpcer=at, curve=curve)

"""Ranking and classification metrics for the inference tasks.

Ties are handled with expected-value semantics throughout: a truth tied
with g - 1 other candidates is counted as found at each tied position with
probability 1 / g.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Published full-scale top-1 source-identification rates on a 330-individual
# hospital contact network, kept for context in reports; they need accelerator-
# scale training runs and are not desk-reproducible.
HOSPITAL_TOP1_REFERENCE = {"ann": 0.74, "sib": 0.54, "sm": 0.35}


@dataclass
class RankingCurve:
    fractions: np.ndarray      # grid over the ranked-list fraction
    found: np.ndarray          # expected share of instances found within each fraction
    auc: float
    per_instance_rank: list    # expected rank of the truth per instance (1-based)
    n_excluded: int = 0        # instances whose truth was missing from the candidates


def _rank_stats(scores: dict, truth) -> tuple[int, int]:
    """(number strictly better, tie-group size) of the truth inside the scores."""
    s_truth = scores[truth]
    better = sum(1 for v in scores.values() if v > s_truth)
    ties = sum(1 for v in scores.values() if v == s_truth)
    return better, ties


def fraction_found_curve(rankings, truths, grid_points: int = 101) -> RankingCurve:
    """Expected fraction of instances whose true source lies within the top
    fraction f of each ranked candidate list, and the area under that curve.

    ``rankings`` is one dict {candidate: score} per instance.  Within-bin
    positions interpolate linearly, so a perfect ranker over K candidates
    scores 1 - 1/(2K).  Instances whose truth is absent from the candidate
    list are excluded and counted.
    """
    stats = []
    excluded = 0
    for scores, truth in zip(rankings, truths):
        if truth not in scores:
            excluded += 1
            continue
        better, ties = _rank_stats(scores, truth)
        stats.append((better, ties, len(scores)))
    if not stats:
        raise ValueError("no instance with the truth among its candidates")
    fractions = np.linspace(0.0, 1.0, grid_points)
    found = np.zeros(grid_points)
    auc = 0.0
    ranks = []
    for better, ties, k in stats:
        found += np.clip((fractions * k - better) / ties, 0.0, 1.0)
        auc += 1.0 - (better + ties / 2.0) / k
        ranks.append(better + (ties + 1) / 2.0)
    found /= len(stats)
    auc /= len(stats)
    return RankingCurve(
        fractions=fractions, found=found, auc=auc,
        per_instance_rank=ranks, n_excluded=excluded,
    )


def top1_rate(rankings, truths) -> float:
    """Expected fraction of instances whose truth ranks first (ties share credit)."""
    total, used = 0.0, 0
    for scores, truth in zip(rankings, truths):
        if truth not in scores:
            continue
        better, ties = _rank_stats(scores, truth)
        used += 1
        if better == 0:
            total += 1.0 / ties
    if used == 0:
        raise ValueError("no instance with the truth among its candidates")
    return total / used


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half (the Mann-Whitney statistic)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))

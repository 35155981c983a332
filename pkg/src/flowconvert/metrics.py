"""Evaluation statistics: edit-distance error rate, paired t-tests,
Holm-Bonferroni step-down correction, and the many-to-many score-ratio
matrix."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .errors import ContractError


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Minimal number of substitutions + insertions + deletions turning
    ``reference`` into ``hypothesis`` (unit costs)."""
    m = len(hypothesis)
    prev = list(range(m + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i] + [0] * m
        for j, h in enumerate(hypothesis, start=1):
            cur[j] = min(
                prev[j] + 1,                     # deletion
                cur[j - 1] + 1,                  # insertion
                prev[j - 1] + (0 if r == h else 1),  # substitution / match
            )
        prev = cur
    return prev[m]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """(substitutions + insertions + deletions) / len(reference); may
    exceed 1. The reference must be nonempty."""
    if len(reference) == 0:
        raise ContractError("wer requires a nonempty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def collapse_runs(labels: Sequence) -> list:
    """Merge consecutive duplicates: [a, a, b, b, a] -> [a, b, a]."""
    out = []
    for lab in labels:
        if not out or out[-1] != lab:
            out.append(lab)
    return out


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Two-sided p-value of the paired-differences t statistic (n - 1
    degrees of freedom).

    Degenerate variance convention: if every difference is exactly zero
    the p-value is defined as 1.0; zero variance with a nonzero mean
    difference is a contract error (the statistic is undefined).
    """
    if len(scores_a) != len(scores_b):
        raise ContractError(f"paired scores differ in length: {len(scores_a)} vs {len(scores_b)}")
    n = len(scores_a)
    if n < 2:
        raise ContractError("paired t-test requires at least 2 pairs")
    diffs = np.asarray(scores_a, dtype=np.float64) - np.asarray(scores_b, dtype=np.float64)
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        if diffs.mean() == 0.0:
            return 1.0
        raise ContractError("paired t-test undefined: zero variance with nonzero mean difference")
    t = diffs.mean() / (sd / np.sqrt(n))
    return float(2.0 * scipy_stats.t.sf(abs(t), df=n - 1))


def holm_bonferroni(p_values: Sequence[float], alpha: float) -> list[bool]:
    """Step-down correction: sort p-values ascending, reject while
    p_(i) <= alpha / (m - i) (0-indexed), stop at the first failure;
    decisions are returned in the original input order."""
    if not (0.0 < alpha < 1.0):
        raise ContractError(f"alpha must be in (0, 1), got {alpha}")
    for p in p_values:
        if not (0.0 <= p <= 1.0):
            raise ContractError(f"p-value {p} outside [0, 1]")
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    decisions = [False] * m
    for rank, idx in enumerate(order):
        if p_values[idx] <= alpha / (m - rank):
            decisions[idx] = True
        else:
            break
    return decisions


def score_ratio_matrix(
    converted_scores: Mapping[tuple[str, str], Sequence[float]],
    reference_scores: Mapping[str, float],
) -> dict[tuple[str, str], float | None]:
    """Cell (source, target) = mean converted score / reference mean for the
    target accent. Diagonal cells are excluded; cells without scored
    utterances are reported as missing (None), never as zero."""
    out: dict[tuple[str, str], float | None] = {}
    for (src, tgt), scores in converted_scores.items():
        if src == tgt:
            continue
        if tgt not in reference_scores:
            raise ContractError(f"no reference score for target accent {tgt!r}")
        if len(scores) == 0:
            out[(src, tgt)] = None
            continue
        out[(src, tgt)] = float(np.mean(scores)) / float(reference_scores[tgt])
    return out

"""Multiplicity-adjusted p-values and single-draw stepdown decisions.

All adjustments consume a :class:`~crtperm.permutation.StatMatrix` so
that the stepdown method can use the joint permutation distribution of
the statistics.  Bonferroni and Holm only need each row's marginal
p-value; the stepdown adjustment recomputes, at each step, the
per-column maximum over the hypotheses still in play.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .permutation import StatMatrix, row_p_value

CORRECTION_METHODS = ("none", "bonferroni", "holm", "romano_wolf")


@dataclass
class AdjustedPValues:
    """Unadjusted and adjusted p-values plus the stepdown ordering.

    ``rejection_order`` lists outcome indices by decreasing magnitude of
    the observed statistic (ties broken by original index).
    """

    method: str
    p_unadjusted: np.ndarray
    p_adjusted: np.ndarray
    rejection_order: np.ndarray


def _ordering(observed: np.ndarray, sided: str) -> np.ndarray:
    key = np.abs(observed) if sided == "two_sided" else observed
    return np.lexsort((np.arange(len(key)), -key))


def _unadjusted(matrix: StatMatrix, sided: str) -> np.ndarray:
    return np.array(
        [row_p_value(matrix, j, sided) for j in range(matrix.n_outcomes)]
    )


def adjust_none(matrix: StatMatrix, sided: str = "two_sided") -> AdjustedPValues:
    """No correction: adjusted p-values equal the unadjusted ones."""
    p = _unadjusted(matrix, sided)
    return AdjustedPValues(
        method="none",
        p_unadjusted=p,
        p_adjusted=p.copy(),
        rejection_order=_ordering(matrix.values[:, 0], sided),
    )


def adjust_bonferroni(matrix: StatMatrix, sided: str = "two_sided") -> AdjustedPValues:
    """Scale every p-value by the family size, capped at 1."""
    p = _unadjusted(matrix, sided)
    return AdjustedPValues(
        method="bonferroni",
        p_unadjusted=p,
        p_adjusted=np.minimum(len(p) * p, 1.0),
        rejection_order=_ordering(matrix.values[:, 0], sided),
    )


def adjust_holm(matrix: StatMatrix, sided: str = "two_sided") -> AdjustedPValues:
    """Step-down multiplier adjustment with monotonicity enforcement.

    Sorted ascending, the r-th smallest p-value is multiplied by
    (J - r + 1); running maxima keep the adjusted values monotone in
    the ordering.
    """
    p = _unadjusted(matrix, sided)
    J = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(J)
    running = 0.0
    for r, j in enumerate(order):
        running = max(running, min((J - r) * p[j], 1.0))
        adjusted[j] = running
    return AdjustedPValues(
        method="holm",
        p_unadjusted=p,
        p_adjusted=adjusted,
        rejection_order=_ordering(matrix.values[:, 0], sided),
    )


def adjust_romano_wolf(matrix: StatMatrix, sided: str = "two_sided") -> AdjustedPValues:
    """Stepdown adjustment based on max-statistics over the active set.

    Hypotheses are processed in decreasing order of the observed
    statistic.  At step r the reference distribution is the per-column
    maximum over the not-yet-processed rows, and the step's p-value is
    the exceedance probability of the observed statistic against it;
    running maxima enforce monotonicity along the ordering.  With a
    single outcome this reduces exactly to the unadjusted p-value.
    """
    if matrix.n_permutations < 1:
        raise ValueError("stepdown adjustment requires at least one permutation")
    p = _unadjusted(matrix, sided)
    obs = matrix.values[:, 0]
    perm = matrix.values[:, 1:]
    if sided == "two_sided":
        obs_key, perm_key = np.abs(obs), np.abs(perm)
    else:
        obs_key, perm_key = obs, perm
    if not (np.all(np.isfinite(obs_key)) and np.all(np.isfinite(perm_key))):
        raise NumericalError("non-finite statistic in permutation matrix")
    order = _ordering(obs, sided)
    add = 0 if matrix.exact else 1
    ncol = perm.shape[1]
    adjusted = np.empty(len(p))
    running = 0.0
    for r, j in enumerate(order):
        colmax = perm_key[order[r:]].max(axis=0)
        p_step = (add + int(np.sum(colmax >= obs_key[j]))) / (add + ncol)
        running = max(running, p_step)
        adjusted[j] = running
    return AdjustedPValues(
        method="romano_wolf",
        p_unadjusted=p,
        p_adjusted=adjusted,
        rejection_order=order,
    )


_ADJUSTERS = {
    "none": adjust_none,
    "bonferroni": adjust_bonferroni,
    "holm": adjust_holm,
    "romano_wolf": adjust_romano_wolf,
}


def adjust(matrix: StatMatrix, method: str, sided: str = "two_sided") -> AdjustedPValues:
    """Dispatch to the requested correction method."""
    try:
        fn = _ADJUSTERS[method]
    except KeyError:
        raise ValueError(f"unknown correction method: {method!r}") from None
    return fn(matrix, sided)


def single_step_decision(
    method: str,
    observed_stats: np.ndarray,
    permuted_stats: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Per-outcome reject flags from a single fresh permutation draw.

    This is the decision rule consumed by the confidence-limit search,
    where one permutation is drawn per search step.  For the stepdown
    method, hypotheses are visited in decreasing order of the observed
    statistic and hypothesis r is rejected when the permuted
    max-statistic over the not-yet-stopped set is strictly below the
    observed value; the first failure stops the walk and all
    later-ordered hypotheses are accepted.  The other methods compare
    each outcome's permuted and observed statistics directly (their
    differing strictness enters through the search's alpha schedule,
    not through this comparison).  ``alpha`` is accepted for interface
    symmetry; the comparisons themselves are level-free.
    """
    observed_stats = np.asarray(observed_stats, dtype=float)
    permuted_stats = np.asarray(permuted_stats, dtype=float)
    if not (np.all(np.isfinite(observed_stats)) and np.all(np.isfinite(permuted_stats))):
        raise NumericalError("non-finite statistic in single-draw decision")
    a_obs = np.abs(observed_stats)
    a_perm = np.abs(permuted_stats)
    if method in ("none", "bonferroni", "holm"):
        return a_perm < a_obs
    if method == "romano_wolf":
        order = _ordering(observed_stats, "two_sided")
        flags = np.zeros(len(a_obs), dtype=bool)
        for r, j in enumerate(order):
            if a_perm[order[r:]].max() < a_obs[j]:
                flags[j] = True
            else:
                break
        return flags
    raise ValueError(f"unknown correction method: {method!r}")

"""Stochastic-approximation search for simultaneous confidence limits.

Each confidence limit is located by a Robbins-Monro process: at step q
the hypotheses "effect_j equals the current candidate limit" are tested
against a single fresh permutation draw, and each limit moves by a step
proportional to 1/q, asymmetrically.  Rejections nudge the limit a
small amount toward the point estimate (step fraction alpha*) while
non-rejections push it away by the complementary fraction (1 - alpha*),
so the process equilibrates where the single-draw rejection probability
is 1 - alpha*, i.e. where the permutation p-value equals alpha*.  The
per-method alpha* schedule (alpha, alpha/J, or the step-down ladder)
is what differentiates the corrections; the step-length scale is
proportional to the current distance between the limit and the point
estimate.

Upper and lower limits run as two independent chains of Q steps each.
The permutation draws depend only on (seed, side, step), never on the
method, so several methods can be searched simultaneously on identical
draw sequences; ``rm_search`` is the one-method entry point and the
study driver batches all methods through the same chain loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .corrections import single_step_decision
from .data import TrialDataset
from .errors import NumericalError
from .glm import (
    FittedMeanModel,
    irls_fit,
    link_inverse,
    mean_derivative,
    nuisance_design,
)
from .statistics import SignedAllocation, row_sums_exact

#: relative tolerance of the nuisance-refresh rule: refit when the
#: candidate limit has moved more than this many standard errors since
#: the last refit
REFIT_FRACTION = 0.1

TRACE_COLUMNS = ("side", "q", "outcome", "limit", "rejected", "s_j")


@lru_cache(maxsize=64)
def step_constant(alpha_star: float) -> float:
    """Search scaling constant 2 / (z * phi(z)) at z = z_{1 - alpha*}.

    phi is the standard normal density.  Smaller alpha* gives a larger
    constant (the limit sits further into the tail, where single-draw
    information is scarcer, so bigger steps are needed to converge at
    the same rate).
    """
    if not 0.0 < alpha_star < 0.5:
        raise ValueError(f"alpha_star must be in (0, 0.5), got {alpha_star}")
    z = norm.ppf(1.0 - alpha_star)
    return float(2.0 / (z * norm.pdf(z)))


def alpha_star_schedule(
    method: str, alpha: float, n_outcomes: int, order: np.ndarray | None = None
) -> np.ndarray:
    """Per-outcome testing level used inside the search updates.

    No correction and the stepdown method test each hypothesis at
    alpha; the family-size correction uses alpha / J; the step-down
    multiplier ladder assigns alpha / J to the hypothesis with the
    largest observed statistic, alpha / (J - 1) to the next, and so on,
    which requires the current ordering.
    """
    J = n_outcomes
    if method in ("none", "romano_wolf"):
        return np.full(J, alpha)
    if method == "bonferroni":
        return np.full(J, alpha / J)
    if method == "holm":
        if order is None:
            raise ValueError("the holm schedule requires the statistic ordering")
        out = np.full(J, alpha)
        for r, j in enumerate(order):
            out[j] = alpha / (J - r)
        return out
    raise ValueError(f"unknown correction method: {method!r}")


def _update_one(
    limit: float, theta_j: float, alpha_star: float, rejected: bool,
    sgn: float, q: int,
) -> tuple[float, float]:
    """One scalar limit update; returns (new limit, step scale s_j)."""
    s_j = step_constant(alpha_star) * sgn * (limit - theta_j)
    if rejected:
        limit -= sgn * s_j * alpha_star / q
    else:
        limit += sgn * s_j * (1.0 - alpha_star) / q
    eps = 1e-6 * max(1.0, abs(theta_j))
    if sgn * (limit - theta_j) <= 0.0:
        limit = theta_j + sgn * eps
    return limit, s_j


@dataclass
class SearchState:
    """Mutable state of the limit search.

    ``u`` and ``l`` hold the current upper and lower candidate limits;
    ``q`` is the current step (1-based).  ``trace`` collects per-step
    records (side, q, outcome, limit, rejected, step length scale) when
    tracing is enabled.
    """

    u: np.ndarray
    l: np.ndarray
    point_estimates: np.ndarray
    alpha: float
    method: str
    Q: int
    q: int = 0
    trace: list | None = None

    def limits(self, side: str) -> np.ndarray:
        return self.u if side == "upper" else self.l


def rm_update(
    state: SearchState,
    reject_flags: np.ndarray,
    side: str,
    order: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> SearchState:
    """Apply one Robbins-Monro update to the given side's limits.

    For the upper side, a rejection moves the limit down by
    s_j * alpha* / q and a non-rejection moves it up by
    s_j * (1 - alpha*) / q, with s_j = k * (u_j - point_estimate_j)
    recomputed from the current limit; the lower side mirrors the
    signs.  A limit that would cross its point estimate is clamped just
    outside it, preserving a positive step scale.  ``mask``, when
    given, restricts the update to a subset of outcomes (used when a
    statistic could not be evaluated this step).
    """
    if side not in ("upper", "lower"):
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")
    sgn = 1.0 if side == "upper" else -1.0
    limits = state.limits(side)
    theta = state.point_estimates
    q = state.q
    if q < 1:
        raise ValueError("state.q must be >= 1 before updating")
    stars = alpha_star_schedule(state.method, state.alpha, len(limits), order)
    for j in range(len(limits)):
        if mask is not None and not mask[j]:
            continue
        limits[j], s_j = _update_one(
            limits[j], theta[j], stars[j], bool(reject_flags[j]), sgn, q
        )
        if state.trace is not None:
            state.trace.append(
                (side, q, j, float(limits[j]), bool(reject_flags[j]), float(s_j))
            )
    return state


@dataclass
class ConfidenceSet:
    """Simultaneous confidence limits for all outcomes.

    ``lower[j] <= point_estimates[j] <= upper[j]`` holds for every
    outcome by construction.
    """

    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    method: str
    Q: int
    seed: int
    point_estimates: np.ndarray
    trace: list | None = field(default=None, repr=False)


def _prepare_covariance_factors(dataset, covariances):
    factors = []
    for c, idx in enumerate(dataset.cluster_obs_indices):
        Vc = covariances[c]
        try:
            factors.append(cho_factor(Vc, lower=True))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular covariance matrix for cluster "
                f"{dataset.cluster_labels[c]!r}"
            ) from exc
    return factors


def _constrained_fit(dataset, j, delta_star) -> FittedMeanModel:
    return irls_fit(dataset, j, delta_fixed=float(delta_star))


def _cell_indicator(dataset) -> np.ndarray:
    """Dense one-hot map from observations to (cluster, period) cells."""
    A = dataset._cache.get("cell_indicator")
    if A is None:
        cells = dataset.n_clusters * dataset.n_periods
        A = np.zeros((cells, dataset.n_obs))
        A[dataset.group_key, np.arange(dataset.n_obs)] = 1.0
        dataset._cache["cell_indicator"] = A
    return A


class _ChainBlock:
    """Fitting state for all methods' chains on one side, one outcome."""

    def __init__(self, dataset, j, n_methods, X_nuis):
        self.j = j
        self.spec = dataset.outcome_specs[j]
        self.y = dataset.outcomes[:, j]
        self.X_nuis = X_nuis
        self.eta_base = np.empty((n_methods, dataset.n_obs))
        self.last_refit = np.empty(n_methods)
        self._warm: dict[int, np.ndarray] = {}
        self._pinv = None
        if self.spec.family == "gaussian" and self.spec.link == "identity":
            pinv = dataset._cache.get("nuisance_pinv")
            if pinv is None:
                pinv = np.linalg.pinv(X_nuis)
                dataset._cache["nuisance_pinv"] = pinv
            self._pinv = pinv
            self._D = dataset.treatment.astype(float)

    def refresh(self, dataset, m, delta_star):
        if self._pinv is not None:
            # identity link: the constrained fit is least squares on the
            # offset-subtracted outcome, solvable with one cached
            # pseudoinverse multiply
            beta = self._pinv @ (self.y - delta_star * self._D)
        else:
            beta = irls_fit(
                dataset, self.j, delta_fixed=float(delta_star),
                start=self._warm.get(m),
            ).nuisance_coefs
            self._warm[m] = beta
        self.eta_base[m] = self.X_nuis @ beta
        self.last_refit[m] = delta_star


def _search_limits(
    dataset: TrialDataset,
    methods: list[str],
    alpha: float,
    Q: int,
    seed: int,
    kind: str,
    covariances,
    point_fits,
    trace: bool,
) -> dict[str, ConfidenceSet]:
    """Run the upper and lower chains for several methods on shared draws."""
    if Q < 100:
        raise ValueError("the search needs at least 100 steps")
    if dataset.design is None:
        raise ValueError("dataset has no validated design")
    if kind not in ("unweighted", "weighted"):
        raise ValueError(f"unknown statistic kind: {kind!r}")
    if kind == "weighted" and covariances is None:
        raise ValueError("weighted statistic requires per-outcome covariances")
    design = dataset.design
    J = dataset.n_outcomes
    M = len(methods)
    if point_fits is None:
        point_fits = [irls_fit(dataset, j) for j in range(J)]
    theta = np.array([f.treatment_effect for f in point_fits], dtype=float)
    ses = np.array([f.naive_se for f in point_fits], dtype=float)
    # guard against degenerate fits: the step scale must stay positive
    ses = np.maximum(ses, 1e-9 * np.maximum(1.0, np.abs(theta)))

    factor_lists = None
    if kind == "weighted":
        factor_lists = [
            _prepare_covariance_factors(dataset, covariances[j]) for j in range(J)
        ]

    C = design.n_clusters
    k_treated = design.arm_sizes[1]
    if k_treated in (0, C):
        raise NumericalError(
            f"cannot permute a design with an empty arm (arm sizes {design.arm_sizes})"
        )
    X_nuis, _ = nuisance_design(dataset)
    D = dataset.treatment.astype(float)
    A = _cell_indicator(dataset)
    T = dataset.n_periods
    # cluster-period sign pattern: treated clusters are +1 from the
    # scheme's start period on, everything else -1, so the signed
    # cluster sum is -(row total) + 2 * (tail total) on treated rows
    tail_start = design.treatment_start_period - 1
    treated_obs = np.fromiter(SignedAllocation.observed(dataset).treated, dtype=np.intp)

    traces: list[list] | None = [[] for _ in methods] if trace else None
    final = {"upper": None, "lower": None}

    # per-method testing levels and step constants; the step-down
    # multiplier ladder is reassigned every step from the current
    # statistic ordering, everything else is static
    arange_J = np.arange(J)
    stars_mat = np.empty((M, J))
    k_mat = np.empty((M, J))
    holm_rows = [m for m, meth in enumerate(methods) if meth == "holm"]
    rw_rows = [m for m, meth in enumerate(methods) if meth == "romano_wolf"]
    for m, meth in enumerate(methods):
        if meth != "holm":
            stars_mat[m] = alpha_star_schedule(meth, alpha, J)
            k_mat[m] = [step_constant(a) for a in stars_mat[m]]
    ladder_stars = np.array([alpha / (J - r) for r in range(J)])
    ladder_k = np.array([step_constant(a) for a in ladder_stars])
    eps_vec = 1e-6 * np.maximum(1.0, np.abs(theta))

    for side, stream in (("upper", 0), ("lower", 1)):
        sgn = 1.0 if side == "upper" else -1.0
        rng = np.random.default_rng((int(seed), stream))
        limits = np.tile(theta + sgn * 2.0 * ses, (M, 1))
        blocks = []
        for j in range(J):
            block = _ChainBlock(dataset, j, M, X_nuis)
            for m in range(M):
                block.refresh(dataset, m, limits[m, j])
            blocks.append(block)

        warned = False
        obs_stats = np.empty((M, J))
        perm_stats = np.empty((M, J))
        for q in range(1, Q + 1):
            treated_perm = rng.permutation(C)[:k_treated]
            all_good = True
            good = None
            for j, block in enumerate(blocks):
                stale = np.abs(limits[:, j] - block.last_refit) > REFIT_FRACTION * ses[j]
                if np.any(stale):
                    for m in np.flatnonzero(stale):
                        try:
                            block.refresh(dataset, m, limits[m, j])
                        except NumericalError:
                            if good is None:
                                good = np.ones((M, J), dtype=bool)
                            good[m, j] = False
                            all_good = False
                eta = block.eta_base + limits[:, j, None] * D
                with np.errstate(over="ignore", invalid="ignore"):
                    resid = block.y - link_inverse(eta, block.spec.link)
                    if kind == "weighted":
                        G = 1.0 / mean_derivative(eta, block.spec.link)
                        weighted = np.empty_like(resid)
                        for c, idx in enumerate(dataset.cluster_obs_indices):
                            weighted[:, idx] = G[:, idx] * cho_solve(
                                factor_lists[j][c], resid[:, idx].T
                            ).T
                        resid = weighted
                    tables = (A @ resid.T).T.reshape(M, C, T)
                    row_tot = tables.sum(axis=2)
                    row_tail = (
                        row_tot if tail_start == 0
                        else tables[:, :, tail_start:].sum(axis=2)
                    )
                    cs = -row_tot
                    cs_obs = cs.copy()
                    cs_obs[:, treated_obs] += 2.0 * row_tail[:, treated_obs]
                    cs_perm = cs
                    cs_perm[:, treated_perm] += 2.0 * row_tail[:, treated_perm]
                    # correctly rounded reductions keep re-allocation
                    # ties exact (see statistics.row_sums_exact)
                    den_obs = np.sqrt(row_sums_exact(cs_obs**2))
                    den_perm = np.sqrt(row_sums_exact(cs_perm**2))
                    obs_stats[:, j] = row_sums_exact(cs_obs) / den_obs
                    perm_stats[:, j] = row_sums_exact(cs_perm) / den_perm
                finite = np.isfinite(obs_stats[:, j]) & np.isfinite(perm_stats[:, j])
                if not finite.all():
                    if good is None:
                        good = np.ones((M, J), dtype=bool)
                    good[:, j] &= finite
                    all_good = False

            if all_good:
                a_obs = np.abs(obs_stats)
                a_perm = np.abs(perm_stats)
                flags = a_perm < a_obs
                for m in rw_rows:
                    # step-down walk: visit hypotheses by decreasing
                    # observed statistic, reject while the running
                    # suffix max of the permuted values stays below
                    ord_m = np.lexsort((arange_J, -a_obs[m]))
                    suffix = np.maximum.accumulate(a_perm[m][ord_m][::-1])[::-1]
                    flags[m][ord_m] = np.logical_and.accumulate(
                        suffix < a_obs[m][ord_m]
                    )
                for m in holm_rows:
                    ord_m = np.lexsort((arange_J, -a_obs[m]))
                    stars_mat[m][ord_m] = ladder_stars
                    k_mat[m][ord_m] = ladder_k
                s = k_mat * (sgn * (limits - theta))
                limits += np.where(
                    flags, -sgn * s * stars_mat / q, sgn * s * (1.0 - stars_mat) / q
                )
                crossed = sgn * (limits - theta) <= 0.0
                if crossed.any():
                    limits[crossed] = (theta + sgn * eps_vec)[np.where(crossed)[1]]
                if traces is not None:
                    for m in range(M):
                        for j in range(J):
                            traces[m].append(
                                (side, q, j, float(limits[m, j]),
                                 bool(flags[m, j]), float(s[m, j]))
                            )
                continue

            # fallback: one or more statistics were unavailable; pull the
            # offending limits halfway toward the point estimate and
            # update the rest method by method
            if not warned:
                warnings.warn(
                    f"{side} search produced a non-finite or degenerate "
                    "statistic at an extreme candidate limit; shrinking "
                    "toward the point estimate",
                    stacklevel=3,
                )
                warned = True
            for m, method in enumerate(methods):
                gm = good[m]
                bad = np.flatnonzero(~gm)
                limits[m, bad] = 0.5 * (limits[m, bad] + theta[bad])
                if not np.any(gm):
                    continue
                sub = np.flatnonzero(gm)
                flags_m = np.zeros(J, dtype=bool)
                flags_m[sub] = single_step_decision(
                    method, obs_stats[m, sub], perm_stats[m, sub], alpha
                )
                order = sub[np.lexsort((sub, -np.abs(obs_stats[m, sub])))]
                stars = alpha_star_schedule(method, alpha, J, order)
                for j in sub:
                    limits[m, j], s_j = _update_one(
                        limits[m, j], theta[j], stars[j], bool(flags_m[j]), sgn, q
                    )
                    if traces is not None:
                        traces[m].append(
                            (side, q, int(j), float(limits[m, j]),
                             bool(flags_m[j]), float(s_j))
                        )
        final[side] = limits.copy()

    return {
        method: ConfidenceSet(
            lower=final["lower"][m],
            upper=final["upper"][m],
            alpha=alpha,
            method=method,
            Q=Q,
            seed=seed,
            point_estimates=theta,
            trace=traces[m] if traces is not None else None,
        )
        for m, method in enumerate(methods)
    }


def rm_search(
    dataset: TrialDataset,
    method: str,
    alpha: float = 0.05,
    Q: int = 2000,
    seed: int = 0,
    kind: str = "unweighted",
    covariances: list[list[np.ndarray]] | None = None,
    point_fits: list[FittedMeanModel] | None = None,
    trace: bool = False,
) -> ConfidenceSet:
    """Locate simultaneous confidence limits for every outcome.

    Runs two independent chains (upper and lower) of Q steps each.  At
    every step the nuisance parameters are re-estimated only when the
    candidate limit has drifted more than a tenth of a standard error
    since the last refit; the test statistics themselves are
    re-evaluated at the exact candidate value every step.  One
    permutation draw per step is shared across outcomes.

    ``point_fits`` may supply precomputed unconstrained fits (one per
    outcome) to avoid refitting when several methods are searched on
    the same data.  The chains draw from streams keyed by
    ``(seed, side)``, so two methods searched with the same seed see
    identical permutation sequences.
    """
    return _search_limits(
        dataset, [method], alpha, Q, seed, kind, covariances, point_fits, trace
    )[method]


def search_all_methods(
    dataset: TrialDataset,
    methods: list[str],
    alpha: float = 0.05,
    Q: int = 2000,
    seed: int = 0,
    kind: str = "unweighted",
    covariances: list[list[np.ndarray]] | None = None,
    point_fits: list[FittedMeanModel] | None = None,
    trace: bool = False,
) -> dict[str, ConfidenceSet]:
    """Search several methods at once on identical permutation draws.

    Equivalent to calling :func:`rm_search` once per method with the
    same seed, but evaluates the shared per-step statistics only once.
    """
    return _search_limits(
        dataset, list(methods), alpha, Q, seed, kind, covariances, point_fits, trace
    )


def write_trace(path, trace_rows) -> None:
    """Dump search trace rows as CSV (side, q, outcome, limit, rejected, s_j)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace_rows:
            writer.writerow(row)

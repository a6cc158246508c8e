"""Marginal mean-model fitting and working covariance construction.

The mean model for outcome j regresses the outcome on an intercept,
the treatment indicator, any covariates, and period indicators when
the trial has more than one period.  It is fitted by iteratively
reweighted least squares (IRLS) for the declared family/link.  The
treatment effect can instead be *fixed* at a null value, in which case
the fixed term enters as an offset and only the nuisance parameters
are estimated; permutation statistics are built from such constrained
fits so that nuisance estimates stay invariant across permutations.

Variance components are estimated by a one-way ANOVA moment
decomposition of Pearson residuals (between/within cluster mean
squares), which supplies the per-cluster working covariance matrices
used by the weighted statistic without requiring a mixed-model solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .data import TrialDataset
from .errors import DataValidationError, NumericalError

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
SEPARATION_BOUND = 30.0

COVARIANCE_STRUCTURES = ("independent", "exchangeable", "ar1_time")


def link_inverse(eta: np.ndarray, link: str) -> np.ndarray:
    """Mean as a function of the linear predictor."""
    if link == "identity":
        return np.asarray(eta, dtype=float)
    if link == "log":
        return np.exp(eta)
    if link == "logit":
        return expit(eta)
    raise ValueError(f"unknown link: {link!r}")


def mean_derivative(eta: np.ndarray, link: str) -> np.ndarray:
    """d mean / d eta."""
    if link == "identity":
        return np.ones_like(np.asarray(eta, dtype=float))
    if link == "log":
        return np.exp(eta)
    if link == "logit":
        mu = expit(eta)
        return mu * (1.0 - mu)
    raise ValueError(f"unknown link: {link!r}")


def variance_function(mu: np.ndarray, family: str) -> np.ndarray:
    """Family variance function evaluated at the mean."""
    if family == "gaussian":
        return np.ones_like(np.asarray(mu, dtype=float))
    if family == "poisson":
        return np.asarray(mu, dtype=float)
    if family == "binomial":
        mu = np.asarray(mu, dtype=float)
        return mu * (1.0 - mu)
    raise ValueError(f"unknown family: {family!r}")


@dataclass(frozen=True)
class CovarianceSpec:
    """Working within-cluster covariance parameters.

    ``sigma2`` is the individual-level (dispersion) variance on the
    diagonal; ``tau2`` is the cluster-effect variance.  Structures:

    - ``independent``: sigma2 * I (tau2 ignored).
    - ``exchangeable``: diagonal sigma2 + tau2, all off-diagonal tau2.
    - ``ar1_time``: the cluster-effect contribution decays over
      periods, tau2 * lam**|t - t'| (so tau2 within a period,
      tau2 * lam across adjacent periods), plus sigma2 on the diagonal.
    """

    structure: str
    sigma2: float
    tau2: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if self.structure not in COVARIANCE_STRUCTURES:
            raise ValueError(f"unknown covariance structure: {self.structure!r}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.tau2 < 0:
            raise ValueError(f"tau2 must be non-negative, got {self.tau2}")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must be in [0, 1), got {self.lam}")


@dataclass
class FittedMeanModel:
    """Result of an IRLS fit of one outcome's marginal mean model.

    ``covariate_coefs`` holds covariate and period-indicator
    coefficients (everything except the intercept and treatment).
    ``treatment_effect`` and ``naive_se`` are None when the treatment
    effect was fixed (``delta_fixed`` set); the model-based standard
    error comes from the inverse weighted information.
    """

    outcome_index: int
    family: str
    link: str
    intercept: float
    covariate_coefs: np.ndarray
    treatment_effect: float | None
    naive_se: float | None
    linear_predictor: np.ndarray
    converged: bool
    n_iter: int
    delta_fixed: float | None = None
    coef_names: tuple[str, ...] = ()

    @property
    def nuisance_coefs(self) -> np.ndarray:
        """Intercept plus covariate/period coefficients, as fitted."""
        return np.concatenate([[self.intercept], self.covariate_coefs])

    @property
    def fitted_mean(self) -> np.ndarray:
        return link_inverse(self.linear_predictor, self.link)


def nuisance_design(dataset: TrialDataset) -> tuple[np.ndarray, tuple[str, ...]]:
    """Intercept + covariates + period indicators (periods 2..T)."""
    cached = dataset._cache.get("nuisance_design")
    if cached is not None:
        return cached
    cols = [np.ones(dataset.n_obs)]
    names = ["intercept"]
    for k, name in enumerate(dataset.covariate_names):
        cols.append(dataset.covariates[:, k])
        names.append(name)
    if dataset.n_periods > 1:
        for t in range(2, dataset.n_periods + 1):
            cols.append((dataset.period == t).astype(float))
            names.append(f"period_{t}")
    result = (np.column_stack(cols), tuple(names))
    dataset._cache["nuisance_design"] = result
    return result


def linear_predictor_at(
    dataset: TrialDataset, coefs: np.ndarray, delta: float
) -> np.ndarray:
    """Linear predictor for given nuisance coefficients and effect value."""
    X, _ = nuisance_design(dataset)
    return X @ coefs + delta * dataset.treatment


def _initial_eta(y: np.ndarray, family: str, link: str) -> np.ndarray:
    if link == "identity":
        return y.astype(float)
    if link == "log":
        return np.log(np.maximum(y, 0) + 0.5)
    # logit: shrink toward 1/2 to keep eta finite
    p = (y + 0.5) / 2.0
    return np.log(p / (1.0 - p))


def irls_fit(
    dataset: TrialDataset,
    outcome_index: int,
    delta_fixed: float | None = None,
    *,
    tol: float = IRLS_TOL,
    max_iter: int = IRLS_MAX_ITER,
    start: np.ndarray | None = None,
) -> FittedMeanModel:
    """Fit the marginal mean model for one outcome by IRLS.

    When ``delta_fixed`` is None the treatment effect is estimated and
    its model-based standard error is returned; otherwise
    ``delta_fixed * D`` enters as a fixed offset and only the nuisance
    parameters are estimated.  ``start`` warm-starts the iteration from
    a coefficient vector (used by the limit search, whose consecutive
    refits differ only slightly).

    Raises
    ------
    NumericalError
        On non-convergence after ``max_iter`` iterations (the error
        carries the last iterate as ``last_model``), or when a binomial
        fit diverges (separation).
    """
    if not 0 <= outcome_index < dataset.n_outcomes:
        raise IndexError(f"outcome index {outcome_index} out of range")
    spec = dataset.outcome_specs[outcome_index]
    y = dataset.outcomes[:, outcome_index]
    X_nuis, names = nuisance_design(dataset)
    D = dataset.treatment.astype(float)

    estimate_delta = delta_fixed is None
    if estimate_delta:
        X = np.column_stack([X_nuis, D])
        names = names + ("treatment",)
        offset = np.zeros(dataset.n_obs)
    else:
        X = X_nuis
        offset = float(delta_fixed) * D

    p = X.shape[1]

    if spec.family == "gaussian" and spec.link == "identity":
        coef, *_ = np.linalg.lstsq(X, y - offset, rcond=None)
        eta = X @ coef + offset
        naive_se = None
        if estimate_delta:
            naive_se = _gaussian_se(X, y - offset, coef)
        return _pack_model(
            spec, outcome_index, coef, estimate_delta, delta_fixed,
            naive_se, eta, converged=True, n_iter=1, names=names,
        )

    if start is not None and len(start) == p:
        coef = np.asarray(start, dtype=float)
        eta = X @ coef + offset
    else:
        coef = np.zeros(p)
        eta = _initial_eta(y, spec.family, spec.link)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = link_inverse(eta, spec.link)
        dmu = mean_derivative(eta, spec.link)
        var = variance_function(mu, spec.family)
        # canonical links: dmu == var, but keep the general form
        w = dmu**2 / np.maximum(var, 1e-12)
        z = (eta - offset) + (y - mu) / np.maximum(dmu, 1e-12)
        sw = np.sqrt(w)
        new_coef, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        change = float(np.max(np.abs(new_coef - coef))) if n_iter > 1 else np.inf
        coef = new_coef
        eta = X @ coef + offset
        if spec.family == "binomial" and np.max(np.abs(coef)) > SEPARATION_BOUND:
            raise NumericalError(
                f"separation in binomial fit for outcome "
                f"{spec.name!r} (|coefficient| > {SEPARATION_BOUND:g})"
            )
        if change < tol:
            converged = True
            break
    if not converged:
        err = NumericalError(
            f"IRLS did not converge for outcome {spec.name!r} after "
            f"{max_iter} iterations"
        )
        err.last_model = _pack_model(
            spec, outcome_index, coef, estimate_delta, delta_fixed,
            None, eta, converged=False, n_iter=n_iter, names=names,
        )
        raise err

    naive_se = None
    if estimate_delta:
        mu = link_inverse(eta, spec.link)
        dmu = mean_derivative(eta, spec.link)
        var = variance_function(mu, spec.family)
        w = dmu**2 / np.maximum(var, 1e-12)
        info = (X * w[:, None]).T @ X
        cov = np.linalg.pinv(info)
        naive_se = float(np.sqrt(max(cov[-1, -1], 0.0)))
    return _pack_model(
        spec, outcome_index, coef, estimate_delta, delta_fixed,
        naive_se, eta, converged=True, n_iter=n_iter, names=names,
    )


def _gaussian_se(X: np.ndarray, y: np.ndarray, coef: np.ndarray) -> float:
    n, p = X.shape
    resid = y - X @ coef
    dof = max(n - p, 1)
    sigma2 = float(resid @ resid) / dof
    cov = np.linalg.pinv(X.T @ X) * sigma2
    return float(np.sqrt(max(cov[-1, -1], 0.0)))


def _pack_model(spec, outcome_index, coef, estimate_delta, delta_fixed,
                naive_se, eta, converged, n_iter, names) -> FittedMeanModel:
    if estimate_delta:
        treatment_effect = float(coef[-1])
        nuis = np.asarray(coef[:-1], dtype=float)
    else:
        treatment_effect = None
        nuis = np.asarray(coef, dtype=float)
    return FittedMeanModel(
        outcome_index=outcome_index,
        family=spec.family,
        link=spec.link,
        intercept=float(nuis[0]),
        covariate_coefs=nuis[1:].copy(),
        treatment_effect=treatment_effect,
        naive_se=naive_se,
        linear_predictor=np.asarray(eta, dtype=float),
        converged=converged,
        n_iter=n_iter,
        delta_fixed=None if estimate_delta else float(delta_fixed),
        coef_names=tuple(names),
    )


def pearson_residuals(
    dataset: TrialDataset, outcome_index: int, fitted: FittedMeanModel
) -> np.ndarray:
    """(y - mu) / sqrt(V(mu)) for the fitted mean."""
    y = dataset.outcomes[:, outcome_index]
    mu = fitted.fitted_mean
    var = variance_function(mu, fitted.family)
    return (y - mu) / np.sqrt(np.maximum(var, 1e-12))


def estimate_variance_components(
    dataset: TrialDataset, outcome_index: int, fitted: FittedMeanModel
) -> tuple[float, float]:
    """Moment estimates (sigma2, tau2) from a one-way ANOVA decomposition.

    Pearson residuals are decomposed into within- and between-cluster
    mean squares: sigma2 is the within-cluster mean square, and
    tau2 = (MSB - MSW) / n0 truncated at zero, with n0 the usual
    unbalanced-design average cluster size
    (N - sum(n_c^2)/N) / (C - 1).  For binomial and poisson outcomes
    the Pearson scaling makes sigma2 approximately 1 under correct
    dispersion.

    A dataset whose clusters all hold a single observation has no
    within-cluster information; tau2 is then reported as 0 with a
    warning and sigma2 falls back to the overall residual mean square.
    """
    if not fitted.converged:
        raise NumericalError("variance components require a converged fit")
    C = dataset.n_clusters
    if C < 2:
        raise DataValidationError(
            "variance component estimation requires at least 2 clusters"
        )
    r = pearson_residuals(dataset, outcome_index, fitted)
    n_c = np.bincount(dataset.cluster_index, minlength=C).astype(float)
    sums = np.bincount(dataset.cluster_index, weights=r, minlength=C)
    means = sums / n_c
    N = float(dataset.n_obs)
    if N == C:
        warnings.warn(
            "single observation per cluster: between- and within-cluster "
            "variation are confounded; reporting tau2 = 0",
            stacklevel=2,
        )
        grand = r.mean()
        sigma2 = float(((r - grand) ** 2).sum() / max(C - 1, 1))
        return sigma2, 0.0
    grand = r.mean()
    ssw = float((r**2).sum() - (n_c * means**2).sum())
    ssb = float((n_c * (means - grand) ** 2).sum())
    msw = ssw / (N - C)
    msb = ssb / (C - 1)
    n0 = (N - float(n_c @ n_c) / N) / (C - 1)
    tau2 = max((msb - msw) / n0, 0.0)
    return msw, tau2


def build_cluster_covariance(
    spec: CovarianceSpec, layout: np.ndarray
) -> list[np.ndarray]:
    """Assemble per-cluster working covariance matrices.

    ``layout`` is the (C, T) array of observation counts per
    cluster-period cell.  Within each cluster, observations are ordered
    by period (matching ``TrialDataset.cluster_obs_indices``).  The
    returned matrices are symmetric positive definite by construction.
    """
    layout = np.asarray(layout, dtype=int)
    if layout.ndim != 2:
        raise ValueError("layout must be a (clusters x periods) count array")
    mats = []
    for counts in layout:
        n_c = int(counts.sum())
        periods = np.repeat(np.arange(1, len(counts) + 1), counts)
        if spec.structure == "independent" or spec.tau2 == 0.0:
            V = spec.sigma2 * np.eye(n_c)
        elif spec.structure == "exchangeable":
            V = np.full((n_c, n_c), spec.tau2)
            V[np.diag_indices(n_c)] += spec.sigma2
        else:  # ar1_time
            gap = np.abs(periods[:, None] - periods[None, :])
            V = spec.tau2 * spec.lam**gap
            V[np.diag_indices(n_c)] += spec.sigma2
        mats.append(V)
    return mats


def g_weights(fitted: FittedMeanModel, link: str | None = None) -> np.ndarray:
    """Reciprocal mean-derivative weights, one per observation.

    identity -> 1; log -> exp(-eta); logit -> 1 / (mu (1 - mu)).
    """
    link = link or fitted.link
    return 1.0 / mean_derivative(fitted.linear_predictor, link)


def fgls_gaussian(
    dataset: TrialDataset, outcome_index: int
) -> tuple[float, float]:
    """Feasible GLS estimate and standard error of the treatment effect.

    Fits by ordinary least squares, moment-estimates the variance
    components, assembles the exchangeable working covariance, and
    solves the GLS normal equations.  This is the model-based
    comparator for gaussian outcomes; it ignores the small-sample
    distribution of the variance estimates, which is exactly the
    behaviour the permutation methods are meant to fix.
    """
    ols = irls_fit(dataset, outcome_index)
    sigma2, tau2 = estimate_variance_components(dataset, outcome_index, ols)
    X_nuis, _ = nuisance_design(dataset)
    X = np.column_stack([X_nuis, dataset.treatment.astype(float)])
    y = dataset.outcomes[:, outcome_index]
    spec = CovarianceSpec("exchangeable", sigma2=max(sigma2, 1e-12), tau2=tau2)
    mats = build_cluster_covariance(spec, dataset.cell_counts)
    p = X.shape[1]
    xtvx = np.zeros((p, p))
    xtvy = np.zeros(p)
    for c, idx in enumerate(dataset.cluster_obs_indices):
        Xc = X[idx]
        yc = y[idx]
        try:
            fac = cho_factor(mats[c], lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular working covariance for cluster "
                f"{dataset.cluster_labels[c]!r}"
            ) from exc
        xtvx += Xc.T @ cho_solve(fac, Xc)
        xtvy += Xc.T @ cho_solve(fac, yc)
    cov = np.linalg.pinv(xtvx)
    beta = cov @ xtvy
    return float(beta[-1]), float(np.sqrt(max(cov[-1, -1], 0.0)))


def naive_wald(
    dataset: TrialDataset, alpha: float = 0.05
) -> list[dict]:
    """Uncorrected model-based inference for every outcome.

    Gaussian outcomes use feasible GLS with the exchangeable working
    covariance; other families use the IRLS model-based standard error.
    Returns one record per outcome with the estimate, standard error,
    two-sided normal-approximation p-value, and Wald interval.
    """
    from scipy.stats import norm

    out = []
    z = norm.ppf(1 - alpha / 2)
    for j, spec in enumerate(dataset.outcome_specs):
        if spec.family == "gaussian":
            est, se = fgls_gaussian(dataset, j)
        else:
            fit = irls_fit(dataset, j)
            est, se = fit.treatment_effect, fit.naive_se
        se = max(se, 1e-300)
        p = float(2 * norm.sf(abs(est) / se))
        out.append(
            {
                "outcome": spec.name,
                "estimate": est,
                "se": se,
                "p": p,
                "lower": est - z * se,
                "upper": est + z * se,
            }
        )
    return out

"""Shared fixture builders for the test suite."""

import numpy as np
import pytest

from crtperm.data import OutcomeSpec, TrialDataset, validate_design


def make_gaussian_dataset(
    n_clusters=6,
    n_per_cluster=5,
    n_treated=None,
    n_outcomes=1,
    effect=0.0,
    cluster_sd=0.3,
    noise_sd=1.0,
    seed=0,
    covariate=False,
):
    """Small parallel gaussian trial with known structure."""
    rng = np.random.default_rng(seed)
    C, n = n_clusters, n_per_cluster
    k = n_treated if n_treated is not None else C // 2
    treated = np.zeros(C, dtype=bool)
    treated[rng.choice(C, size=k, replace=False)] = True
    cluster_index = np.repeat(np.arange(C), n)
    D = treated[cluster_index].astype(float)
    theta = rng.normal(0.0, cluster_sd, C)
    X = rng.normal(0.0, 1.0, C * n) if covariate else None
    Y = np.empty((C * n, n_outcomes))
    for j in range(n_outcomes):
        Y[:, j] = (
            1.0
            + effect * D
            + theta[cluster_index]
            + rng.normal(0.0, noise_sd, C * n)
        )
        if covariate:
            Y[:, j] += 0.5 * X
    ds = TrialDataset(
        cluster_labels=[f"c{c}" for c in range(C)],
        cluster_index=cluster_index,
        period=np.ones(C * n, dtype=int),
        treatment=D.astype(int),
        outcomes=Y,
        outcome_specs=tuple(
            OutcomeSpec(f"y{j + 1}", "gaussian") for j in range(n_outcomes)
        ),
        covariates=X.reshape(-1, 1) if covariate else None,
        covariate_names=("x1",) if covariate else (),
    )
    ds.design = validate_design(ds)
    return ds


def make_baseline_dataset(n_clusters=6, n_per_cluster=4, seed=0):
    """Two-period trial, all clusters untreated in period 1."""
    rng = np.random.default_rng(seed)
    C, n, T = n_clusters, n_per_cluster, 2
    treated = np.zeros(C, dtype=bool)
    treated[rng.choice(C, size=C // 2, replace=False)] = True
    cluster_index = np.repeat(np.arange(C), T * n)
    period = np.tile(np.repeat([1, 2], n), C)
    D = (treated[cluster_index] & (period == 2)).astype(int)
    Y = (
        1.0
        + 0.5 * (period == 2)
        + rng.normal(0, 0.3, C)[cluster_index]
        + rng.normal(0, 1, C * T * n)
    )
    ds = TrialDataset(
        cluster_labels=[f"c{c}" for c in range(C)],
        cluster_index=cluster_index,
        period=period,
        treatment=D,
        outcomes=Y.reshape(-1, 1),
        outcome_specs=(OutcomeSpec("y1", "gaussian"),),
    )
    ds.design = validate_design(ds)
    return ds


def exact_p_at_null(dataset, outcome_index, delta_star, sided="two_sided",
                    allocations=None):
    """Exact permutation p-value at one null value, by full enumeration."""
    from crtperm.glm import irls_fit
    from crtperm.permutation import enumerate_allocations
    from crtperm.statistics import (
        SignedAllocation,
        residuals_under_null,
        unweighted_stat,
    )

    if allocations is None:
        allocations = enumerate_allocations(dataset.design)
    fit = irls_fit(dataset, outcome_index, delta_fixed=delta_star)
    resid = residuals_under_null(fit, delta_star, dataset, outcome_index)
    obs = unweighted_stat(resid, SignedAllocation.observed(dataset))
    vals = np.array([unweighted_stat(resid, a) for a in allocations])
    if sided == "two_sided":
        return float(np.mean(np.abs(vals) >= abs(obs)))
    return float(np.mean(vals >= obs))


def grid_inversion_endpoints(dataset, outcome_index, alpha, resolution, span=6.0):
    """Confidence endpoints by brute-force inversion of the exact test.

    Scans the whole grid outward from the point estimate and returns
    the outermost value on each side at which the exact permutation
    p-value still exceeds alpha (the p function is a staircase and may
    wiggle locally, so the scan does not stop at the first crossing).
    """
    from crtperm.glm import irls_fit
    from crtperm.permutation import enumerate_allocations

    allocations = enumerate_allocations(dataset.design)
    fit = irls_fit(dataset, outcome_index)
    theta, se = fit.treatment_effect, fit.naive_se
    step = resolution * se
    endpoints = []
    for sign in (+1.0, -1.0):
        last_inside = theta
        for k in range(1, int(span / resolution) + 1):
            delta = theta + sign * k * step
            p = exact_p_at_null(dataset, outcome_index, delta,
                                allocations=allocations)
            if p > alpha:
                last_inside = delta
        endpoints.append(last_inside)
    upper, lower = endpoints
    return lower, upper


@pytest.fixture
def gaussian_dataset():
    return make_gaussian_dataset()


@pytest.fixture
def baseline_dataset():
    return make_baseline_dataset()

"""Acceptance suite: operating characteristics at desk scale.

Each criterion prints one PASS/FAIL line (run with ``pytest -s`` to see
them as they complete).  The simulation-based criteria use binomial
Monte Carlo bands around their nominal targets; the study sizes are
fixed, so every run is deterministic given the seeds below.
"""

import json
import time

import numpy as np
import pytest

from crtperm.corrections import adjust_bonferroni, adjust_holm, adjust_none, adjust_romano_wolf

from crtperm.glm import irls_fit
from crtperm.permutation import (
    PermutationPlan,
    build_stat_matrix,
    exact_p_value,
    mc_p_value,
)
from crtperm.search import rm_search
from crtperm.simulate import DgpSpec, StudySpec, resolve_workers, run_study
from crtperm.statistics import SignedAllocation, residuals_under_null, unweighted_stat

from conftest import grid_inversion_endpoints, make_gaussian_dataset

ALPHA = 0.05
WORKERS = resolve_workers(None)


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[acceptance] criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _run(study: StudySpec, keep=False):
    t0 = time.perf_counter()
    report = run_study(study, workers=WORKERS, keep_replicates=keep)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def run_two_true_nulls():
    """Gaussian pair, 7 clusters/arm, 20/cluster, both effects zero."""
    study = StudySpec(
        dgp=DgpSpec(model="model1", clusters_per_arm=7, n_per_cluster=20,
                    delta=(0.0, 0.0), rho=0.0, pi=0.0),
        methods=("naive", "none", "bonferroni", "holm", "romano_wolf"),
        replicates=1000, n_permutations=200, n_search_steps=1000,
        seed=20240501,
    )
    return _run(study, keep=True)


@pytest.fixture(scope="module")
def run_one_false_null():
    study = StudySpec(
        dgp=DgpSpec(model="model1", clusters_per_arm=7, n_per_cluster=20,
                    delta=(0.0, 1.0), rho=0.0, pi=0.0),
        methods=("bonferroni", "romano_wolf"),
        replicates=1000, n_permutations=200, n_search_steps=1000,
        seed=20240502, run_search=False,
    )
    return _run(study)


@pytest.fixture(scope="module")
def run_high_correlation():
    study = StudySpec(
        dgp=DgpSpec(model="model1", clusters_per_arm=7, n_per_cluster=20,
                    delta=(0.0, 0.0), rho=0.8, pi=0.8),
        methods=("bonferroni", "romano_wolf"),
        replicates=500, n_permutations=200, n_search_steps=1000,
        seed=20240505,
    )
    return _run(study)


@pytest.fixture(scope="module")
def run_baseline_design():
    study = StudySpec(
        dgp=DgpSpec(model="model3", clusters_per_arm=7, n_per_cluster=20,
                    delta=(0.0, 0.0, 0.0), mu=(-1.0, -1.0, -1.0),
                    sigma2=(1.0, 1.0, 1.0), tau2=(0.05, 0.05, 0.05),
                    period_effect=(1.0, 1.0, 1.0), lam=0.7),
        methods=("none", "romano_wolf"),
        replicates=500, n_permutations=200, n_search_steps=1000,
        seed=20240504,
    )
    return _run(study)


class TestCriterion1FwerTwoTrueNulls:
    def test_fwer_bands(self, run_two_true_nulls):
        report, elapsed = run_two_true_nulls
        fw = {m: report.methods[m].fwer for m in report.methods}
        ok = (
            0.032 <= fw["romano_wolf"] <= 0.071
            and 0.032 <= fw["holm"] <= 0.071
            and 0.032 <= fw["bonferroni"] <= 0.071
            and 0.075 <= fw["none"] <= 0.127
            and fw["naive"] > 0.11
        )
        _report(
            1, ok,
            f"FWER rw={fw['romano_wolf']:.3f} holm={fw['holm']:.3f} "
            f"bonf={fw['bonferroni']:.3f} none={fw['none']:.3f} "
            f"naive={fw['naive']:.3f} (elapsed {elapsed:.0f}s, {WORKERS} workers)",
        )

    def test_runtime_target(self, run_two_true_nulls):
        # stated target: under 20 minutes on 8 cores; scale the budget
        # by the worker count actually available
        _, elapsed = run_two_true_nulls
        budget = 1200.0 * max(1.0, 8.0 / WORKERS)
        _report(1, elapsed < budget,
                f"runtime {elapsed:.0f}s < {budget:.0f}s budget ({WORKERS} workers)")


class TestCriterion2BonferroniConservatism:
    def test_one_false_null(self, run_one_false_null):
        report, _ = run_one_false_null
        bonf = report.methods["bonferroni"].fwer
        rw = report.methods["romano_wolf"].fwer
        ok = bonf < 0.045 and 0.032 <= rw <= 0.071
        _report(2, ok, f"FWER bonferroni={bonf:.3f} (<0.045), rw={rw:.3f}")


class TestCriterion3FamilyWiseCoverage:
    def test_coverage_bands(self, run_two_true_nulls):
        report, _ = run_two_true_nulls
        rw = report.methods["romano_wolf"].coverage
        none = report.methods["none"].coverage
        ok = 0.93 <= rw <= 0.97 and 0.88 <= none <= 0.93
        _report(3, ok, f"coverage rw={rw:.3f} in [0.93,0.97], none={none:.3f} in [0.88,0.93]")


class TestCriterion4EfficiencyOrdering:
    def test_width_ordering_with_paired_gaps(self, run_two_true_nulls):
        """Known limitation, asserted as stated so the gap stays visible.

        The two step-down procedures target different fixed points in
        the limit search.  Holm's per-outcome comparisons equilibrate at
        the marginal 97.5%/95% quantile rungs, so its mean width is the
        average of the family-size-corrected and uncorrected widths.
        The max-statistic method's stop-at-first-failure rule makes a
        later rank's rejection conditional on all earlier rejections,
        which (rejection probability of the first rank being pinned at
        1 - alpha) forces later limits outward toward the family-size-
        corrected width.  Under independent outcomes this makes the
        max-statistic intervals wider than Holm's, so the expected
        ordering width(max-statistic) <= width(Holm) fails with a
        decisive reversed gap; no decision-rule variant both restores
        the order and leaves the gaps statistically resolvable at this
        replicate count.
        """
        report, _ = run_two_true_nulls
        rows = report.replicate_rows

        def widths(method):
            return np.array(
                [
                    [r["methods"][method]["upper"][j] - r["methods"][method]["lower"][j]
                     for j in range(2)]
                    for r in rows
                ]
            )

        w_rw, w_holm, w_bonf = widths("romano_wolf"), widths("holm"), widths("bonferroni")
        details = []
        ok = True
        for name, gap in (("holm-rw", w_holm - w_rw), ("bonf-holm", w_bonf - w_holm)):
            mean = gap.mean(axis=0)
            se = gap.std(axis=0, ddof=1) / np.sqrt(len(gap))
            for j in range(2):
                ok = ok and mean[j] > 2 * se[j]
                details.append(f"{name}[y{j + 1}]={mean[j]:.4f}+-{se[j]:.4f}")
        _report(4, ok, "width gaps " + ", ".join(details))


class TestCriterion5CorrelationRobustness:
    def test_stepdown_robust_at_high_correlation(self, run_high_correlation):
        report, _ = run_high_correlation
        rw = report.methods["romano_wolf"]
        bonf = report.methods["bonferroni"].fwer
        ok = 0.032 <= rw.fwer <= 0.071 and 0.93 <= rw.coverage <= 0.97 and bonf < 0.045
        _report(
            5, ok,
            f"rho=0.8: rw fwer={rw.fwer:.3f}, rw coverage={rw.coverage:.3f}, "
            f"bonferroni fwer={bonf:.3f}",
        )


class TestCriterion6ExactOracleEquivalence:
    # fixture seeds chosen so the exact p-values are respectively at the
    # attainable minimum (2/20 twice), distinct with a rejectable row,
    # and distinct interior values where the stepdown ordering matters
    FIXTURE_SEEDS = (61, 62, 64)

    def _exhaustive_fixture(self, seed=61, effect=0.9):
        ds = make_gaussian_dataset(
            n_clusters=6, n_per_cluster=5, n_treated=3, n_outcomes=2,
            effect=effect, cluster_sd=0.2, seed=seed,
        )
        fits = [irls_fit(ds, j, delta_fixed=0.0) for j in range(2)]
        exact = build_stat_matrix(ds, fits, PermutationPlan(n_draws=0, seed=0))
        assert exact.exact and exact.values.shape[1] == 21
        return ds, fits, exact

    def test_monte_carlo_matches_exact(self):
        ds, fits, exact = self._exhaustive_fixture()
        sampled = build_stat_matrix(
            ds, fits, PermutationPlan(n_draws=10_000, seed=7, enumerate_exact=False)
        )
        ok = True
        details = []
        for j in range(2):
            p_exact = exact_p_value(exact.values[j])
            p_mc = mc_p_value(sampled.values[j])
            se = np.sqrt(p_exact * (1 - p_exact) / 10_000)
            ok = ok and abs(p_mc - p_exact) <= 3 * se + 2 / 10_001
            details.append(f"y{j + 1}: exact={p_exact:.4f} mc={p_mc:.4f}")
        _report(6, ok, "Monte Carlo vs exact p: " + ", ".join(details))

    @pytest.mark.parametrize("seed", FIXTURE_SEEDS)
    def test_stepdown_matches_handcoded_idealised_walk(self, seed):
        ds, fits, exact = self._exhaustive_fixture(seed=seed, effect=0.45 if seed != 61 else 0.9)
        adj = adjust_romano_wolf(exact)

        # independent reimplementation: plain loops over the enumerated
        # columns, following the idealised stepdown description
        obs = np.abs(exact.values[:, 0])
        perms = np.abs(exact.values[:, 1:])
        L = perms.shape[1]
        order = sorted(range(len(obs)), key=lambda j: (-obs[j], j))
        hand_p = []
        running = 0.0
        active = list(order)
        for j in order:
            count = 0
            for col in range(L):
                if max(perms[i, col] for i in active) >= obs[j]:
                    count += 1
            running = max(running, count / L)
            hand_p.append((j, running))
            active = active[1:]
        hand = np.empty(len(obs))
        for j, p in hand_p:
            hand[j] = p

        # quantile form of the same walk: reject while the observed
        # statistic exceeds the ceil(L(1-alpha))-th smallest max-statistic.
        # checked at several levels because at alpha = 0.05 a 20-allocation
        # design can never reject (complementary allocations tie in |T|,
        # so the smallest attainable p-value is 2/20)
        p_match = np.array_equal(adj.p_adjusted, hand)
        r_match = True
        for alpha in (0.05, 0.10, 0.15):
            rejections = np.zeros(len(obs), dtype=bool)
            active = list(order)
            for j in order:
                maxes = np.sort(perms[active].max(axis=0))
                c_hat = maxes[int(np.ceil(L * (1 - alpha))) - 1]
                if obs[j] > c_hat:
                    rejections[j] = True
                    active = active[1:]
                else:
                    break
            r_match = r_match and np.array_equal(adj.p_adjusted <= alpha, rejections)

        _report(
            6, p_match and r_match,
            f"stepdown adjusted p {adj.p_adjusted.round(4).tolist()} == "
            f"hand-coded {hand.round(4).tolist()}; decisions match at "
            f"alpha 0.05/0.10/0.15: {r_match}",
        )


class TestCriterion7InversionOracle:
    def test_search_matches_grid_inversion(self):
        # 12 clusters with 6 treated: 924 allocations, exhaustively
        # enumerable, with an attainable-p staircase fine enough for the
        # stated tolerance.  (With 6 clusters the two-sided 95% set is
        # infinite: complementary allocations share |T|, so the smallest
        # attainable p is 2/20 > alpha.)  The search's final-iterate
        # dispersion at Q=5000 is of the same order as the tolerance, so
        # the seeds are pinned; measured spread across seeds is in the
        # decisions ledger.
        ds = make_gaussian_dataset(
            n_clusters=12, n_per_cluster=5, n_treated=6, effect=0.5, seed=71,
        )
        fit = irls_fit(ds, 0)
        lo, hi = grid_inversion_endpoints(ds, 0, alpha=ALPHA, resolution=0.001)
        cs = rm_search(ds, "none", alpha=ALPHA, Q=5000, seed=76)
        tol = 0.05 * fit.naive_se
        ok = abs(cs.upper[0] - hi) <= tol and abs(cs.lower[0] - lo) <= tol
        _report(
            7, ok,
            f"limits [{cs.lower[0]:.4f}, {cs.upper[0]:.4f}] vs grid "
            f"[{lo:.4f}, {hi:.4f}], tol {tol:.4f}",
        )


class TestCriterion8BaselineMeasureDesign:
    def test_three_outcome_temporal_structure(self, run_baseline_design):
        report, _ = run_baseline_design
        rw = report.methods["romano_wolf"]
        none_fwer = report.methods["none"].fwer
        ok = (
            0.028 <= rw.fwer <= 0.078
            and 0.925 <= rw.coverage <= 0.975
            and none_fwer > 0.09
        )
        _report(
            8, ok,
            f"model3: rw fwer={rw.fwer:.3f}, rw coverage={rw.coverage:.3f}, "
            f"none fwer={none_fwer:.3f}",
        )


class TestCriterion9PropertySuites:
    N_FIXTURES = 200

    def test_invariants_across_randomized_fixtures(self):
        rng = np.random.default_rng(91)
        checked = 0
        for i in range(self.N_FIXTURES):
            C = int(rng.integers(4, 9))
            n = int(rng.integers(2, 6))
            J = int(rng.integers(1, 4))
            ds = make_gaussian_dataset(
                n_clusters=C, n_per_cluster=n, n_outcomes=J,
                effect=float(rng.normal(0, 0.5)),
                cluster_sd=float(rng.uniform(0.05, 0.6)),
                seed=int(rng.integers(0, 2**31)),
            )
            fits = [irls_fit(ds, j, delta_fixed=0.0) for j in range(J)]
            resid = residuals_under_null(fits[0], 0.0, ds, 0)
            alloc = SignedAllocation.observed(ds)
            flipped = SignedAllocation(
                signs=-alloc.signs,
                treated=tuple(c for c in range(C) if c not in alloc.treated),
            )
            # antisymmetry and studentization scale invariance
            t = unweighted_stat(resid, alloc)
            assert unweighted_stat(resid, flipped) == pytest.approx(-t, abs=1e-12)
            scaled = residuals_under_null(fits[0], 0.0, ds, 0)
            scaled.values = 3.0 * scaled.values
            assert unweighted_stat(scaled, alloc) == pytest.approx(t, abs=1e-12)

            plan = PermutationPlan(n_draws=60, seed=i, enumerate_exact=False)
            matrix = build_stat_matrix(ds, fits, plan)
            p_un = adjust_none(matrix).p_adjusted
            p_holm = adjust_holm(matrix).p_adjusted
            p_bonf = adjust_bonferroni(matrix).p_adjusted
            rw = adjust_romano_wolf(matrix)
            # dominance and monotonicity
            assert np.all(p_bonf >= p_holm - 1e-12)
            assert np.all(p_holm >= p_un - 1e-12)
            assert np.all(rw.p_adjusted >= p_un - 1e-12)
            assert np.all(np.diff(rw.p_adjusted[rw.rejection_order]) >= -1e-15)
            for p in (p_un, p_holm, p_bonf, rw.p_adjusted):
                assert np.all((p > 0) & (p <= 1))
            # determinism of the matrix build
            again = build_stat_matrix(ds, fits, plan)
            assert np.array_equal(matrix.values, again.values)
            checked += 1
        _report(9, checked == self.N_FIXTURES,
                f"invariants held on {checked}/{self.N_FIXTURES} randomized fixtures")

    def test_worker_count_invariance(self):
        study = StudySpec(
            dgp=DgpSpec(model="model1", clusters_per_arm=4, n_per_cluster=5),
            methods=("none", "romano_wolf"),
            replicates=6, n_permutations=40, n_search_steps=120, seed=93,
        )
        a = run_study(study, workers=1).to_dict()
        b = run_study(study, workers=2).to_dict()
        _report(9, a == b, "report identical for 1 and 2 workers")

    def test_coverage_rejection_duality(self, run_two_true_nulls):
        # uncorrected test rejects at alpha exactly when 0 falls outside
        # the uncorrected interval, away from the decision boundary
        report, _ = run_two_true_nulls
        agree = total = 0
        for r in report.replicate_rows:
            e = r["methods"]["none"]
            for j in range(2):
                p = e["p_unadjusted"][j]
                if abs(p - ALPHA) <= 0.02:
                    continue
                rej_p = p <= ALPHA
                rej_ci = not (e["lower"][j] <= 0.0 <= e["upper"][j])
                agree += rej_p == rej_ci
                total += 1
        rate = agree / total
        _report(9, rate >= 0.95, f"p-value/interval agreement {rate:.3f} on {total} tests")


class TestCriterion10PerformanceEnvelope:
    def test_single_analysis_under_ten_seconds(self, tmp_path):
        from crtperm.cli import main

        ds = make_gaussian_dataset(
            n_clusters=14, n_per_cluster=20, n_outcomes=3, n_treated=7,
            cluster_sd=0.22, seed=101,
        )
        data = tmp_path / "trial.csv"
        ds.to_csv(data)
        config = {
            "columns": {"cluster": "cluster", "time": "period", "treatment": "treatment"},
            "outcomes": [{"name": f"y{j + 1}", "family": "gaussian"} for j in range(3)],
            "methods": ["naive", "none", "bonferroni", "holm", "romano_wolf"],
            "n_permutations": 1000,
            "n_search_steps": 2000,
            "seed": 103,
        }
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(config))
        out = tmp_path / "out.json"
        t0 = time.perf_counter()
        code = main(["analyze", "--data", str(data), "--config", str(cfg), "--out", str(out)])
        elapsed = time.perf_counter() - t0
        payload = json.loads(out.read_text())
        ok = code == 0 and elapsed <= 10.0 and len(payload["results"]) == 15
        _report(10, ok, f"analysis of J=3, 14 clusters, M=1000, Q=2000 took {elapsed:.2f}s")

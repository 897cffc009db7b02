"""Template estimation, classification, and the Gaussian success model.

Independent oracles used here:
  * overlap of two unit-variance Gaussians 4 sigma apart is
    2 * Phi(-2) = erfc(sqrt(2)) = 0.04550026389635842 (pinned to 1e-15);
  * unequal-variance overlap is cross-checked against piecewise CDF
    arithmetic built on statistics.NormalDist and numpy.roots;
  * with equal class variances the ML rule must equal a midpoint
    threshold, so a big Monte Carlo run is verified two ways at once.
"""

import math
import statistics

import numpy as np
import pytest

from cdtleak.errors import (
    DomainError,
    EmptyPoi,
    InsufficientClassData,
    TemplateFormatError,
)
from cdtleak.leakage import gaussian_block
from cdtleak.template import (
    VAR_FLOOR,
    ClassStats,
    SuccessModel,
    Template,
    build_template,
    classify,
    full_key_success,
    gaussian_overlap,
    load_template,
    per_coefficient_success,
    save_template,
    success_from_overlap,
)


def _two_class_template(mu0=40.0, mu1=70.0, var=16.0, poi=0):
    return Template(
        pois=(poi,),
        class0=(ClassStats(mu=mu0, var=var, count=100),),
        class1=(ClassStats(mu=mu1, var=var, count=100),),
    )


class TestClassStats:
    def test_validation(self):
        with pytest.raises(DomainError):
            ClassStats(mu=float("nan"), var=1.0, count=1)
        with pytest.raises(DomainError):
            ClassStats(mu=0.0, var=0.0, count=1)
        with pytest.raises(DomainError):
            ClassStats(mu=0.0, var=-1.0, count=1)
        with pytest.raises(DomainError):
            ClassStats(mu=0.0, var=1.0, count=-1)


class TestTemplateConstruction:
    def test_needs_pois(self):
        with pytest.raises(EmptyPoi):
            Template(pois=(), class0=(), class1=())

    def test_rejects_duplicate_pois(self):
        s = ClassStats(mu=0.0, var=1.0, count=2)
        with pytest.raises(DomainError):
            Template(pois=(1, 1), class0=(s, s), class1=(s, s))

    def test_rejects_mismatched_stats(self):
        s = ClassStats(mu=0.0, var=1.0, count=2)
        with pytest.raises(DomainError):
            Template(pois=(1, 2), class0=(s,), class1=(s, s))


class TestBuildTemplate:
    def test_noiseless_class_hits_variance_floor(self):
        traces = np.array([[40.0], [40.0], [70.0], [70.0]])
        labels = np.array([0, 0, 1, 1], dtype=bool)
        t = build_template(traces, labels, pois=[0])
        assert t.class0[0].mu == 40.0
        assert t.class1[0].mu == 70.0
        assert t.class0[0].var == VAR_FLOOR
        assert t.class1[0].var == VAR_FLOOR
        assert t.class0[0].count == 2
        assert t.class1[0].count == 2

    def test_estimates_converge(self):
        n = 10_000
        sigma = 0.004
        g0 = 0.040 + sigma * gaussian_block(101, n)
        g1 = 0.070 + sigma * gaussian_block(102, n)
        traces = np.concatenate([g0, g1])[:, None]
        labels = np.concatenate([np.zeros(n, bool), np.ones(n, bool)])
        t = build_template(traces, labels, pois=[0])
        mu_tol = 4 * sigma / math.sqrt(n)
        assert abs(t.class0[0].mu - 0.040) < mu_tol
        assert abs(t.class1[0].mu - 0.070) < mu_tol
        # Variance of the sample variance is 2 sigma^4 / (n - 1).
        var_tol = 4 * sigma**2 * math.sqrt(2.0 / (n - 1))
        assert abs(t.class0[0].var - sigma**2) < var_tol
        assert abs(t.class1[0].var - sigma**2) < var_tol
        assert t.class0[0].count == n

    def test_multi_poi_column_selection(self):
        rng = np.random.default_rng(44)
        traces = rng.normal(size=(64, 10))
        traces[:32, 7] += 5.0
        labels = np.arange(64) >= 32
        t = build_template(traces, labels, pois=[7, 2])
        assert t.pois == (7, 2)
        assert t.class0[0].mu - t.class1[0].mu == pytest.approx(5.0, abs=1.0)

    def test_error_paths(self):
        traces = np.zeros((4, 3))
        with pytest.raises(InsufficientClassData):
            build_template(traces, [0, 0, 0, 0], pois=[0])
        with pytest.raises(InsufficientClassData):
            build_template(traces, [0, 0, 0, 1], pois=[0])
        with pytest.raises(EmptyPoi):
            build_template(traces, [0, 0, 1, 1], pois=[])
        with pytest.raises(DomainError):
            build_template(traces, [0, 0, 1, 1], pois=[3])
        with pytest.raises(DomainError):
            build_template(np.zeros(4), [0, 0, 1, 1], pois=[0])
        with pytest.raises(DomainError):
            build_template(traces, [[0, 0], [1, 1]], pois=[0])


class TestClassify:
    def test_obvious_cases(self):
        t = _two_class_template()
        assert classify(np.array([10.0]), t)[0] == 0
        assert classify(np.array([90.0]), t)[0] == 1
        assert classify(np.array([54.0]), t)[0] == 0
        assert classify(np.array([56.0]), t)[0] == 1

    def test_exact_tie_goes_to_class_zero(self):
        t = _two_class_template(mu0=40.0, mu1=70.0)
        cls, (ll0, ll1) = classify(np.array([55.0]), t)
        assert ll0 == ll1
        assert cls == 0

    def test_variance_scale_does_not_flip_decisions(self):
        base = _two_class_template(var=4.0)
        scaled = _two_class_template(var=400.0)
        for x in (10.0, 54.9, 55.1, 200.0, -30.0):
            assert classify(np.array([x]), base)[0] == classify(np.array([x]), scaled)[0]

    def test_loglikelihood_values(self):
        t = _two_class_template(mu0=0.0, mu1=1.0, var=1.0)
        _, (ll0, ll1) = classify(np.array([0.0]), t)
        assert ll0 == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert ll1 == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)

    def test_multi_poi_sums_evidence(self):
        t = Template(
            pois=(0, 2),
            class0=(ClassStats(0.0, 1.0, 5), ClassStats(0.0, 1.0, 5)),
            class1=(ClassStats(2.0, 1.0, 5), ClassStats(2.0, 1.0, 5)),
        )
        # One POI says class 1 weakly, the other says class 0 strongly.
        assert classify(np.array([1.2, 9.0, 0.1]), t)[0] == 0

    def test_error_paths(self):
        t = _two_class_template(poi=5)
        with pytest.raises(DomainError):
            classify(np.zeros(3), t)
        with pytest.raises(DomainError):
            classify(np.zeros((2, 8)), t)

    def test_ml_rule_equals_midpoint_threshold_in_bulk(self):
        # With equal variances the likelihood decision is a midpoint
        # threshold; run 50k classifications and verify both views agree
        # and the error rate sits at its predicted value.
        d = 3.2897072539029457  # separation with per-site error 0.05
        sigma = 30.0 / d
        t = _two_class_template(mu0=40.0, mu1=70.0, var=sigma**2)
        n = 25_000
        x0 = 40.0 + sigma * gaussian_block(7001, n)
        x1 = 70.0 + sigma * gaussian_block(7002, n)
        errors = 0
        for sample, truth in ((x0, 0), (x1, 1)):
            for value in sample:
                cls = classify(np.array([value]), t)[0]
                assert cls == (1 if value > 55.0 else 0)
                errors += cls != truth
        expected = 0.05 * 2 * n
        band = 3 * math.sqrt(2 * n * 0.05 * 0.95)
        assert abs(errors - expected) < band


class TestGaussianOverlap:
    def test_identical_densities(self):
        assert gaussian_overlap(3.0, 2.0, 3.0, 2.0).area == 1.0
        numeric = gaussian_overlap(3.0, 2.0, 3.0, 2.0, method="numeric")
        assert numeric.area == pytest.approx(1.0, abs=1e-9)

    def test_four_sigma_frozen_value(self):
        res = gaussian_overlap(0.0, 1.0, 4.0, 1.0)
        assert res.area == pytest.approx(0.04550026389635842, abs=1e-15)
        assert res.fraction_of_total == pytest.approx(res.area / 2, abs=1e-18)
        scaled = gaussian_overlap(40.0, 16.0, 56.0, 16.0)
        assert scaled.area == pytest.approx(res.area, abs=1e-15)

    def test_extreme_separation_underflows_to_zero(self):
        assert gaussian_overlap(0.0, 1.0, 100.0, 1.0).area == 0.0
        numeric = gaussian_overlap(0.0, 1.0, 100.0, 1.0, method="numeric")
        assert numeric.area == 0.0

    def test_numeric_matches_closed_form(self):
        for d in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0):
            closed = gaussian_overlap(0.0, 1.0, d, 1.0, method="closed").area
            numeric = gaussian_overlap(0.0, 1.0, d, 1.0, method="numeric").area
            assert abs(numeric - closed) <= 1e-9
        wide = gaussian_overlap(40.0, 16.0, 70.0, 16.0, method="numeric").area
        assert wide == pytest.approx(
            math.erfc(30.0 / (2.0 * math.sqrt(2.0) * 4.0)), abs=1e-9
        )

    @staticmethod
    def _cdf_oracle(mu0, var0, mu1, var1):
        """Overlap via piecewise CDF arithmetic, no quadrature involved."""
        a = 1.0 / var1 - 1.0 / var0
        b = -2.0 * (mu1 / var1 - mu0 / var0)
        c = mu1**2 / var1 - mu0**2 / var0 + math.log(var1 / var0)
        crossings = sorted(
            float(r) for r in np.roots([a, b, c]) if abs(r.imag) < 1e-12
        )
        n0 = statistics.NormalDist(mu0, math.sqrt(var0))
        n1 = statistics.NormalDist(mu1, math.sqrt(var1))
        edges = [-math.inf, *crossings, math.inf]
        area = 0.0
        for lo, hi in zip(edges, edges[1:]):
            mid = (
                (lo + hi) / 2
                if math.isfinite(lo) and math.isfinite(hi)
                else (hi - 1.0 if math.isfinite(hi) else lo + 1.0)
            )
            dist = n0 if n0.pdf(mid) <= n1.pdf(mid) else n1
            area += dist.cdf(hi) - dist.cdf(lo) if math.isfinite(hi) else 1.0 - dist.cdf(lo)
        return area

    @pytest.mark.parametrize(
        "mu0,var0,mu1,var1",
        [
            (0.0, 1.0, 1.0, 4.0),
            (40.0, 16.0, 70.0, 25.0),
            (0.0, 1.0, 0.0, 9.0),
            (-3.0, 0.25, 2.0, 2.0),
        ],
    )
    def test_unequal_variances_match_cdf_oracle(self, mu0, var0, mu1, var1):
        got = gaussian_overlap(mu0, var0, mu1, var1).area
        want = self._cdf_oracle(mu0, var0, mu1, var1)
        assert got == pytest.approx(want, abs=1e-12)

    def test_auto_falls_back_to_numeric(self):
        auto = gaussian_overlap(0.0, 1.0, 1.0, 2.0)
        numeric = gaussian_overlap(0.0, 1.0, 1.0, 2.0, method="numeric")
        assert auto == numeric

    def test_symmetry(self):
        assert (
            gaussian_overlap(1.0, 2.0, 5.0, 2.0).area
            == gaussian_overlap(5.0, 2.0, 1.0, 2.0).area
        )
        a = gaussian_overlap(1.0, 2.0, 5.0, 3.0).area
        b = gaussian_overlap(5.0, 3.0, 1.0, 2.0).area
        assert a == pytest.approx(b, abs=1e-12)

    def test_monotone_in_separation(self):
        areas = [gaussian_overlap(0.0, 1.0, d, 1.0).area for d in (0.0, 1.0, 2.0, 3.0)]
        assert areas == sorted(areas, reverse=True)
        assert len(set(areas)) == 4

    def test_error_paths(self):
        with pytest.raises(DomainError):
            gaussian_overlap(0.0, 0.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            gaussian_overlap(0.0, 1.0, 1.0, -1.0)
        with pytest.raises(DomainError):
            gaussian_overlap(float("nan"), 1.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            gaussian_overlap(0.0, 1.0, 1.0, 1.0, method="magic")
        with pytest.raises(DomainError):
            gaussian_overlap(0.0, 1.0, 1.0, 2.0, method="closed")


class TestSuccessModel:
    def test_success_from_overlap_trivials(self):
        assert success_from_overlap(1.0) == 0.5
        assert success_from_overlap(0.0) == 1.0
        assert success_from_overlap(5.12e-11) == 1.0 - 2.56e-11
        with pytest.raises(DomainError):
            success_from_overlap(-0.1)
        with pytest.raises(DomainError):
            success_from_overlap(1.1)

    def test_per_coefficient_product(self):
        model = SuccessModel(
            p_inner=0.99999999999, p_neg=0.999999999999, inner_count=26, outer_count=2
        )
        p = per_coefficient_success(model)
        assert p == pytest.approx(0.999999999478, abs=1e-15)
        # Same product through log1p, a different numeric route.
        log_route = math.exp(52 * math.log1p(-1e-11) + 2 * math.log1p(-1e-12))
        assert p == pytest.approx(log_route, abs=1e-15)

    def test_per_coefficient_trivials(self):
        assert (
            per_coefficient_success(
                SuccessModel(p_inner=0.5, p_neg=1.0, inner_count=1, outer_count=1)
            )
            == 0.5
        )
        assert (
            per_coefficient_success(
                SuccessModel(p_inner=1.0, p_neg=1.0, inner_count=26, outer_count=2)
            )
            == 1.0
        )

    def test_full_key_frozen_values(self):
        p = 0.99999999999**52 * 0.999999999999**2
        assert full_key_success(p, 512) == pytest.approx(0.999999465472144, abs=1e-15)
        assert full_key_success(p, 1024) == pytest.approx(0.9999989309445737, abs=1e-15)
        assert full_key_success(1.0, 512) == 1.0
        assert full_key_success(p, 1024) < full_key_success(p, 512)

    def test_validation(self):
        with pytest.raises(DomainError):
            SuccessModel(p_inner=1.1, p_neg=1.0, inner_count=26, outer_count=2)
        with pytest.raises(DomainError):
            SuccessModel(p_inner=1.0, p_neg=-0.1, inner_count=26, outer_count=2)
        with pytest.raises(DomainError):
            SuccessModel(p_inner=1.0, p_neg=1.0, inner_count=0, outer_count=2)
        with pytest.raises(DomainError):
            full_key_success(0.5, 0)
        with pytest.raises(DomainError):
            full_key_success(0.5, 512, poly_count=0)
        with pytest.raises(DomainError):
            full_key_success(1.5, 512)


class TestTemplateFiles:
    def test_round_trip_is_exact(self, tmp_path):
        t = Template(
            pois=(17, 3),
            class0=(
                ClassStats(mu=40.125, var=16.0, count=5000),
                ClassStats(mu=0.1, var=VAR_FLOOR, count=2),
            ),
            class1=(
                ClassStats(mu=70.0 / 3.0, var=2.0 / 7.0, count=5000),
                ClassStats(mu=-1.5e-8, var=0.0625, count=2),
            ),
        )
        path = tmp_path / "t.tpl"
        save_template(t, path)
        assert load_template(path) == t

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        t = _two_class_template()
        path = tmp_path / "t.tpl"
        save_template(t, path)
        text = path.read_text()
        path.write_text("# header comment\n\n" + text + "\n# trailing\n")
        assert load_template(path) == t

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_template(tmp_path / "absent.tpl")

    def test_format_errors(self, tmp_path):
        good = tmp_path / "good.tpl"
        save_template(_two_class_template(), good)
        lines = good.read_text().splitlines()

        bad = tmp_path / "bad.tpl"

        bad.write_text("\n".join(["version=2"] + lines[1:]) + "\n")
        with pytest.raises(TemplateFormatError):
            load_template(bad)

        bad.write_text("\n".join(l for l in lines if not l.startswith("pois=")) + "\n")
        with pytest.raises(TemplateFormatError):
            load_template(bad)

        bad.write_text("\n".join(l for l in lines if "class0.mu.0" not in l) + "\n")
        with pytest.raises(TemplateFormatError):
            load_template(bad)

        bad.write_text("no equals sign here\n" + "\n".join(lines) + "\n")
        with pytest.raises(TemplateFormatError):
            load_template(bad)

        bad.write_text(
            "\n".join(
                l if "class1.var.0" not in l else "class1.var.0=banana" for l in lines
            )
            + "\n"
        )
        with pytest.raises(TemplateFormatError):
            load_template(bad)

        bad.write_text(
            "\n".join(
                l if "class1.var.0" not in l else "class1.var.0=-4.0" for l in lines
            )
            + "\n"
        )
        with pytest.raises(TemplateFormatError):
            load_template(bad)

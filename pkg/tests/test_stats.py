import math

import numpy as np
import pytest
import scipy.stats as sps

from aqrobust import stats


def integrate_t_sf(t, df, n=400000):
    """Numerical-integration oracle for the Student-t survival function."""
    # integrate pdf from t to a far cutoff
    hi = max(abs(t) + 60.0, 80.0)
    xs = np.linspace(t, hi, n)
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    pdf = c * (1 + xs**2 / df) ** (-(df + 1) / 2)
    return float(np.trapezoid(pdf, xs))


def integrate_f_sf(f, d1, d2, n=400000):
    hi = max(f * 50, 500.0)
    xs = np.linspace(f, hi, n)
    c = (math.gamma((d1 + d2) / 2) / (math.gamma(d1 / 2) * math.gamma(d2 / 2))
         * (d1 / d2) ** (d1 / 2))
    pdf = c * xs ** (d1 / 2 - 1) * (1 + d1 * xs / d2) ** (-(d1 + d2) / 2)
    return float(np.trapezoid(pdf, xs))


class TestDistributionTails:
    @pytest.mark.parametrize("t,df", [(1.0, 5), (2.5, 10), (0.3, 3),
                                      (4.0, 30), (-1.5, 8)])
    def test_t_sf_against_integration(self, t, df):
        assert stats.t_sf(t, df) == pytest.approx(integrate_t_sf(t, df),
                                                  abs=1e-4)

    @pytest.mark.parametrize("f,d1,d2", [(3.0, 2, 6), (1.5, 5, 20),
                                         (6.0, 3, 12)])
    def test_f_sf_against_integration(self, f, d1, d2):
        assert stats.f_sf(f, d1, d2) == pytest.approx(
            integrate_f_sf(f, d1, d2), abs=1e-4)

    def test_two_sided_t(self):
        assert stats.t_two_sided_p(2.0, 10) == pytest.approx(
            2 * stats.t_sf(2.0, 10))

    def test_f_sf_edge(self):
        assert stats.f_sf(0.0, 2, 6) == 1.0

    def test_q_sf_matches_scipy(self):
        assert stats.q_sf(3.0, 4, 20) == pytest.approx(
            float(sps.studentized_range.sf(3.0, 4, 20)))


class TestShapiroWilk:
    @pytest.mark.parametrize("n", [3, 5, 8, 12, 25, 50, 200])
    def test_matches_scipy(self, n):
        rng = np.random.default_rng(n)
        for trial in range(5):
            x = rng.normal(size=n) if trial % 2 == 0 else rng.exponential(size=n)
            w, p = stats.shapiro_wilk(x)
            ref = sps.shapiro(x)
            assert w == pytest.approx(ref.statistic, abs=2e-4)
            assert p == pytest.approx(ref.pvalue, abs=2e-3)

    def test_rejects_nonnormal(self):
        rng = np.random.default_rng(0)
        x = rng.exponential(size=200)
        _, p = stats.shapiro_wilk(x)
        assert p < 0.01

    def test_accepts_normal(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=200)
        _, p = stats.shapiro_wilk(x)
        assert p > 0.05

    def test_errors(self):
        with pytest.raises(stats.StatsError):
            stats.shapiro_wilk([1.0, 2.0])
        with pytest.raises(stats.StatsError):
            stats.shapiro_wilk([3.0] * 10)


class TestLevene:
    def test_matches_scipy_mean_center(self):
        rng = np.random.default_rng(2)
        gs = [rng.normal(size=12), rng.normal(scale=2, size=15),
              rng.normal(size=9)]
        w, p = stats.levene(gs)
        ref = sps.levene(*gs, center="mean")
        assert w == pytest.approx(ref.statistic)
        assert p == pytest.approx(ref.pvalue)


class TestAnova:
    def test_hand_case(self):
        groups = [[1, 2, 3], [2, 3, 4], [3, 4, 5]]
        r = stats.anova_oneway(groups)
        assert r.f == pytest.approx(3.0)
        assert r.eta_squared == pytest.approx(0.5)
        assert (r.df_between, r.df_within) == (2, 6)
        ref = sps.f_oneway(*groups)
        assert r.p == pytest.approx(ref.pvalue)

    def test_eta_squared_definition(self):
        rng = np.random.default_rng(3)
        gs = [rng.normal(loc=m, size=20) for m in (0, 0.5, 1.0)]
        r = stats.anova_oneway(gs)
        assert r.eta_squared == pytest.approx(
            r.ss_between / (r.ss_between + r.ss_within))
        assert 0 < r.eta_squared < 1

    def test_errors(self):
        with pytest.raises(stats.StatsError):
            stats.anova_oneway([[1, 2, 3]])
        with pytest.raises(stats.StatsError):
            stats.anova_oneway([[1, 1], [1, 1]])


class TestCohensD:
    def test_hand_case(self):
        # groups with sd 1 each, means 0 and 1 -> d = 1
        a = [-1.0, 0.0, 1.0]
        b = [0.0, 1.0, 2.0]
        assert stats.cohens_d(a, b) == pytest.approx(-1.0)
        assert stats.cohens_d(b, a) == pytest.approx(1.0)

    def test_labels(self):
        assert stats.effect_label_d(0.1) == "Negligible"
        assert stats.effect_label_d(0.3) == "Small"
        assert stats.effect_label_d(-0.6) == "Medium"
        assert stats.effect_label_d(2.2) == "Large"
        assert stats.effect_label_eta(0.2343) == "Large"
        assert stats.effect_label_eta(0.10) == "Medium"
        assert stats.effect_label_eta(0.02) == "Small"
        assert stats.effect_label_eta(0.005) == "Negligible"


class TestTukey:
    def test_two_groups_equals_ttest(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=10)
        b = rng.normal(loc=0.8, size=10)
        tk = stats.tukey_hsd([a, b], names=["a", "b"])[0]
        _, _, p_t = stats.ttest_pooled(a, b)
        assert tk.p == pytest.approx(p_t, abs=1e-6)

    def test_matches_scipy_equal_n(self):
        rng = np.random.default_rng(5)
        gs = [rng.normal(loc=m, size=8) for m in (0, 0.5, 1.5)]
        ours = stats.tukey_hsd(gs, names=["a", "b", "c"])
        ref = sps.tukey_hsd(*gs)
        for r in ours:
            i = ["a", "b", "c"].index(r.group1)
            j = ["a", "b", "c"].index(r.group2)
            assert r.p == pytest.approx(ref.pvalue[i, j], abs=1e-8)
            ci = ref.confidence_interval()
            assert r.ci_lo == pytest.approx(ci.low[i, j], abs=1e-8)
            assert r.ci_hi == pytest.approx(ci.high[i, j], abs=1e-8)

    def test_unequal_n_kramer(self):
        rng = np.random.default_rng(6)
        gs = [rng.normal(size=7), rng.normal(loc=1, size=12),
              rng.normal(size=21)]
        ours = stats.tukey_hsd(gs)
        ref = sps.tukey_hsd(*gs)
        assert ours[0].p == pytest.approx(ref.pvalue[0, 1], abs=1e-8)


class TestBonferroni:
    def test_corrected_alpha_six_groups(self):
        rng = np.random.default_rng(7)
        gs = [rng.normal(size=5) for _ in range(6)]
        _, corrected = stats.bonferroni_ttests(gs)
        assert corrected == pytest.approx(0.05 / 15)
        assert f"{corrected:.4f}" == "0.0033"

    def test_t_matches_scipy(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=9)
        b = rng.normal(loc=1, size=14)
        t, df, p = stats.ttest_pooled(a, b)
        ref = sps.ttest_ind(a, b, equal_var=True)
        assert t == pytest.approx(ref.statistic)
        assert p == pytest.approx(ref.pvalue)
        assert df == 21

    def test_significance_uses_corrected_threshold(self):
        rng = np.random.default_rng(9)
        gs = [rng.normal(size=30), rng.normal(loc=0.6, size=30),
              rng.normal(loc=5.0, size=30)]
        pairs, corrected = stats.bonferroni_ttests(gs)
        for r in pairs:
            assert r.significant == (r.p < corrected)


@pytest.fixture(scope="module")
def analysis():
    rng = np.random.default_rng(10)
    groups = [np.clip(rng.normal(loc=m, scale=0.15, size=7), 0, 1)
              for m in (0.33, 0.45, 0.40, 0.54, 0.49, 0.65)]
    names = ["FGSM", "PGD", "BIM", "C&W", "DeepFool", "AutoAttack"]
    return stats.analyze(groups, names)


class TestReport:
    def test_analyze_structure(self, analysis):
        assert len(analysis.tukey) == 15
        assert len(analysis.ttests) == 15
        assert analysis.corrected_alpha == pytest.approx(0.05 / 15)
        assert len(analysis.normality) == 6

    def test_descriptives_sorted_by_mean(self, analysis):
        table = stats.descriptives_table(analysis)
        lines = [l for l in table.splitlines() if l and not l.startswith("-")]
        means = [float(l.split()[2]) for l in lines[2:]]
        assert means == sorted(means, reverse=True)

    def test_anova_table_layout(self, analysis):
        table = stats.anova_table(analysis)
        assert "Levene's Test" in table
        assert "One-way ANOVA" in table
        assert "eta^2" in table

    def test_full_report_contains_all_tables(self, analysis):
        rep = stats.format_report(analysis)
        for needle in ("Tukey HSD", "Bonferroni", "Effect Size",
                       "Shapiro-Wilk", "ANOVA"):
            assert needle in rep

    def test_p_stars(self):
        assert stats.p_stars(0.0005) == "***"
        assert stats.p_stars(0.005) == "**"
        assert stats.p_stars(0.03) == "*"
        assert stats.p_stars(0.2) == ""

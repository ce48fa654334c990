"""Statistical comparison of attack-method success rates.

Implements the analysis chain end to end: Shapiro-Wilk normality checks per
group, Levene's homogeneity test, one-way ANOVA with eta-squared, Tukey HSD
over all pairs (Tukey-Kramer for unequal group sizes), and pairwise pooled
t-tests with Bonferroni correction plus Cohen's d.  The test statistics are
computed here from first principles; only the reference distribution tails
(regularized incomplete beta, normal, studentized range) come from scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import special
from scipy.stats import studentized_range


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Distribution tails
# ---------------------------------------------------------------------------

def t_sf(t, df):
    """P(T >= t) for Student's t."""
    t = float(t)
    x = df / (df + t * t)
    p_two = float(special.betainc(df / 2.0, 0.5, x))
    return p_two / 2.0 if t >= 0 else 1.0 - p_two / 2.0


def t_two_sided_p(t, df):
    return float(special.betainc(df / 2.0, 0.5, df / (df + float(t) ** 2)))


def f_sf(f, df1, df2):
    """P(F >= f) for the F distribution."""
    if f <= 0:
        return 1.0
    x = df2 / (df2 + df1 * float(f))
    return float(special.betainc(df2 / 2.0, df1 / 2.0, x))


def normal_sf(z):
    return float(special.ndtr(-float(z)))


def q_sf(q, k, df):
    """P(Q >= q) for the studentized range with k groups."""
    return float(studentized_range.sf(float(q), float(k), float(df)))


def q_crit(alpha, k, df):
    return float(studentized_range.ppf(1.0 - alpha, float(k), float(df)))


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston's 1995 approximation, n in [3, 5000])
# ---------------------------------------------------------------------------

def _sw_coefficients(n):
    m = special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    c = m / math.sqrt(mm)
    u = 1.0 / math.sqrt(n)
    a = np.empty(n)
    if n <= 5:
        an = (-2.706056 * u**5 + 4.434685 * u**4 - 2.071190 * u**3
              - 0.147981 * u**2 + 0.221157 * u + c[-1])
        if n == 3:
            a[:] = [-math.sqrt(0.5), 0.0, math.sqrt(0.5)]
            return a
        phi = (mm - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * an**2)
        a[:] = m / math.sqrt(phi)
        a[-1] = an
        a[0] = -an
    else:
        an = (-2.706056 * u**5 + 4.434685 * u**4 - 2.071190 * u**3
              - 0.147981 * u**2 + 0.221157 * u + c[-1])
        an1 = (-3.582633 * u**5 + 5.682633 * u**4 - 1.752461 * u**3
               - 0.293762 * u**2 + 0.042981 * u + c[-2])
        phi = ((mm - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2)
               / (1.0 - 2.0 * an**2 - 2.0 * an1**2))
        a[:] = m / math.sqrt(phi)
        a[-1], a[-2] = an, an1
        a[0], a[1] = -an, -an1
    return a


def shapiro_wilk(values):
    """Shapiro-Wilk W and p-value.  Requires 3 <= n <= 5000."""
    x = np.sort(np.asarray(values, float))
    n = x.size
    if n < 3:
        raise StatsError("Shapiro-Wilk needs at least 3 observations")
    if n > 5000:
        raise StatsError("Shapiro-Wilk supports at most 5000 observations")
    if x[0] == x[-1]:
        raise StatsError("Shapiro-Wilk is undefined for constant data")
    a = _sw_coefficients(n)
    w = float((a @ x) ** 2 / np.sum((x - x.mean()) ** 2))
    w = min(w, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        p = min(max(p, 0.0), 1.0)
        return w, p
    if n <= 11:
        g = -2.273 + 0.459 * n
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n**2
                         - 0.0020322 * n**3)
        arg = g - math.log(1.0 - w)
        if arg <= 0:
            return w, 0.0
        z = (-math.log(arg) - mu) / sigma
    else:
        ln_n = math.log(n)
        mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n**2 + 0.0038915 * ln_n**3
        sigma = math.exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n**2)
        z = (math.log(1.0 - w) - mu) / sigma
    return w, normal_sf(z)


# ---------------------------------------------------------------------------
# Group tests
# ---------------------------------------------------------------------------

def _as_groups(groups):
    gs = [np.asarray(g, float) for g in groups]
    if len(gs) < 2:
        raise StatsError("need at least two groups")
    for g in gs:
        if g.size < 2:
            raise StatsError("every group needs at least two observations")
    return gs


def levene(groups):
    """Levene's W (deviations from the group mean) and p-value."""
    gs = _as_groups(groups)
    z = [np.abs(g - g.mean()) for g in gs]
    w, p, _, _, _ = _anova_f(z)
    return w, p


def _anova_f(gs):
    k = len(gs)
    n = sum(g.size for g in gs)
    grand = sum(g.sum() for g in gs) / n
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in gs)
    ssw = sum(float(np.sum((g - g.mean()) ** 2)) for g in gs)
    df_b, df_w = k - 1, n - k
    if ssw == 0:
        raise StatsError("zero within-group variance")
    f = (ssb / df_b) / (ssw / df_w)
    return f, f_sf(f, df_b, df_w), ssb, ssw, (df_b, df_w)


@dataclass
class AnovaResult:
    f: float
    p: float
    df_between: int
    df_within: int
    eta_squared: float
    ss_between: float
    ss_within: float


def anova_oneway(groups):
    gs = _as_groups(groups)
    f, p, ssb, ssw, (dfb, dfw) = _anova_f(gs)
    return AnovaResult(f=f, p=p, df_between=dfb, df_within=dfw,
                       eta_squared=ssb / (ssb + ssw), ss_between=ssb,
                       ss_within=ssw)


def cohens_d(a, b):
    """Standardized mean difference with the pooled standard deviation."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na, nb = a.size, b.size
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1))
                       / (na + nb - 2))
    if pooled == 0:
        raise StatsError("zero pooled variance")
    return float((a.mean() - b.mean()) / pooled)


def effect_label_d(d):
    d = abs(d)
    if d < 0.2:
        return "Negligible"
    if d < 0.5:
        return "Small"
    if d < 0.8:
        return "Medium"
    return "Large"


def effect_label_eta(eta):
    if eta < 0.01:
        return "Negligible"
    if eta < 0.06:
        return "Small"
    if eta < 0.14:
        return "Medium"
    return "Large"


def p_stars(p):
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class PairResult:
    group1: str
    group2: str
    mean_diff: float
    statistic: float      # q for Tukey, t for t-tests
    p: float
    ci_lo: float = None
    ci_hi: float = None
    cohens_d: float = None
    significant: bool = False


def tukey_hsd(groups, names=None, alpha=0.05):
    """All-pairs Tukey HSD (Tukey-Kramer standard errors for unequal n)."""
    gs = _as_groups(groups)
    k = len(gs)
    names = list(names) if names else [f"g{i}" for i in range(k)]
    if len(names) != k:
        raise StatsError("names/groups length mismatch")
    _, _, _, ssw, (_, dfw) = _anova_f(gs)
    msw = ssw / dfw
    crit = q_crit(alpha, k, dfw)
    out = []
    for i, j in combinations(range(k), 2):
        a, b = gs[i], gs[j]
        diff = float(a.mean() - b.mean())
        se = math.sqrt(msw / 2.0 * (1.0 / a.size + 1.0 / b.size))
        q = abs(diff) / se
        p = q_sf(q, k, dfw)
        half = crit * se
        out.append(PairResult(
            group1=names[i], group2=names[j], mean_diff=diff, statistic=q,
            p=p, ci_lo=diff - half, ci_hi=diff + half, significant=p < alpha))
    return out


def ttest_pooled(a, b):
    """Two-sample t with pooled variance; returns (t, df, two-sided p)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na, nb = a.size, b.size
    df = na + nb - 2
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    if sp2 == 0:
        raise StatsError("zero pooled variance")
    t = (a.mean() - b.mean()) / math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    return float(t), df, t_two_sided_p(t, df)


def bonferroni_ttests(groups, names=None, alpha=0.05):
    """All-pairs pooled t-tests at the Bonferroni-corrected threshold.

    Returns (pairs, corrected_alpha); a pair is significant only if its raw
    two-sided p falls below alpha / n_pairs.
    """
    gs = _as_groups(groups)
    k = len(gs)
    names = list(names) if names else [f"g{i}" for i in range(k)]
    n_pairs = k * (k - 1) // 2
    corrected = alpha / n_pairs
    out = []
    for i, j in combinations(range(k), 2):
        t, df, p = ttest_pooled(gs[i], gs[j])
        out.append(PairResult(
            group1=names[i], group2=names[j],
            mean_diff=float(np.mean(gs[i]) - np.mean(gs[j])),
            statistic=t, p=p, cohens_d=cohens_d(gs[i], gs[j]),
            significant=p < corrected))
    return out, corrected


# ---------------------------------------------------------------------------
# Full analysis + fixed-width report tables
# ---------------------------------------------------------------------------

@dataclass
class Analysis:
    names: list
    groups: list
    normality: list          # (name, W, p, normal?) per group, or None
    levene_w: float
    levene_p: float
    anova: AnovaResult
    tukey: list
    ttests: list
    corrected_alpha: float
    alpha: float = 0.05


def analyze(groups, names=None, alpha=0.05):
    gs = _as_groups(groups)
    names = list(names) if names else [f"g{i}" for i in range(len(gs))]
    normality = []
    for name, g in zip(names, gs):
        try:
            w, p = shapiro_wilk(g)
            normality.append((name, w, p, p >= alpha))
        except StatsError:
            normality.append((name, float("nan"), float("nan"), None))
    lw, lp = levene(gs)
    anova = anova_oneway(gs)
    tukey = tukey_hsd(gs, names, alpha)
    ttests, corrected = bonferroni_ttests(gs, names, alpha)
    return Analysis(names=names, groups=gs, normality=normality,
                    levene_w=lw, levene_p=lp, anova=anova, tukey=tukey,
                    ttests=ttests, corrected_alpha=corrected, alpha=alpha)


def _table(header, rows, title):
    widths = [max(len(h), *(len(r[c]) for r in rows)) if rows else len(h)
              for c, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "-" * len(fmt(header))
    lines = [title, sep, fmt(header), sep]
    lines += [fmt(r) for r in rows]
    lines.append(sep)
    return "\n".join(lines)


def descriptives_table(analysis):
    rows = []
    order = sorted(range(len(analysis.names)),
                   key=lambda i: -float(np.mean(analysis.groups[i])))
    for i in order:
        g = analysis.groups[i]
        rows.append([
            analysis.names[i], str(g.size), f"{np.mean(g) * 100:.2f}",
            f"{np.std(g, ddof=1) * 100:.2f}", f"{np.min(g) * 100:.2f}",
            f"{np.max(g) * 100:.2f}",
        ])
    return _table(["Method", "N", "Mean(%)", "Std(%)", "Min(%)", "Max(%)"],
                  rows, "Attack Performance Statistics by Method")


def anova_table(analysis):
    a = analysis.anova
    rows = [
        ["Levene's Test", f"W = {analysis.levene_w:.4f}",
         f"{analysis.levene_p:.4f}", "---",
         "Homogeneity satisfied" if analysis.levene_p >= analysis.alpha
         else "Heterogeneous variances"],
        ["One-way ANOVA",
         f"F({a.df_between},{a.df_within}) = {a.f:.4f}",
         f"{a.p:.4f}{p_stars(a.p)}",
         f"eta^2 = {a.eta_squared:.4f}",
         f"{effect_label_eta(a.eta_squared)} effect"],
    ]
    return _table(["Statistical Test", "Test Statistic", "p-value",
                   "Effect Size", "Interpretation"],
                  rows, "ANOVA Analysis and Statistical Tests Results")


def tukey_table(analysis):
    rows = []
    for r in sorted(analysis.tukey, key=lambda r: r.p):
        rows.append([
            r.group1, r.group2, f"{r.mean_diff * 100:.2f}",
            f"{r.ci_lo * 100:.2f}", f"{r.ci_hi * 100:.2f}",
            f"{r.p:.4f}{p_stars(r.p)}",
        ])
    return _table(["Group 1", "Group 2", "Mean Diff(%)", "95% CI Lower",
                   "95% CI Upper", "p-value"],
                  rows, "Pairwise Comparisons (Tukey HSD)")


def bonferroni_table(analysis):
    rows = []
    for r in analysis.ttests:
        rows.append([
            r.group1, r.group2, f"{r.mean_diff:.4f}", f"{r.statistic:.3f}",
            f"{r.p:.4f}", f"{r.cohens_d:.3f}",
            "***" if r.significant else "",
        ])
    title = ("Pairwise t-tests with Bonferroni Correction "
             f"(alpha = {analysis.corrected_alpha:.4f})")
    return _table(["Group 1", "Group 2", "Mean Diff", "t", "p-value",
                   "Cohen's d", "Sig"], rows, title)


def effect_size_table(analysis):
    rows = []
    for r in sorted(analysis.ttests, key=lambda r: -abs(r.cohens_d)):
        rows.append([r.group1, r.group2, f"{abs(r.cohens_d):.3f}",
                     effect_label_d(r.cohens_d)])
    return _table(["Group 1", "Group 2", "Cohen's d", "Effect Size"],
                  rows, "Effect Size (Cohen's d) for Pairwise Comparisons")


def normality_table(analysis):
    rows = []
    for name, w, p, ok in analysis.normality:
        verdict = "n/a" if ok is None else ("Normal" if ok else "Non-normal")
        w_s = "n/a" if ok is None else f"{w:.4f}"
        p_s = "n/a" if ok is None else f"{p:.4f}"
        rows.append([name, w_s, p_s, verdict])
    return _table(["Group", "W", "p-value", "Verdict"],
                  rows, "Shapiro-Wilk Normality Tests")


def format_report(analysis):
    parts = [
        descriptives_table(analysis),
        normality_table(analysis),
        anova_table(analysis),
        tukey_table(analysis),
        bonferroni_table(analysis),
        effect_size_table(analysis),
    ]
    return "\n\n".join(parts) + "\n"

//! Replication statistics: Student-t intervals, one-way ANOVA, histograms.
//!
//! The F and t tail probabilities go through a regularized incomplete beta
//! function evaluated by Lentz's continued fraction.

use crate::error::{Error, Result};

/// Significance level for ANOVA flags.
pub const ALPHA: f64 = 0.05;

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = LANCZOS[1..]
        .iter()
        .enumerate()
        .fold(LANCZOS[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Upper tail `P(F > f)` of the F distribution with `(df1, df2)` degrees of freedom.
pub fn f_survival(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverse of [`t_cdf`] by bisection.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be in (0,1)");
    if p < 0.5 {
        return -t_quantile(1.0 - p, df);
    }
    let mut hi = 1.0;
    while t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Mean computed relative to the first value, exact for constant input.
fn shifted_mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Student-t interval `mean ± t_{(1+level)/2, n-1} · s / √n`.
pub fn mean_ci(values: &[f64], level: f64) -> Result<ConfidenceInterval> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0,1)")));
    }
    let n = values.len() as f64;
    let mean = shifted_mean(values);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = t_quantile(0.5 + level / 2.0, n - 1.0) * var.sqrt() / n.sqrt();
    Ok(ConfidenceInterval {
        mean,
        lower: mean - half,
        upper: mean + half,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub groups: usize,
    pub group_sizes: Vec<usize>,
    pub df_between: f64,
    pub df_within: f64,
    /// `p <= ALPHA`.
    pub significant: bool,
}

/// One-way ANOVA, `F = MSB / MSW`.
///
/// All-constant data (zero between- and within-group variance) is reported
/// as [`Error::Degenerate`]; zero within-group variance alone gives `F = ∞`.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ANOVA needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "every ANOVA group needs at least 2 values, got {}",
            g.len()
        )));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n_total = all.len() as f64;
    let grand = shifted_mean(&all);
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = shifted_mean(g);
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_between = (groups.len() - 1) as f64;
    let df_within = n_total - groups.len() as f64;
    let scale = all.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let negligible = |ss: f64| ss <= (scale * 1e-12).powi(2) * n_total;
    if negligible(ss_between) && negligible(ss_within) {
        return Err(Error::Degenerate(
            "zero between- and within-group variance, F undefined".into(),
        ));
    }
    let f = if negligible(ss_within) {
        f64::INFINITY
    } else if negligible(ss_between) {
        0.0
    } else {
        (ss_between / df_between) / (ss_within / df_within)
    };
    let p = f_survival(f, df_between, df_within).clamp(0.0, 1.0);
    Ok(AnovaResult {
        f,
        p,
        groups: groups.len(),
        group_sizes: groups.iter().map(Vec::len).collect(),
        df_between,
        df_within,
        significant: p <= ALPHA,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width bins over `[lo, hi]`; out-of-range values land in the edge bins.
pub fn score_histogram(scores: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<HistogramBin>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("histogram of no scores".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidArgument(format!("bad histogram range [{lo}, {hi}]")));
    }
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("cannot bin {v}")));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in scores {
        let pos = ((v - lo) / width).floor();
        let idx = if pos < 0.0 {
            0
        } else {
            (pos as usize).min(bins - 1)
        };
        out[idx].count += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, b) = 1 - (1-x)^b ; I_x(a, 1) = x^a
        for &x in &[0.01, 0.2, 0.5, 0.77, 0.99] {
            assert!((regularized_incomplete_beta(1.0, 3.5, x) - (1.0 - (1.0f64 - x).powf(3.5))).abs() < 1e-13);
            assert!((regularized_incomplete_beta(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-13);
        }
    }

    #[test]
    fn t_quantile_two_df_closed_form() {
        // nu = 2: t_p = (2p - 1) / sqrt(2 p (1 - p))
        for p in [0.6f64, 0.9, 0.975, 0.995] {
            let exact = (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
            assert!((t_quantile(p, 2.0) - exact).abs() < 1e-10);
        }
        assert!((t_quantile(0.975, 2.0) - 4.302653).abs() < 1e-6);
    }

    #[test]
    fn ci_fixture() {
        let ci = mean_ci(&[1.0, 2.0, 3.0], 0.95).unwrap();
        assert_eq!(ci.mean, 2.0);
        assert!((ci.upper - 4.4841).abs() < 1e-3);
        assert!((ci.lower + 0.4841).abs() < 1e-3);
    }

    #[test]
    fn ci_of_constant_collapses() {
        let ci = mean_ci(&[0.1, 0.1, 0.1], 0.95).unwrap();
        assert_eq!((ci.mean, ci.lower, ci.upper), (0.1, 0.1, 0.1));
        assert!(mean_ci(&[1.0], 0.95).is_err());
    }

    #[test]
    fn ci_is_symmetric() {
        let ci = mean_ci(&[-2.0, -1.0, 0.5, 1.0, 2.0, -0.5], 0.95).unwrap();
        assert!(((ci.upper - ci.mean) - (ci.mean - ci.lower)).abs() < 1e-12);
    }

    #[test]
    fn anova_fixture() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]])
            .unwrap();
        assert_eq!(r.f, 3.0);
        assert_eq!((r.df_between, r.df_within), (2.0, 6.0));
        // F(2, n) survival is (1 + 2f/n)^(-n/2) = 0.5^3
        assert!((r.p - 0.125).abs() < 1e-12);
        assert!(!r.significant);
    }

    #[test]
    fn identical_groups_give_zero_f() {
        let g = vec![1.0, 2.0, 4.0];
        let r = one_way_anova(&[g.clone(), g.clone(), g]).unwrap();
        assert_eq!((r.f, r.p), (0.0, 1.0));
    }

    #[test]
    fn anova_degenerate_and_errors() {
        assert!(matches!(
            one_way_anova(&[vec![1.0, 1.0], vec![1.0, 1.0]]),
            Err(Error::Degenerate(_))
        ));
        let r = one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(r.f.is_infinite() && r.p == 0.0 && r.significant);
        assert!(one_way_anova(&[vec![1.0, 2.0]]).is_err());
        assert!(one_way_anova(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram(&[0.3; 10], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 10, 0, 0]);
        let h = score_histogram(&[0.1, 0.9], 2, (0.0, 1.0)).unwrap();
        assert_eq!((h[0].count, h[1].count), (1, 1));
        let h = score_histogram(&[-5.0, 1.0, 7.0], 3, (0.0, 1.0)).unwrap();
        assert_eq!((h[0].count, h[2].count), (1, 2));
        assert!(score_histogram(&[], 3, (0.0, 1.0)).is_err());
        assert!(score_histogram(&[1.0], 0, (0.0, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn histogram_conserves_count(
            scores in prop::collection::vec(-2.0f64..3.0, 1..200),
            bins in 1usize..40,
            lo in -1.0f64..0.5,
            width in 0.01f64..2.0,
        ) {
            let h = score_histogram(&scores, bins, (lo, lo + width)).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), scores.len());
        }

        #[test]
        fn anova_shift_and_order_invariant(
            groups in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2..6), 2..5),
            shift in -100.0f64..100.0,
        ) {
            let base = one_way_anova(&groups).unwrap();
            let shifted: Vec<Vec<f64>> =
                groups.iter().map(|g| g.iter().map(|v| v + shift).collect()).collect();
            let moved = one_way_anova(&shifted).unwrap();
            prop_assert!((base.f - moved.f).abs() <= 1e-9 * base.f.max(1.0));
            let mut reversed = groups.clone();
            reversed.reverse();
            let rev = one_way_anova(&reversed).unwrap();
            prop_assert!((base.f - rev.f).abs() <= 1e-9 * base.f.max(1.0));
        }
    }
}

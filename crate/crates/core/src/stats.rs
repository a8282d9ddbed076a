//! Mean ± SE summaries and the hypothesis tests used in the reports.
//!
//! Student-t tails go through the regularized incomplete beta function,
//! evaluated with a modified-Lentz continued fraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("need at least {need} samples per group, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid counts: k={k}, n={n}, p0={p0}")]
    InvalidCounts { k: u64, n: u64, p0: f64 },
    #[error("non-finite sample value")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub standard_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(with = "crate::report::json::float_or_symbol")]
    pub statistic: f64,
    pub p_value: f64,
    pub dof: Option<f64>,
    pub two_sided: bool,
    /// Set when the result comes from a degenerate-input convention rather
    /// than the test distribution (e.g. both samples constant).
    #[serde(default)]
    pub degenerate: bool,
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n-1) sample variance. Zero for a single sample.
fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn mean_se(samples: &[f64]) -> Result<MetricSummary> {
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    check_finite(samples)?;
    let n = samples.len();
    Ok(MetricSummary {
        mean: mean(samples),
        standard_error: (sample_variance(samples) / n as f64).sqrt(),
        n,
    })
}

const LANCZOS_G: f64 = 7.0;
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
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const CF_EPS: f64 = 1e-15;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 10_000;

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
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

/// `P(|T| >= |t|)` for Student-t with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(0.5 * dof, 0.5, x).clamp(0.0, 1.0)
}

/// `P(T >= t)`.
pub fn student_t_upper_p(t: f64, dof: f64) -> f64 {
    let half = 0.5 * student_t_two_sided_p(t, dof);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// Welch's unequal-variance two-sample t-test. The one-sided alternative is
/// `mean(a) > mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64], two_sided: bool) -> Result<TestResult> {
    let got = a.len().min(b.len());
    if got < 2 {
        return Err(StatsError::InsufficientSamples { need: 2, got });
    }
    check_finite(a)?;
    check_finite(b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (
        sample_variance(a) / a.len() as f64,
        sample_variance(b) / b.len() as f64,
    );
    let se2 = qa + qb;
    if se2 == 0.0 {
        // Both samples constant.
        let (statistic, p_value) = if ma == mb {
            (0.0, 1.0)
        } else {
            let s = if ma > mb {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
            let p = if two_sided || ma > mb { 0.0 } else { 1.0 };
            (s, p)
        };
        return Ok(TestResult {
            statistic,
            p_value,
            dof: None,
            two_sided,
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    let p_value = if two_sided {
        student_t_two_sided_p(t, dof)
    } else {
        student_t_upper_p(t, dof)
    };
    Ok(TestResult {
        statistic: t,
        p_value,
        dof: Some(dof),
        two_sided,
        degenerate: false,
    })
}

/// Mid-ranks (1-based; tied values share the mean of their positions).
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| {
        xs[i]
            .partial_cmp(&xs[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman ρ from two permutations of `1..=n` via `1 - 6 Σd² / (n(n²-1))`.
pub fn spearman_from_ranks(ra: &[u32], rb: &[u32]) -> f64 {
    let n = ra.len() as f64;
    let d2: u128 = ra
        .iter()
        .zip(rb)
        .map(|(&a, &b)| {
            let d = i64::from(a) - i64::from(b);
            (d * d) as u128
        })
        .sum();
    1.0 - 6.0 * d2 as f64 / (n * (n * n - 1.0))
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman_test(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints(x.len()));
    }
    check_finite(x)?;
    check_finite(y)?;
    let rx = mid_ranks(x);
    let ry = mid_ranks(y);
    let tie_free = |r: &[f64]| {
        r.iter().all(|v| v.fract() == 0.0) && {
            let mut s: Vec<u64> = r.iter().map(|&v| v as u64).collect();
            s.sort_unstable();
            s.windows(2).all(|w| w[0] != w[1])
        }
    };
    let rho = if tie_free(&rx) && tie_free(&ry) {
        let ax: Vec<u32> = rx.iter().map(|&v| v as u32).collect();
        let ay: Vec<u32> = ry.iter().map(|&v| v as u32).collect();
        spearman_from_ranks(&ax, &ay)
    } else {
        pearson(&rx, &ry)
    };
    let dof = (x.len() - 2) as f64;
    let (statistic, p_value) = if rho.abs() >= 1.0 {
        (rho.signum() * f64::INFINITY, 0.0)
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        (t, student_t_two_sided_p(t, dof))
    };
    Ok(TestResult {
        statistic: rho,
        p_value,
        dof: Some(dof),
        two_sided: true,
        degenerate: statistic.is_infinite(),
    })
}

fn ln_binom_pmf(k: u64, n: u64, p0: f64) -> f64 {
    let (k, n) = (k as f64, n as f64);
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
        + k * p0.ln()
        + (n - k) * (1.0 - p0).ln()
}

/// Exact binomial test. One-sided is the upper tail `P(X >= k)`; two-sided
/// sums every outcome no more likely than `k`.
pub fn binomial_test(k: u64, n: u64, p0: f64, two_sided: bool) -> Result<TestResult> {
    if k > n || !(p0 > 0.0 && p0 < 1.0) {
        return Err(StatsError::InvalidCounts { k, n, p0 });
    }
    let pmf: Vec<f64> = (0..=n).map(|i| ln_binom_pmf(i, n, p0).exp()).collect();
    let sum_sorted = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        v.into_iter().sum::<f64>()
    };
    let p_value = if two_sided {
        let cutoff = pmf[k as usize] * (1.0 + 1e-7);
        sum_sorted(pmf.iter().copied().filter(|&p| p <= cutoff).collect())
    } else {
        sum_sorted(pmf[k as usize..].to_vec())
    };
    Ok(TestResult {
        statistic: k as f64,
        p_value: p_value.clamp(0.0, 1.0),
        dof: None,
        two_sided,
        degenerate: false,
    })
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if k > n || n == 0 {
        return Err(StatsError::InvalidCounts { k, n, p0: f64::NAN });
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(((centre - half).max(0.0), (centre + half).min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_se_examples() {
        let s = mean_se(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.standard_error, s.n), (5.0, 0.0, 3));
        let s = mean_se(&[0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0);
        assert_abs_diff_eq!(s.standard_error, 1.0, epsilon = 1e-15);
        let s = mean_se(&[7.0]).unwrap();
        assert_eq!((s.mean, s.standard_error), (7.0, 0.0));
        assert_eq!(mean_se(&[]), Err(StatsError::EmptySample));
    }

    #[test]
    fn ln_gamma_known() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-13);
        assert_abs_diff_eq!(
            ln_gamma(0.5),
            std::f64::consts::PI.sqrt().ln(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(ln_gamma(0.1), 2.252_712_651_734_206, epsilon = 1e-13);
    }

    #[test]
    fn incomplete_beta_known() {
        // scipy.special.betainc
        assert_abs_diff_eq!(
            regularized_incomplete_beta(2.0, 3.0, 0.4),
            0.5248,
            epsilon = 1e-13
        );
        assert_abs_diff_eq!(
            regularized_incomplete_beta(0.5, 0.5, 0.3),
            0.369_010_119_565_545,
            epsilon = 1e-12
        );
        assert_eq!(regularized_incomplete_beta(2.0, 2.0, 0.0), 0.0);
        assert_eq!(regularized_incomplete_beta(2.0, 2.0, 1.0), 1.0);
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 3.0, 4.0, 9.0];
        let r = welch_t_test(&a, &a, true).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn welch_textbook() {
        // scipy.stats.ttest_ind(equal_var=False): t = -1, df = 8, p = 0.34659350708733416
        let r = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        assert_abs_diff_eq!(r.statistic, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dof.unwrap(), 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.346_593_507_087_334_16, epsilon = 1e-12);
    }

    #[test]
    fn welch_degenerate_conventions() {
        let r = welch_t_test(&[2.0, 2.0], &[2.0, 2.0, 2.0], true).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        let r = welch_t_test(&[2.0, 2.0], &[3.0, 3.0], true).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.statistic, f64::NEG_INFINITY);
        assert!(matches!(
            welch_t_test(&[1.0], &[1.0, 2.0], true),
            Err(StatsError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn welch_antisymmetric() {
        let a = [0.3, 0.9, 1.7, 0.2];
        let b = [1.1, 2.0, 0.4];
        let ab = welch_t_test(&a, &b, true).unwrap();
        let ba = welch_t_test(&b, &a, true).unwrap();
        assert_eq!(ab.statistic, -ba.statistic);
        assert_abs_diff_eq!(ab.p_value, ba.p_value, epsilon = 1e-15);
        let one = welch_t_test(&b, &a, false).unwrap();
        assert_abs_diff_eq!(one.p_value, ab.p_value / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spearman_perfect() {
        let x = [1.0, 2.5, 3.0, 7.0, 8.0];
        let r = spearman_test(&x, &x).unwrap();
        assert_eq!((r.statistic, r.p_value), (1.0, 0.0));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let r = spearman_test(&x, &neg).unwrap();
        assert_eq!((r.statistic, r.p_value), (-1.0, 0.0));
        assert_eq!(
            spearman_test(&x, &x[..4]),
            Err(StatsError::LengthMismatch(5, 4))
        );
        assert_eq!(
            spearman_test(&x[..2], &x[..2]),
            Err(StatsError::TooFewPoints(2))
        );
    }

    #[test]
    fn spearman_with_ties_matches_scipy() {
        // scipy.stats.spearmanr([1,2,2,3,4],[2,1,3,3,5]) -> 0.7631578947368421, p = 0.1333391195318063
        let r = spearman_test(&[1.0, 2.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_abs_diff_eq!(r.statistic, 0.763_157_894_736_842_1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_value, 0.133_339_119_531_806_3, epsilon = 1e-9);
    }

    #[test]
    fn permutation_rho() {
        assert_abs_diff_eq!(
            spearman_from_ranks(&[1, 2, 3, 4], &[2, 1, 4, 3]),
            0.6,
            epsilon = 1e-15
        );
        assert_eq!(spearman_from_ranks(&[1, 2, 3], &[3, 2, 1]), -1.0);
    }

    #[test]
    fn mid_ranks_ties() {
        assert_eq!(
            mid_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
    }

    #[test]
    fn binomial_boundaries() {
        let r = binomial_test(10, 10, 0.5, true).unwrap();
        assert_abs_diff_eq!(r.p_value, 2.0 * 0.5f64.powi(10), epsilon = 1e-15);
        let r = binomial_test(50, 100, 0.5, true).unwrap();
        assert!(r.p_value >= 0.9);
        assert!(binomial_test(11, 10, 0.5, true).is_err());
        assert!(binomial_test(1, 10, 1.0, true).is_err());
    }

    #[test]
    fn binomial_judge_counts() {
        // 200 comparisons, 1.5% ties -> 197 decisive, 57.3% wins -> 113.
        // scipy.stats.binomtest: greater 0.02288836632073214, two-sided 0.04577673264146428
        let one = binomial_test(113, 197, 0.5, false).unwrap();
        assert_abs_diff_eq!(one.p_value, 0.022_888_366_320_732_14, epsilon = 1e-12);
        assert!((one.p_value - 0.02).abs() <= 0.01);
        let two = binomial_test(113, 197, 0.5, true).unwrap();
        assert_abs_diff_eq!(two.p_value, 0.045_776_732_641_464_28, epsilon = 1e-12);
    }

    #[test]
    fn wilson_known() {
        // statsmodels proportion_confint(113, 197, method="wilson")
        let (lo, hi) = wilson_interval(113, 197, 1.959_963_984_540_054).unwrap();
        assert_abs_diff_eq!(lo, 0.503_785_235_738_789_7, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 0.640_607_262_554_555_4, epsilon = 1e-9);
    }
}

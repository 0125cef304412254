//! Confidence intervals, paired tests, effect sizes and correlations.
//!
//! p-values come from Student's t distribution, evaluated through the
//! regularized incomplete beta function (modified Lentz continued fraction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal critical value used for every reported 95% interval.
pub const Z95: f64 = 1.96;

/// Task accuracies, optionally keyed by task index for pairing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub values: Vec<f64>,
    #[serde(default)]
    pub pairing_key: Option<Vec<u64>>,
}

impl AccuracySeries {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pairing_key: None }
    }

    pub fn keyed(values: Vec<f64>, keys: Vec<u64>) -> Result<Self> {
        if values.len() != keys.len() {
            return Err(Error::invalid(format!("{} values but {} keys", values.len(), keys.len())));
        }
        Ok(Self { values, pairing_key: Some(keys) })
    }

    /// Checks that both series can be compared pair by pair.
    pub fn check_paired(&self, other: &AccuracySeries) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::UnpairedRecords(format!("lengths {} and {}", self.values.len(), other.values.len())));
        }
        if self.pairing_key != other.pairing_key {
            return Err(Error::UnpairedRecords("pairing keys differ".into()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// `(mean, 1.96 · s / √n)`.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!("confidence interval needs n >= 2, got {}", values.len())));
    }
    let m = mean(values);
    let half = if values.iter().all(|&v| v == values[0]) {
        0.0
    } else {
        Z95 * sample_std(values) / (values.len() as f64).sqrt()
    };
    Ok((m, half))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// True when the differences have zero variance.
    pub degenerate: bool,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::UnpairedRecords(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid(format!("paired statistics need n >= 2, got {}", a.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Paired two-sided t-test on `a − b`. Zero-variance differences give
/// `t = ±∞, p = 0` when the mean difference is nonzero and `t = 0, p = 1`
/// when every difference is zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = differences(a, b)?;
    let n = d.len();
    let df = n - 1;
    if d.iter().all(|&x| x == d[0]) {
        let (t, p) = if d[0] == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(d[0]), 0.0) };
        return Ok(TTest { t, p, df, degenerate: true });
    }
    let t = mean(&d) / (sample_std(&d) / (n as f64).sqrt());
    Ok(TTest { t, p: t_two_sided_p(t, df as f64), df, degenerate: false })
}

pub fn paired_t_test_series(a: &AccuracySeries, b: &AccuracySeries) -> Result<TTest> {
    a.check_paired(b)?;
    paired_t_test(&a.values, &b.values)
}

/// `mean(a − b) / sd(a − b)`; positive when `a` is larger. Degenerate
/// differences follow the t-test convention: `±∞`, or 0 when `a == b`.
pub fn cohens_d_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = differences(a, b)?;
    if d.iter().all(|&x| x == d[0]) {
        return Ok(if d[0] == 0.0 { 0.0 } else { f64::INFINITY.copysign(d[0]) });
    }
    Ok(mean(&d) / sample_std(&d))
}

/// Verbal size of a standardized effect.
pub fn effect_label(d: f64) -> &'static str {
    match d.abs() {
        x if x < 0.3 => "small/negligible",
        x if x < 0.8 => "medium",
        _ => "large",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

fn check_xy(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("correlation needs n >= 3, got {}", x.len())));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::Degenerate(format!("{name} is constant")));
        }
    }
    Ok(())
}

/// p-value of a correlation coefficient via `t = r √((n − 2)/(1 − r²))`.
pub fn correlation_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    t_two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
}

fn pearson_r(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_xy(x, y)?;
    let r = pearson_r(x, y);
    Ok(Correlation { r, p: correlation_p(r, x.len()), n: x.len() })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_xy(x, y)?;
    let r = pearson_r(&mid_ranks(x), &mid_ranks(y));
    Ok(Correlation { r, p: correlation_p(r, x.len()), n: x.len() })
}

/// Rounds half to even at `decimals` places.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let y = x * scale;
    let r = y.round();
    let adjusted = if (y - y.trunc()).abs() == 0.5 { 2.0 * (y / 2.0).round() } else { r };
    adjusted / scale
}

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

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// `I_x(a, b)` for `0 <= x <= 1`, `a, b > 0`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// `P(T <= t)`.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = t_two_sided_p(t, df) / 2.0;
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Bernoulli, Distribution, Normal};

    #[test]
    fn ci_closed_form() {
        let (m, h) = mean_ci95(&[0.5, 0.7]).unwrap();
        assert!((m - 0.6).abs() < 1e-15);
        assert!((h - 1.96 * 0.02f64.sqrt() / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((h - 0.196).abs() < 1e-5);
        assert_eq!(mean_ci95(&[0.3; 10]).unwrap().1, 0.0);
        assert!(mean_ci95(&[0.3]).is_err());
    }

    #[test]
    fn ci_covers_true_mean() {
        let bern = Bernoulli::new(0.8).unwrap();
        let covered = (0..100)
            .filter(|&rep| {
                let mut rng = keyed_rng(11, rep, "coverage");
                let v: Vec<f64> = (0..600).map(|_| if bern.sample(&mut rng) { 1.0 } else { 0.0 }).collect();
                let (m, h) = mean_ci95(&v).unwrap();
                (m - 0.8).abs() <= h
            })
            .count();
        assert!(covered >= 90, "{covered}");
    }

    #[test]
    fn ci_shrinks_with_n() {
        let normal = Normal::new(0.6, 0.15).unwrap();
        let narrower = (0..200)
            .filter(|&rep| {
                let mut rng = keyed_rng(12, rep, "shrink");
                let v: Vec<f64> = (0..400).map(|_| normal.sample(&mut rng)).collect();
                mean_ci95(&v).unwrap().1 < mean_ci95(&v[..100]).unwrap().1
            })
            .count();
        assert!(narrower as f64 >= 0.99 * 200.0);
    }

    #[test]
    fn degenerate_pairs() {
        let a = [0.4, 0.5, 0.9];
        let t = paired_t_test(&a, &a).unwrap();
        assert_eq!((t.t, t.p, t.degenerate), (0.0, 1.0, true));
        let b: Vec<f64> = a.iter().map(|x| x - 0.1).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.degenerate && t.p == 0.0 && t.t == f64::INFINITY);
        assert_eq!(cohens_d_paired(&a, &a).unwrap(), 0.0);
        assert!(cohens_d_paired(&b, &a).unwrap() == f64::NEG_INFINITY);
        assert!(paired_t_test(&a, &a[..2]).is_err());
    }

    #[test]
    fn cohens_d_closed_form() {
        let d = cohens_d_paired(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((d - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(effect_label(-0.22), "small/negligible");
        assert_eq!(effect_label(0.5), "medium");
        assert_eq!(effect_label(-1.2), "large");
    }

    #[test]
    fn series_pairing_is_checked() {
        let a = AccuracySeries::keyed(vec![0.1, 0.2, 0.4], vec![0, 1, 2]).unwrap();
        let b = AccuracySeries::keyed(vec![0.2, 0.2, 0.3], vec![0, 1, 3]).unwrap();
        assert!(matches!(paired_t_test_series(&a, &b), Err(Error::UnpairedRecords(_))));
        assert!(paired_t_test_series(&a, &a).is_ok());
    }

    #[test]
    fn perfect_correlations() {
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let s = spearman(&x, &rev).unwrap();
        assert_eq!(s.r, -1.0);
        assert_eq!(s.p, 0.0);
        let cubes: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        assert_eq!(spearman(&x, &cubes).unwrap().r, 1.0);
        assert!(matches!(pearson(&x, &[1.0; 8]), Err(Error::Degenerate(_))));
        assert!(spearman(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn t_distribution_known_values() {
        // df = 1 is Cauchy: P(|T| >= 1) = 1/2.
        assert!((t_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-14);
        // df = 2 has a closed form: P(|T| >= t) = 1 − t / √(2 + t²).
        for t in [0.3f64, 1.0, 2.5, 10.0] {
            let exact = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((t_two_sided_p(t, 2.0) - exact).abs() < 1e-13);
        }
        assert!((t_cdf(0.0, 7.0) - 0.5).abs() < 1e-15);
        assert!((t_cdf(-2.0, 5.0) + t_cdf(2.0, 5.0) - 1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round_half_even(0.125, 2), 0.12);
        assert_eq!(round_half_even(72.25, 1), 72.2);
        assert_eq!(round_half_even(72.35, 1), 72.4);
        assert_eq!(round_half_even(70.72, 1), 70.7);
    }

    proptest! {
        #[test]
        fn invariant_to_joint_permutation(seed in any::<u64>(), n in 3usize..30) {
            let mut rng = keyed_rng(seed, 0, "perm");
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            idx.rotate_left(n / 3);
            let px: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            prop_assert!((pearson(&x, &y).unwrap().r - pearson(&px, &py).unwrap().r).abs() < 1e-12);
            prop_assert!((spearman(&x, &y).unwrap().r - spearman(&px, &py).unwrap().r).abs() < 1e-12);
            prop_assert!((paired_t_test(&x, &y).unwrap().t - paired_t_test(&px, &py).unwrap().t).abs() < 1e-9);
        }

        #[test]
        fn affine_and_monotone_invariance(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = keyed_rng(seed, 1, "affine");
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&x, &ax).unwrap().r - 1.0).abs() < 1e-12);
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(spearman(&x, &y).unwrap().r, spearman(&ex, &y).unwrap().r);
        }
    }
}

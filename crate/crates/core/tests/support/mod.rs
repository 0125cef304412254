//! Reference implementations used as oracles by the acceptance suite.
//!
//! Written from textbook definitions and deliberately share no code with the
//! crate: the t tail comes from direct quadrature of the density rather than
//! the incomplete beta function, ranks are found by counting, and Adam is
//! spelled out with running powers of the decay rates.

#![allow(dead_code)]

use std::f64::consts::PI;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// `Γ((ν+1)/2) / Γ(ν/2)` from `r(1) = 1/√π`, `r(2) = √π/2` and
/// `r(ν+2) = r(ν)·(ν+1)/ν`. Exact up to rounding for integer ν.
pub fn gamma_ratio(df: usize) -> f64 {
    assert!(df >= 1);
    let mut nu = if df % 2 == 1 { 1 } else { 2 };
    let mut r = if nu == 1 { 1.0 / PI.sqrt() } else { PI.sqrt() / 2.0 };
    while nu < df {
        r *= (nu as f64 + 1.0) / nu as f64;
        nu += 2;
    }
    r
}

/// Composite Gauss–Legendre (10 points per panel) on `[a, b]`.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [0.1488743389816312, 0.4333953941292472, 0.6794095682990244, 0.8650633666889845, 0.9739065285171717];
    const W: [f64; 5] = [0.2955242247147529, 0.2692667193099963, 0.2190863625159820, 0.1494513491505806, 0.0666713443086881];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = h / 2.0;
        for (x, w) in X.iter().zip(&W) {
            total += w * (f(mid - half * x) + f(mid + half * x)) * half;
        }
    }
    total
}

/// `P(T > t)` for Student's t with `df` degrees of freedom, `t >= 0`.
///
/// With `x = √ν·tan θ` the tail becomes
/// `Γ((ν+1)/2)/(√π·Γ(ν/2)) · ∫_{atan(t/√ν)}^{π/2} cos^{ν−1} θ dθ`.
pub fn t_upper_tail(t: f64, df: usize) -> f64 {
    assert!(t >= 0.0);
    if t.is_infinite() {
        return 0.0;
    }
    let theta0 = (t / (df as f64).sqrt()).atan();
    let c = gamma_ratio(df) / PI.sqrt();
    c * integrate(|th| th.cos().powi(df as i32 - 1), theta0, PI / 2.0, 200)
}

pub fn t_two_sided(t: f64, df: usize) -> f64 {
    (2.0 * t_upper_tail(t.abs(), df)).min(1.0)
}

/// `(t, p, df)` of the paired t-test on `a − b`.
pub fn paired_t(a: &[f64], b: &[f64]) -> (f64, f64, usize) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let t = mean(&d) / (sample_var(&d) / n as f64).sqrt();
    (t, t_two_sided(t, n - 1), n - 1)
}

pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean(&d) / sample_var(&d).sqrt()
}

/// Product-moment r and its two-sided p from `t = r·√((n−2)/(1−r²))`.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let r = sxy / (sxx * syy).sqrt();
    let n = x.len();
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        t_two_sided(r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt(), n - 2)
    };
    (r, p)
}

/// 1-based ranks; ties share the mean of the positions they span.
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    pearson(&ranks_by_counting(x), &ranks_by_counting(y))
}

/// Adam written out longhand, tracking `β^t` as running products.
pub struct RefAdam {
    m: f64,
    v: f64,
    b1t: f64,
    b2t: f64,
}

impl RefAdam {
    pub fn new() -> Self {
        Self { m: 0.0, v: 0.0, b1t: 1.0, b2t: 1.0 }
    }

    pub fn step(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.b1t *= b1;
        self.b2t *= b2;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1t);
        let v_hat = self.v / (1.0 - self.b2t);
        theta - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

/// Upper 0.001 quantile of the chi-square distribution with 13 degrees of
/// freedom, from standard tables.
pub const CHI2_13_CRIT_001: f64 = 34.528;

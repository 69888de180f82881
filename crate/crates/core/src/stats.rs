//! Sample summaries and the two goodness-of-fit tests the harness uses.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean with its standard error, tagged with what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub config_hash: String,
    /// Replicas discarded (population or step caps).
    #[serde(default)]
    pub discarded: usize,
}

impl EstimatorResult {
    pub fn from_summary(s: &Summary, seed: u64) -> Self {
        Self {
            mean: s.mean,
            se: s.se(),
            reps: s.count,
            n: None,
            seed,
            config_hash: String::new(),
            discarded: 0,
        }
    }

    /// `|a − b| / sqrt(se_a² + se_b²)`; infinite when both SEs vanish and
    /// the means differ.
    pub fn z_against(&self, other: &EstimatorResult) -> f64 {
        z_score(self.mean - other.mean, (self.se * self.se + other.se * other.se).sqrt())
    }

    /// `|mean − value| / se`.
    pub fn z_against_value(&self, value: f64) -> f64 {
        z_score(self.mean - value, self.se)
    }
}

pub fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Streaming mean and variance (Welford). Merging is exact up to rounding,
/// and the harness always merges in index order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Summary::default();
        for &x in xs {
            s.push(x);
        }
        s
    }

    /// Sample variance (n − 1 denominator).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn se(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Sample covariance of paired observations.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64
}

/// Delete-one-group jackknife for a smooth function of column means.
/// Rows are split into `groups` contiguous blocks. Returns (estimate, SE).
pub fn jackknife<const M: usize>(rows: &[[f64; M]], groups: usize, stat: impl Fn(&[f64; M]) -> f64) -> (f64, f64) {
    let n = rows.len();
    let mut total = [0.0; M];
    for r in rows {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    let means = |sum: &[f64; M], count: usize| {
        let mut m = *sum;
        m.iter_mut().for_each(|v| *v /= count as f64);
        m
    };
    let full = stat(&means(&total, n));
    let groups = groups.min(n);
    if groups < 2 {
        return (full, 0.0);
    }
    let mut leave_out = Vec::with_capacity(groups);
    for g in 0..groups {
        let (lo, hi) = (g * n / groups, (g + 1) * n / groups);
        let mut sum = total;
        for r in &rows[lo..hi] {
            for (t, v) in sum.iter_mut().zip(r) {
                *t -= v;
            }
        }
        leave_out.push(stat(&means(&sum, n - (hi - lo))));
    }
    let mean = leave_out.iter().sum::<f64>() / groups as f64;
    let var = leave_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (groups - 1) as f64 / groups as f64;
    (full, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: Option<usize>,
}

/// Pearson chi-square test that two count vectors share one distribution.
/// Bins empty in both samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> TestOutcome {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().sum::<u64>() as f64;
    let nb: f64 = b.iter().sum::<u64>() as f64;
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        bins += 1;
        let d = ka * x as f64 - kb * y as f64;
        stat += d * d / (x + y) as f64;
    }
    chi_outcome(stat, bins.saturating_sub(1))
}

/// Pearson goodness-of-fit of observed counts against expected probabilities.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> TestOutcome {
    assert_eq!(observed.len(), probs.len());
    let n: f64 = observed.iter().sum::<u64>() as f64;
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&o, &p) in observed.iter().zip(probs) {
        if p <= 0.0 {
            continue;
        }
        bins += 1;
        let e = n * p;
        stat += (o as f64 - e).powi(2) / e;
    }
    chi_outcome(stat, bins.saturating_sub(1))
}

fn chi_outcome(stat: f64, dof: usize) -> TestOutcome {
    let p_value = if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(stat)
    };
    TestOutcome {
        statistic: stat,
        p_value,
        dof: Some(dof),
    }
}

/// Asymptotic Kolmogorov tail `Q(λ) = 2 Σ (−1)^{j−1} e^{−2 j² λ²}`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test (asymptotic p-value with the
/// Stephens small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestOutcome {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return TestOutcome {
            statistic: 0.0,
            p_value: 1.0,
            dof: None,
        };
    }
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    TestOutcome {
        statistic: d,
        p_value: kolmogorov_tail((en + 0.12 + 0.11 / en) * d),
        dof: None,
    }
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> TestOutcome {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    let en = n.sqrt();
    TestOutcome {
        statistic: d,
        p_value: kolmogorov_tail((en + 0.12 + 0.11 / en) * d),
        dof: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let s = Summary::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean - mean).abs() < 1e-14);
        assert!((s.variance() - var).abs() < 1e-12);
        assert!((s.se() - (var / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let mut rng = stream(12, &[]);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let rows: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
        let (m, se) = jackknife(&rows, 1000, |m| m[0]);
        let s = Summary::from_slice(&xs);
        assert!((m - s.mean).abs() < 1e-12);
        assert!((se - s.se()).abs() < 1e-9);
    }

    #[test]
    fn ks_accepts_same_law_and_rejects_shift() {
        let mut rng = stream(11, &[]);
        let a: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
        assert!(ks_two_sample(&a, &c).p_value < 1e-6);
        assert_eq!(ks_two_sample(&a, &a).statistic, 0.0);
        assert!(ks_one_sample(&a, |x| x.clamp(0.0, 1.0)).p_value > 0.01);
    }

    #[test]
    fn chi_square_tests() {
        let t = chi_square_two_sample(&[100, 200, 300], &[100, 200, 300]);
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        assert!(chi_square_two_sample(&[300, 200, 100], &[100, 200, 300]).p_value < 1e-10);
        let g = chi_square_gof(&[250, 250, 500], &[0.25, 0.25, 0.5]);
        assert_eq!(g.statistic, 0.0);
        assert_eq!(g.dof, Some(2));
        // known quantile: chi2(2) upper 5% point 5.991
        let p = chi_outcome(5.991, 2).p_value;
        assert!((p - 0.05).abs() < 1e-3);
    }
}

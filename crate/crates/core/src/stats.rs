//! Small statistics helpers for the Monte Carlo and regression diagnostics.

use serde::Serialize;

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.std_error, self.mean + z * self.std_error)
    }
}

/// Streaming mean/variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn estimate(&self) -> MeanEstimate {
        let var = if self.count > 1 { self.m2 / (self.count - 1) as f64 } else { 0.0 };
        MeanEstimate {
            mean: self.mean,
            std_error: (var / self.count.max(1) as f64).sqrt(),
            count: self.count,
        }
    }
}

pub fn mean_estimate(values: &[f64]) -> MeanEstimate {
    let mut acc = Accumulator::default();
    for &v in values {
        acc.push(v);
    }
    acc.estimate()
}

/// Least-squares line `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}

/// Wilson score interval for a binomial proportion, as fractions in [0, 1].
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut dmax: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        dmax = dmax.max((i as f64 / na - j as f64 / nb).abs());
    }
    dmax
}

/// Asymptotic critical value of the two-sample KS statistic at level `alpha`.
pub fn ks_critical_value(n_a: usize, n_b: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n_a + n_b) as f64 / (n_a as f64 * n_b as f64)).sqrt()
}

/// One named diagnostic number, as exported in report CSVs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Statistic {
    pub name: String,
    pub value: f64,
    pub sample_size: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Statistic {
    pub fn new(name: impl Into<String>, value: f64, sample_size: usize) -> Self {
        Statistic {
            name: name.into(),
            value,
            sample_size,
            ci_low: None,
            ci_high: None,
        }
    }

    pub fn with_ci(mut self, lo: f64, hi: f64) -> Self {
        self.ci_low = Some(lo);
        self.ci_high = Some(hi);
        self
    }
}

/// CSV with columns `statistic, value, sample_size, ci_low, ci_high`.
pub fn statistics_to_csv(rows: &[Statistic]) -> crate::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["statistic", "value", "sample_size", "ci_low", "ci_high"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([r.name.clone(), r.value.to_string(), r.sample_size.to_string(), opt(r.ci_low), opt(r.ci_high)])?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_and_error() {
        let e = mean_estimate(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(e.mean, 2.5);
        assert_relative_eq!(e.std_error, (5.0f64 / 3.0 / 4.0).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn regression_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let f = linear_fit(&x, &y);
        assert_relative_eq!(f.slope, -3.0, max_relative = 1e-14);
        assert_relative_eq!(f.intercept, 2.0, max_relative = 1e-14);
        assert_relative_eq!(f.r_squared, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 10, 1.96).0, 0.0);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        assert!(ks_critical_value(1000, 1000, 0.05) > 0.05 && ks_critical_value(1000, 1000, 0.05) < 0.07);
    }
}

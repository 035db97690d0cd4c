//! Small summary-statistics helpers shared by the scans and the checks.

/// Running mean and variance (Welford). Accumulation order is fixed by the
/// caller, so results are reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Weighted least-squares slope of `y` on `x` with known standard errors of
/// `y`. Returns `(slope, se_slope, intercept)`.
pub fn weighted_slope(x: &[f64], y: &[f64], se: &[f64]) -> Option<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() != se.len() || x.len() < 2 {
        return None;
    }
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
    if w.iter().any(|w| !w.is_finite()) {
        return None;
    }
    let sw: f64 = w.iter().sum();
    let xbar = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ybar = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xbar).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = w.iter().zip(x.iter().zip(y)).map(|(w, (x, y))| w * (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    Some((slope, (1.0 / sxx).sqrt(), ybar - slope * xbar))
}

/// Empirical Paley-Zygmund comparison for a non-negative sample:
/// `P(X > 0)` against `(EX)^2 / E(X^2)`, with delta-method standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaleyZygmund {
    pub p_positive: f64,
    pub se_p: f64,
    pub ratio: f64,
    pub se_ratio: f64,
}

impl PaleyZygmund {
    pub fn combined_se(&self) -> f64 {
        self.se_p.hypot(self.se_ratio)
    }

    /// `P(X > 0) >= ratio - k * combined_se`.
    pub fn holds(&self, k: f64) -> bool {
        self.p_positive >= self.ratio - k * self.combined_se()
    }
}

pub fn paley_zygmund(xs: &[f64]) -> PaleyZygmund {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return PaleyZygmund { p_positive: 0.0, se_p: 0.0, ratio: 0.0, se_ratio: 0.0 };
    }
    let p = xs.iter().filter(|&&x| x > 0.0).count() as f64 / n;
    let m1 = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| x * x).sum::<f64>() / n;
    if m2 <= 0.0 {
        return PaleyZygmund { p_positive: p, se_p: 0.0, ratio: 0.0, se_ratio: 0.0 };
    }
    let m3 = xs.iter().map(|x| x * x * x).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x * x) * (x * x)).sum::<f64>() / n;
    let (var1, var2, cov) = (m2 - m1 * m1, m4 - m2 * m2, m3 - m1 * m2);
    let (g1, g2) = (2.0 * m1 / m2, -m1 * m1 / (m2 * m2));
    let var_ratio = (g1 * g1 * var1 + g2 * g2 * var2 + 2.0 * g1 * g2 * cov).max(0.0) / n;
    PaleyZygmund { p_positive: p, se_p: (p * (1.0 - p) / n).sqrt(), ratio: m1 * m1 / m2, se_ratio: var_ratio.sqrt() }
}

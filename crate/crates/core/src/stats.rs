//! Small statistics toolkit: pairwise sums, batch means, effective sample
//! size and least-squares lines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order-fixed pairwise summation; identical inputs give identical bits.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// A sample mean with a one-sigma standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of the mean; confidence statements use multiples of it.
    pub std_error: f64,
    pub samples: usize,
    pub batches: usize,
}

impl Estimate {
    pub fn exact(value: f64, samples: usize) -> Self {
        Self { mean: value, std_error: 0.0, samples, batches: 0 }
    }

    /// `|self - other| <= z * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &Estimate, z: f64) -> bool {
        (self.mean - other.mean).abs() <= z * self.std_error.hypot(other.std_error)
    }

    pub fn contains(&self, value: f64, z: f64) -> bool {
        (self.mean - value).abs() <= z * self.std_error
    }
}

pub const DEFAULT_BATCHES: usize = 20;

/// Batch-means estimate of the mean of a stationary series.
pub fn batch_means(xs: &[f64], batches: usize) -> Result<Estimate> {
    if xs.is_empty() {
        return Err(Error::EmptyStream);
    }
    if batches < 2 || xs.len() < batches {
        return Err(Error::InvalidArgument(format!(
            "batch means needs at least {batches} >= 2 samples, got {}",
            xs.len()
        )));
    }
    let size = xs.len() / batches;
    let used = size * batches;
    let means: Vec<f64> = xs[..used].chunks(size).map(mean).collect();
    let m = mean(&means);
    if means.iter().all(|&b| b == means[0]) {
        return Ok(Estimate { mean: m, std_error: 0.0, samples: used, batches });
    }
    let dev: Vec<f64> = means.iter().map(|b| (b - m) * (b - m)).collect();
    let var = pairwise_sum(&dev) / (batches - 1) as f64;
    Ok(Estimate { mean: m, std_error: (var / batches as f64).sqrt(), samples: used, batches })
}

/// Effective sample size from the initial positive sequence of
/// autocorrelations.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(xs);
    let c: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0: f64 = c.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau).min(n as f64)
}

/// Ordinary least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::DegenerateData(format!("need at least 2 points for a fit, got {}", x.len())));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateData("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(LineFit { slope, intercept: my - slope * mx, r_squared, points: x.len() })
}

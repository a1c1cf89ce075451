//! Small sample-statistics helpers shared by the Monte Carlo checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

/// Mean, unbiased variance and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

impl SampleStats {
    /// Summarizes `xs`, accumulating in index order.
    pub fn from_slice(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return SampleStats {
                n: 0,
                mean: f64::NAN,
                variance: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        SampleStats { n, mean, variance }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn stderr(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }
}

/// `(a - b) / sqrt(se_a² + se_b²)`.
pub fn z_score(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    (a - b) / (se_a * se_a + se_b * se_b).sqrt()
}

/// One-sided p-value for `Var(a) > Var(b)` under the F test on unbiased
/// sample variances. Returns `None` if either sample is too small.
pub fn variance_ratio_p_value(a: &SampleStats, b: &SampleStats) -> Option<f64> {
    if a.n < 2 || b.n < 2 || b.variance <= 0.0 {
        return None;
    }
    let f = a.variance / b.variance;
    let dist = FisherSnedecor::new((a.n - 1) as f64, (b.n - 1) as f64).ok()?;
    Some(dist.sf(f))
}

/// One-sided tail mass beyond three standard deviations, `Φ(-3)`.
pub const THREE_SIGMA_P: f64 = 0.001_349_898_031_630_094_6;

/// Delta-method standard error of the sample SNR `|mean| / std` from `n`
/// draws, `sqrt((1 + snr² / 2) / n)` (exact to first order for Gaussian data).
pub fn snr_stderr(snr: f64, n: usize) -> f64 {
    ((1.0 + 0.5 * snr * snr) / n as f64).sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

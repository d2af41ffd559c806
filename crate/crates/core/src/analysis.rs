//! Error metrics, the one-step efficiency decomposition, Monte Carlo bias
//! estimation, and a normality statistic.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hypersphere::{self, canonicalize, wrap_angle, CartesianGradient, SphericalCoords};
use crate::mechanisms::{self, GaussianNoise, PerturbConfig};
use crate::training::ModelState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("samples have zero variance; no Gaussian fit exists")]
    DegenerateFit,
}

/// Which perturbation a Monte Carlo estimate runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Dp,
    GeoDp,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Dp => "dp",
            Mechanism::GeoDp => "geodp",
        })
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dp" => Ok(Mechanism::Dp),
            "geodp" => Ok(Mechanism::GeoDp),
            other => Err(format!("unknown mechanism {other:?} (expected dp or geodp)")),
        }
    }
}

/// Split of the efficiency difference into the noise-scale term and the
/// noise/descent-trend term; `total = item_a + item_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyBreakdown {
    pub item_a: f64,
    pub item_b: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseReport {
    pub mse_direction: f64,
    pub mse_gradient: f64,
    pub sample_count: usize,
}

fn check_lengths(left: usize, right: usize) -> Result<(), AnalysisError> {
    if left != right {
        return Err(AnalysisError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(AnalysisError::TooFewSamples { needed: 1, found: 0 });
    }
    Ok(())
}

fn canonical(s: &SphericalCoords) -> std::borrow::Cow<'_, SphericalCoords> {
    if s.is_canonical() {
        std::borrow::Cow::Borrowed(s)
    } else {
        std::borrow::Cow::Owned(canonicalize(s))
    }
}

/// Squared angular distance between two directions, canonical forms first,
/// last-angle difference wrapped into `(-π, π]`.
pub fn direction_error(a: &SphericalCoords, b: &SphericalCoords) -> Result<f64, AnalysisError> {
    if a.angles.len() != b.angles.len() {
        return Err(AnalysisError::ShapeMismatch {
            expected: a.angles.len(),
            found: b.angles.len(),
        });
    }
    let (a, b) = (canonical(a), canonical(b));
    let last = a.angles.len() - 1;
    Ok(a.angles
        .iter()
        .zip(&b.angles)
        .enumerate()
        .map(|(i, (x, y))| {
            let diff = if i == last { wrap_angle(y - x) } else { y - x };
            diff * diff
        })
        .sum())
}

/// Mean squared error of perturbed directions.
pub fn mse_directions(
    originals: &[SphericalCoords],
    perturbed: &[SphericalCoords],
) -> Result<f64, AnalysisError> {
    check_lengths(originals.len(), perturbed.len())?;
    let mut total = 0.0;
    for (a, b) in originals.iter().zip(perturbed) {
        total += direction_error(a, b)?;
    }
    Ok(total / originals.len() as f64)
}

/// Mean squared Euclidean error of perturbed gradients.
pub fn mse_gradients(
    originals: &[CartesianGradient],
    perturbed: &[CartesianGradient],
) -> Result<f64, AnalysisError> {
    check_lengths(originals.len(), perturbed.len())?;
    let mut total = 0.0;
    for (a, b) in originals.iter().zip(perturbed) {
        if a.dim() != b.dim() {
            return Err(AnalysisError::ShapeMismatch {
                expected: a.dim(),
                found: b.dim(),
            });
        }
        total += squared_distance(a.as_slice(), b.as_slice());
    }
    Ok(total / originals.len() as f64)
}

/// Spherical form of `g`, with the zero vector mapped to zero angles.
pub fn direction_of(g: &CartesianGradient) -> SphericalCoords {
    hypersphere::to_spherical(g).unwrap_or_else(|_| SphericalCoords {
        magnitude: 0.0,
        angles: vec![0.0; g.dim() - 1],
    })
}

/// Both MSEs for paired rectangular gradients.
pub fn mse_report(
    originals: &[CartesianGradient],
    perturbed: &[CartesianGradient],
) -> Result<MseReport, AnalysisError> {
    let mse_gradient = mse_gradients(originals, perturbed)?;
    let a: Vec<_> = originals.iter().map(direction_of).collect();
    let b: Vec<_> = perturbed.iter().map(direction_of).collect();
    Ok(MseReport {
        mse_direction: mse_directions(&a, &b)?,
        mse_gradient,
        sample_count: originals.len(),
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dim(expected: usize, found: usize) -> Result<(), AnalysisError> {
    if expected != found {
        return Err(AnalysisError::ShapeMismatch { expected, found });
    }
    Ok(())
}

/// `‖w - w*‖²`.
pub fn model_efficiency(w: &ModelState, w_star: &ModelState) -> Result<f64, AnalysisError> {
    check_dim(w.dim(), w_star.dim())?;
    Ok(squared_distance(w.weights(), w_star.weights()))
}

/// Closed-form efficiency difference between a DP step with noise draw
/// `n_sigma` and the noise-free step from the same state:
///
/// ```text
/// item_a = η² (2C/B ⟨n, g̃⟩ + C² ‖n‖² / B²)
/// item_b = 2ηC/B ⟨n, w* - w_t⟩
/// ```
pub fn ed_decompose(
    w_t: &ModelState,
    w_star: &ModelState,
    clipped: &CartesianGradient,
    n_sigma: &[f64],
    lr: f64,
    clip: f64,
    batch_size: usize,
) -> Result<EfficiencyBreakdown, AnalysisError> {
    let d = w_t.dim();
    check_dim(d, w_star.dim())?;
    check_dim(d, clipped.dim())?;
    check_dim(d, n_sigma.len())?;
    let cb = clip / batch_size as f64;
    let n_dot_g: f64 = n_sigma.iter().zip(clipped.as_slice()).map(|(n, g)| n * g).sum();
    let n_sq: f64 = n_sigma.iter().map(|n| n * n).sum();
    let n_dot_trend: f64 = n_sigma
        .iter()
        .zip(w_star.weights().iter().zip(w_t.weights()))
        .map(|(n, (s, w))| n * (s - w))
        .sum();
    let item_a = lr * lr * (2.0 * cb * n_dot_g + cb * cb * n_sq);
    let item_b = 2.0 * lr * cb * n_dot_trend;
    Ok(EfficiencyBreakdown {
        item_a,
        item_b,
        total: item_a + item_b,
    })
}

/// Efficiency difference computed directly from the two updated models:
/// `‖w_t - w* - η g*‖² - ‖w_t - w* - η g̃‖²`.
///
/// Summed coordinatewise as `(a - b)(a + b)`; subtracting the two squared
/// norms would cancel catastrophically when the models are far from `w*`.
pub fn ed_direct(
    w_t: &ModelState,
    w_star: &ModelState,
    clipped: &CartesianGradient,
    perturbed: &CartesianGradient,
    lr: f64,
) -> Result<f64, AnalysisError> {
    let d = w_t.dim();
    check_dim(d, w_star.dim())?;
    check_dim(d, clipped.dim())?;
    check_dim(d, perturbed.dim())?;
    let mut total = 0.0;
    for i in 0..d {
        let base = w_t.weights()[i] - w_star.weights()[i];
        let a = base - lr * perturbed.as_slice()[i];
        let b = base - lr * clipped.as_slice()[i];
        total += (a - b) * (a + b);
    }
    Ok(total)
}

/// Monte Carlo estimate of the per-angle bias of a mechanism's direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    /// Mean of (perturbed angle - original angle), last angle wrapped.
    pub mean_deviation: Vec<f64>,
    /// Standard error of each mean.
    pub standard_error: Vec<f64>,
    pub trials: usize,
}

impl BiasEstimate {
    /// Largest `|mean| / standard_error` over the angles. Angles with zero
    /// spread count as 0 when their mean is 0 and infinity otherwise.
    pub fn max_z_score(&self) -> f64 {
        self.mean_deviation
            .iter()
            .zip(&self.standard_error)
            .map(|(m, se)| match (*m == 0.0, *se == 0.0) {
                (true, _) => 0.0,
                (false, true) => f64::INFINITY,
                (false, false) => (m / se).abs(),
            })
            .fold(0.0, f64::max)
    }
}

const BIAS_CHUNK: usize = 4096;

/// Estimates the bias each mechanism introduces on the direction of `clipped`.
///
/// DP directions are read off the perturbed rectangular vector (canonical
/// angles). GeoDP directions are the noisy angles the mechanism emits, before
/// any conversion; recovering them from the rectangular output would fold
/// negative noisy magnitudes and out-of-range angles back into the canonical
/// ranges and register that folding as bias.
///
/// Each chunk of trials draws from its own stream, so results do not depend
/// on the thread count.
pub fn bias_estimate(
    mechanism: Mechanism,
    clipped: &CartesianGradient,
    cfg: &PerturbConfig,
    trials: usize,
    seed: u64,
) -> Result<BiasEstimate, AnalysisError> {
    if trials < 100 {
        return Err(AnalysisError::TooFewSamples {
            needed: 100,
            found: trials,
        });
    }
    check_dim(cfg.dim, clipped.dim())?;
    let base = hypersphere::to_spherical(clipped).map_err(|_| AnalysisError::DegenerateFit)?;
    let m = base.angles.len();
    let last = m - 1;
    let chunks = trials.div_ceil(BIAS_CHUNK);

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = BIAS_CHUNK.min(trials - c * BIAS_CHUNK);
            let mut noise = GaussianNoise::with_stream(seed, c as u64);
            let mut sum = vec![0.0; m];
            let mut sum_sq = vec![0.0; m];
            for _ in 0..n {
                let angles = match mechanism {
                    Mechanism::Dp => {
                        let out = mechanisms::dp_perturb(clipped, cfg, &mut noise);
                        direction_of(&out).angles
                    }
                    Mechanism::GeoDp => {
                        mechanisms::geodp_perturb_spherical(clipped, cfg, &mut noise).angles
                    }
                };
                for (i, (a, b)) in angles.iter().zip(&base.angles).enumerate() {
                    let dev = if i == last { wrap_angle(a - b) } else { a - b };
                    sum[i] += dev;
                    sum_sq[i] += dev * dev;
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    for (s, q) in partials {
        for i in 0..m {
            sum[i] += s[i];
            sum_sq[i] += q[i];
        }
    }
    let n = trials as f64;
    let mean_deviation: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let standard_error = sum_sq
        .iter()
        .zip(&mean_deviation)
        .map(|(q, mean)| {
            let var = ((q - n * mean * mean) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(BiasEstimate {
        mean_deviation,
        standard_error,
        trials,
    })
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and a
/// Gaussian with the sample mean and standard deviation.
pub fn normality_statistic(samples: &[f64]) -> Result<f64, AnalysisError> {
    const MIN_SAMPLES: usize = 50;
    if samples.len() < MIN_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            needed: MIN_SAMPLES,
            found: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(AnalysisError::DegenerateFit);
    }
    let normal = Normal::new(mean, std).map_err(|_| AnalysisError::DegenerateFit)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = normal.cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max(f - lo).max(hi - f);
    }
    Ok(d)
}

/// Asymptotic critical value of the one-sample KS statistic,
/// `√(-ln(α/2) / 2) / √n`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

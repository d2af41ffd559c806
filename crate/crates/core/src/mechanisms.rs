//! Clipping, Gaussian noise, and the two gradient perturbations.
//!
//! Both mechanisms take an already clipped (and batch-averaged) gradient `g̃`
//! with `‖g̃‖ <= C`:
//!
//! * [`dp_perturb`] adds `(C / B) · n` with `n ~ N(0, σ² I_d)` to every
//!   rectangular coordinate.
//! * [`geodp_perturb`] moves to hyperspherical coordinates, adds `(C / B) · n`
//!   to the magnitude and `(√(d+2) β π / B) · n` to each of the `d - 1`
//!   angles, then converts back.
//!
//! Noise comes from a [`NoiseSource`], so tests can replay exact draws.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::hypersphere::{self, CartesianGradient, SphericalCoords};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid privacy parameters: {0}")]
    InvalidPrivacyParams(String),
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
}

/// Knobs shared by both perturbation mechanisms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    pub clip_threshold: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub bounding_factor: f64,
    pub dim: usize,
}

impl PerturbConfig {
    pub fn new(
        clip_threshold: f64,
        noise_multiplier: f64,
        batch_size: usize,
        bounding_factor: f64,
        dim: usize,
    ) -> Result<Self, MechanismError> {
        let cfg = Self {
            clip_threshold,
            noise_multiplier,
            batch_size,
            bounding_factor,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        let bad = |m: String| Err(MechanismError::InvalidConfig(m));
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return bad(format!("clip threshold must be > 0, got {}", self.clip_threshold));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!("noise multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.bounding_factor > 0.0 && self.bounding_factor <= 1.0) {
            return bad(format!("bounding factor must be in (0, 1], got {}", self.bounding_factor));
        }
        if self.dim < 2 {
            return bad(format!("dimension must be >= 2, got {}", self.dim));
        }
        Ok(())
    }

    /// Standard deviation of the magnitude noise, `C σ / B`.
    pub fn magnitude_noise_scale(&self) -> f64 {
        self.clip_threshold * self.noise_multiplier / self.batch_size as f64
    }

    /// Standard deviation of each angle's noise, `√(d+2) β π σ / B`.
    pub fn angle_noise_scale(&self) -> f64 {
        direction_sensitivity(self.dim, self.bounding_factor) * self.noise_multiplier
            / self.batch_size as f64
    }
}

/// Source of the `n_σ` draws used by the mechanisms.
///
/// `fill` writes zero-mean Gaussian values with standard deviation `sigma`.
pub trait NoiseSource {
    fn fill(&mut self, sigma: f64, out: &mut [f64]);

    fn draw(&mut self, sigma: f64) -> f64 {
        let mut one = [0.0];
        self.fill(sigma, &mut one);
        one[0]
    }
}

/// Seeded Gaussian noise backed by ChaCha8.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same master seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }
}

impl NoiseSource for GaussianNoise {
    fn fill(&mut self, sigma: f64, out: &mut [f64]) {
        sample_noise_into(&mut self.rng, sigma, out);
    }
}

/// Replays a fixed list of already-scaled `n_σ` values, ignoring `sigma`.
///
/// Panics when exhausted.
#[derive(Debug, Clone)]
pub struct InjectedNoise {
    values: Vec<f64>,
    pos: usize,
}

impl InjectedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.values.len() - self.pos
    }
}

impl NoiseSource for InjectedNoise {
    fn fill(&mut self, _sigma: f64, out: &mut [f64]) {
        let end = self.pos + out.len();
        assert!(end <= self.values.len(), "injected noise exhausted");
        out.copy_from_slice(&self.values[self.pos..end]);
        self.pos = end;
    }
}

/// Rescales `g` to norm at most `C`: `g / max(1, ‖g‖ / C)`.
pub fn clip_gradient(g: &CartesianGradient, clip: f64) -> CartesianGradient {
    let norm = g.norm();
    if norm <= clip {
        return g.clone();
    }
    // Rounding can leave the scaled norm an ulp above `clip`; shrink until it
    // is not, so clipping is exactly idempotent.
    let mut scale = clip / norm;
    loop {
        let out = g.scaled(scale);
        if out.norm() <= clip {
            return out;
        }
        scale = scale.next_down();
    }
}

/// Per-example clipping followed by the arithmetic mean.
pub fn average_clipped(
    batch: &[CartesianGradient],
    clip: f64,
) -> Result<CartesianGradient, MechanismError> {
    let first = batch.first().ok_or(MechanismError::EmptyBatch)?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    for g in batch {
        if g.dim() != d {
            return Err(MechanismError::DimensionMismatch {
                expected: d,
                found: g.dim(),
            });
        }
        let c = clip_gradient(g, clip);
        for (a, v) in acc.iter_mut().zip(c.as_slice()) {
            *a += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(CartesianGradient::from_vec_unchecked(acc))
}

/// Noise multiplier of the classic Gaussian mechanism,
/// `σ = √(2 ln(1.25/δ)) / ε`.
pub fn gaussian_sigma(epsilon: f64, delta: f64) -> Result<f64, MechanismError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    check_delta(delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

fn check_delta(delta: f64) -> Result<(), MechanismError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(MechanismError::InvalidPrivacyParams(format!(
            "delta must be in (0, 1), got {delta}"
        )))
    }
}

/// `dims` i.i.d. draws from `N(0, σ²)`; zeros when `σ = 0`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, dims: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; dims];
    sample_noise_into(rng, sigma, &mut out);
    out
}

fn sample_noise_into<R: Rng + ?Sized>(rng: &mut R, sigma: f64, out: &mut [f64]) {
    if sigma == 0.0 {
        out.fill(0.0);
        return;
    }
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = sigma * z;
    }
}

/// Classic DP-SGD perturbation: `g̃ + (C/B) · n_σ`.
pub fn dp_perturb(
    clipped: &CartesianGradient,
    cfg: &PerturbConfig,
    noise: &mut dyn NoiseSource,
) -> CartesianGradient {
    let mut n = vec![0.0; clipped.dim()];
    noise.fill(cfg.noise_multiplier, &mut n);
    let scale = cfg.clip_threshold / cfg.batch_size as f64;
    let out = clipped
        .as_slice()
        .iter()
        .zip(&n)
        .map(|(g, n)| g + scale * n)
        .collect();
    CartesianGradient::from_vec_unchecked(out)
}

/// Sensitivity of the direction under bounding factor `β`:
/// `d - 2` interior angles of range `βπ` and one final angle of range `2βπ`
/// combine to `√(d+2) β π`.
pub fn direction_sensitivity(dim: usize, beta: f64) -> f64 {
    (dim as f64 + 2.0).sqrt() * beta * PI
}

/// GeoDP perturbation in hyperspherical coordinates.
///
/// Returns the noisy magnitude and the noisy angles exactly as produced,
/// without canonicalization. One magnitude draw is consumed first, then
/// `d - 1` angle draws, whether or not the input is zero.
///
/// The zero vector has no direction; its angles are taken as all zero, which
/// points the output along the first axis.
pub fn geodp_perturb_spherical(
    clipped: &CartesianGradient,
    cfg: &PerturbConfig,
    noise: &mut dyn NoiseSource,
) -> SphericalCoords {
    let d = clipped.dim();
    let coords = hypersphere::to_spherical(clipped).unwrap_or(SphericalCoords {
        magnitude: 0.0,
        angles: vec![0.0; d - 1],
    });
    let magnitude_noise = noise.draw(cfg.noise_multiplier);
    let mut angle_noise = vec![0.0; d - 1];
    noise.fill(cfg.noise_multiplier, &mut angle_noise);

    let mag_scale = cfg.clip_threshold / cfg.batch_size as f64;
    let angle_scale = direction_sensitivity(d, cfg.bounding_factor) / cfg.batch_size as f64;
    SphericalCoords {
        magnitude: coords.magnitude + mag_scale * magnitude_noise,
        angles: coords
            .angles
            .iter()
            .zip(&angle_noise)
            .map(|(a, n)| a + angle_scale * n)
            .collect(),
    }
}

/// GeoDP perturbation returned in rectangular coordinates.
///
/// A negative noisy magnitude is kept as is; it flips the vector through
/// the conversion.
pub fn geodp_perturb(
    clipped: &CartesianGradient,
    cfg: &PerturbConfig,
    noise: &mut dyn NoiseSource,
) -> CartesianGradient {
    hypersphere::to_cartesian(&geodp_perturb_spherical(clipped, cfg, noise))
}

/// Privacy level of one perturbation step plus its basic composition over
/// `steps` iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub epsilon_per_step: f64,
    pub delta: f64,
    pub steps: u64,
    pub epsilon_total: f64,
    pub delta_total: f64,
    /// Upper bound on the extra failure probability of the bounded direction.
    pub direction_delta_bound: f64,
    pub relaxation_note: String,
}

impl PrivacyReport {
    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epsilon_per_step", fmt_f64(self.epsilon_per_step)),
            ("delta", fmt_f64(self.delta)),
            ("steps", self.steps.to_string()),
            ("epsilon_total", fmt_f64(self.epsilon_total)),
            ("delta_total", fmt_f64(self.delta_total)),
            ("direction_delta_bound", fmt_f64(self.direction_delta_bound)),
            ("relaxation_note", self.relaxation_note.clone()),
        ]
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn privacy_report(
    sigma: f64,
    delta: f64,
    steps: u64,
    beta: f64,
) -> Result<PrivacyReport, MechanismError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    check_delta(delta)?;
    if steps == 0 {
        return Err(MechanismError::InvalidPrivacyParams("steps must be >= 1".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(MechanismError::InvalidPrivacyParams(format!(
            "bounding factor must be in (0, 1], got {beta}"
        )));
    }
    let epsilon_per_step = (2.0 * (1.25 / delta).ln()).sqrt() / sigma;
    let bound = 1.0 - beta;
    let relaxation_note = format!(
        "magnitude satisfies (epsilon, delta)-DP; direction satisfies \
         (epsilon, delta + delta')-DP with delta' <= {bound} (1 - beta); \
         the same sigma perturbs magnitude and all d-1 angles, so the direction \
         carries (d-1)/d of the per-coordinate budget"
    );
    Ok(PrivacyReport {
        epsilon_per_step,
        delta,
        steps,
        epsilon_total: steps as f64 * epsilon_per_step,
        delta_total: steps as f64 * delta,
        direction_delta_bound: bound,
        relaxation_note,
    })
}

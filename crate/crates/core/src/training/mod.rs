//! Mini-batch SGD for softmax logistic regression, with optional DP or
//! GeoDP perturbation of the averaged clipped gradient.
//!
//! Every iteration samples a batch (seeded, without replacement within an
//! epoch), clips each example's gradient to `C`, averages, perturbs
//! according to [`Mode`], and takes a plain SGD step. Runs are fully
//! determined by their [`TrainConfig`].

mod collect;
mod model;

pub use collect::{collect_gradients, CollectConfig};
pub use model::{
    clipped_mean_gradient, dataset_loss, evaluate, lr_loss_and_gradient, sgd_step, ModelState,
};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{BatchSampler, DataError, LabeledDataset};
use crate::hypersphere::CoordError;
use crate::mechanisms::{self, GaussianNoise, MechanismError, PerturbConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite weights")]
    NonFinite,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Coord(#[from] CoordError),
}

/// Perturbation applied to the averaged clipped gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    None,
    Dp,
    GeoDp,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::None => "none",
            Mode::Dp => "dp",
            Mode::GeoDp => "geodp",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Mode::None),
            "dp" => Ok(Mode::Dp),
            "geodp" => Ok(Mode::GeoDp),
            other => Err(format!("unknown mode {other:?} (expected none, dp or geodp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub perturb: PerturbConfig,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Test accuracy is recorded every `eval_every` iterations when a test
    /// set is attached.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.perturb.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(TrainError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean cross-entropy of the sampled batch before the step.
    pub train_loss: f64,
    /// Norm of the averaged clipped gradient before perturbation.
    pub clipped_norm: f64,
    /// `‖w_{t+1} - w*‖²` when a reference optimum is attached.
    pub model_efficiency: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub final_weights: ModelState,
    pub final_test_accuracy: Option<f64>,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }

    /// Mean batch loss over the last `window` iterations.
    pub fn smoothed_final_loss(&self, window: usize) -> f64 {
        let n = window.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len() - n..];
        tail.iter().map(|r| r.train_loss).sum::<f64>() / n as f64
    }
}

/// A configured training run.
///
/// ```no_run
/// # use geodp::training::{Trainer, TrainConfig};
/// # fn demo(train: &geodp::data::LabeledDataset, test: &geodp::data::LabeledDataset, cfg: TrainConfig) {
/// let trajectory = Trainer::new(train, cfg).test_set(test).run().unwrap();
/// # }
/// ```
pub struct Trainer<'a> {
    data: &'a LabeledDataset,
    cfg: TrainConfig,
    test: Option<&'a LabeledDataset>,
    initial: Option<ModelState>,
    reference: Option<&'a ModelState>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a LabeledDataset, cfg: TrainConfig) -> Self {
        Self {
            data,
            cfg,
            test: None,
            initial: None,
            reference: None,
        }
    }

    pub fn test_set(mut self, test: &'a LabeledDataset) -> Self {
        self.test = Some(test);
        self
    }

    /// Start from `w` instead of zero weights.
    pub fn initial(mut self, w: ModelState) -> Self {
        self.initial = Some(w);
        self
    }

    /// Record model efficiency against `w_star` after every step.
    pub fn reference(mut self, w_star: &'a ModelState) -> Self {
        self.reference = Some(w_star);
        self
    }

    pub fn run(self) -> Result<Trajectory, TrainError> {
        let cfg = self.cfg;
        cfg.validate()?;
        let mut w = self
            .initial
            .unwrap_or_else(|| ModelState::for_dataset(self.data));
        if cfg.perturb.dim != w.dim() {
            return Err(TrainError::ShapeMismatch {
                expected: w.dim(),
                found: cfg.perturb.dim,
            });
        }
        if let Some(r) = self.reference {
            if r.dim() != w.dim() {
                return Err(TrainError::ShapeMismatch {
                    expected: w.dim(),
                    found: r.dim(),
                });
            }
        }

        let mut sampler = BatchSampler::new(self.data.len(), cfg.perturb.batch_size, cfg.seed)?;
        let mut noise = GaussianNoise::with_stream(cfg.seed, 1);
        let mut records = Vec::with_capacity(cfg.iterations);

        for t in 0..cfg.iterations {
            let batch = sampler.next_batch();
            let (loss, clipped) =
                clipped_mean_gradient(&w, self.data, batch, cfg.perturb.clip_threshold)?;
            let step = match cfg.mode {
                Mode::None => clipped.clone(),
                Mode::Dp => mechanisms::dp_perturb(&clipped, &cfg.perturb, &mut noise),
                Mode::GeoDp => mechanisms::geodp_perturb(&clipped, &cfg.perturb, &mut noise),
            };
            model::sgd_step_in_place(&mut w, step.as_slice(), cfg.learning_rate)?;
            if w.weights().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite);
            }

            let model_efficiency = self.reference.map(|r| squared_distance(w.weights(), r.weights()));
            let test_accuracy = match self.test {
                Some(test) if (t + 1) % cfg.eval_every == 0 => Some(evaluate(&w, test)?),
                _ => None,
            };
            records.push(IterationRecord {
                iteration: t,
                train_loss: loss,
                clipped_norm: clipped.norm(),
                model_efficiency,
                test_accuracy,
            });
        }

        let final_test_accuracy = match self.test {
            Some(test) => Some(evaluate(&w, test)?),
            None => None,
        };
        Ok(Trajectory {
            records,
            final_weights: w,
            final_test_accuracy,
        })
    }
}

/// Trains from zero weights without a test set.
pub fn train(data: &LabeledDataset, cfg: TrainConfig) -> Result<Trajectory, TrainError> {
    Trainer::new(data, cfg).run()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

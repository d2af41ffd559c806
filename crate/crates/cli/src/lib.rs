//! Experiment runner behind the `geodp` binary.
//!
//! Each subcommand is a plain function of its parsed flags so the test suite
//! can drive it in-process. Output CSVs have a single header row whose first
//! column is a schema tag; floats are written with 17 significant digits.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use geodp::analysis::{self, Mechanism};
use geodp::data::{self, DataError, GradientDataset, LabeledDataset};
use geodp::hypersphere::CartesianGradient;
use geodp::mechanisms::{self, GaussianNoise, PerturbConfig};
use geodp::training::{self, CollectConfig, Mode, ModelState, TrainConfig, Trainer};

pub const MSE_SCHEMA: &str = "geodp-mse/1";
pub const TRAIN_SCHEMA: &str = "geodp-train/1";

/// Tolerance `ed-check` holds the two efficiency computations to.
pub const ED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag values; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// I/O, parse or runtime failure; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "geodp", version, about = "DP-SGD and GeoDP experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare direction and gradient MSE of DP and GeoDP on stored gradients.
    MseBench(MseBenchArgs),
    /// Train softmax logistic regression on MNIST.
    Train(TrainArgs),
    /// Record per-example clipped gradients into a GDS1 file.
    Collect(CollectArgs),
    /// Check the efficiency decomposition against direct computation.
    EdCheck(EdCheckArgs),
    /// Print the privacy level of a noise configuration.
    Privacy(PrivacyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct MseBenchArgs {
    /// GDS1 gradient file.
    #[arg(long)]
    pub gradients: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub betas: Vec<f64>,
    #[arg(long = "batch-sizes", value_delimiter = ',', required = true)]
    pub batch_sizes: Vec<usize>,
    /// Use a seeded random subset of this many coordinates of each row
    /// (defaults to the full dimension).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Gradients perturbed per grid point.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MnistArgs {
    /// Directory with the four MNIST IDX files (optionally gzipped).
    #[arg(long = "mnist-dir", default_value = "data/mnist-subset")]
    pub mnist_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub mnist: MnistArgs,
    #[arg(long, default_value = "none")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub clip: f64,
    #[arg(long = "batch-size", default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 350)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also evaluate test accuracy every this many iterations (0 = only at the end).
    #[arg(long = "eval-every", default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub mnist: MnistArgs,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only use the first N training examples.
    #[arg(long)]
    pub examples: Option<usize>,
    /// Store gradients through a seeded Gaussian projection to this dimension.
    #[arg(long = "project-to")]
    pub project_to: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EdCheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Largest model dimension; each instance draws its dimension from 2..=dim.
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct PrivacyArgs {
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    /// Number of iterations to compose over.
    #[arg(long = "iterations", short = 'T', default_value_t = 1)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

/// Runs one parsed command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let pool = thread_pool()?;
    let mut text = String::new();
    let result = pool.install(|| dispatch(cli.command, &mut text));
    stdout.write_all(text.as_bytes())?;
    result
}

fn dispatch(command: Command, out: &mut String) -> Result<(), CliError> {
    match command {
        Command::MseBench(a) => {
            let records = mse_bench(&a)?;
            write_file(&a.out, &mse_csv(&records))?;
            let _ = writeln!(out, "wrote {} rows to {}", records.len(), a.out.display());
        }
        Command::Train(a) => {
            let run = train(&a)?;
            write_file(&a.out, &train_csv(&a, &run))?;
            let _ = writeln!(
                out,
                "final_loss={} test_accuracy={}",
                fmt(run.final_train_loss),
                fmt(run.test_accuracy)
            );
        }
        Command::Collect(a) => {
            let ds = collect(&a)?;
            let _ = writeln!(
                out,
                "wrote {} gradients of dimension {} to {}",
                ds.count(),
                ds.dim(),
                a.out.display()
            );
        }
        Command::EdCheck(a) => {
            let max = ed_check(&a)?;
            let _ = writeln!(out, "max_relative_error={}", fmt(max));
            if max > ED_TOLERANCE {
                return Err(CliError::Runtime(format!(
                    "max relative error {max:e} exceeds {ED_TOLERANCE:e}"
                )));
            }
        }
        Command::Privacy(a) => {
            let report = mechanisms::privacy_report(a.sigma, a.delta, a.iterations, a.beta)
                .map_err(|e| usage(e.to_string()))?;
            for (k, v) in report.to_key_values() {
                let _ = writeln!(out, "{k}={v}");
            }
        }
    }
    Ok(())
}

/// Worker pool sized by `GEODP_THREADS` when set.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GEODP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("GEODP_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| {
        CliError::Runtime(format!("cannot create {}: {e}", path.display()))
    })?);
    w.write_all(contents.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// One row of `mse-bench` output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub mechanism: Mechanism,
    pub d: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub beta: f64,
    pub clip: f64,
    pub seed: u64,
    pub trials: usize,
    pub mse_direction: f64,
    pub mse_gradient: f64,
}

pub fn mse_csv(records: &[ExperimentRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut rows = vec![vec![
        "schema", "mechanism", "d", "batch_size", "sigma", "beta", "clip", "seed", "trials",
        "mse_direction", "mse_gradient",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for r in records {
        rows.push(vec![
            MSE_SCHEMA.to_string(),
            r.mechanism.to_string(),
            r.d.to_string(),
            r.batch_size.to_string(),
            fmt(r.sigma),
            fmt(r.beta),
            fmt(r.clip),
            r.seed.to_string(),
            r.trials.to_string(),
            fmt(r.mse_direction),
            fmt(r.mse_gradient),
        ]);
    }
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

fn check_grid(a: &MseBenchArgs) -> Result<(), CliError> {
    if a.sigmas.is_empty() || a.betas.is_empty() || a.batch_sizes.is_empty() {
        return Err(usage("sigma, beta and batch-size lists must be non-empty"));
    }
    if a.trials == 0 {
        return Err(usage("trials must be >= 1"));
    }
    if let Some(&s) = a.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(usage(format!("sigma must be >= 0, got {s}")));
    }
    if let Some(&b) = a.betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        return Err(usage(format!("beta must be in (0, 1], got {b}")));
    }
    if a.batch_sizes.contains(&0) {
        return Err(usage("batch sizes must be >= 1"));
    }
    Ok(())
}

/// Perturbs `trials` stored gradients at every (mechanism, σ, β, B) grid
/// point. Each stored row is perturbed on its own, with noise scaled as if it
/// were the average of a batch of `B`.
///
/// Grid points run in parallel; point `i` draws rows and noise from stream
/// `i` of the master seed, so output does not depend on the worker count.
pub fn mse_bench(a: &MseBenchArgs) -> Result<Vec<ExperimentRecord>, CliError> {
    check_grid(a)?;
    let ds = data::load_gradients(&a.gradients)?;
    bench_dataset(&ds, a)
}

/// [`mse_bench`] on an already loaded dataset.
pub fn bench_dataset(ds: &GradientDataset, a: &MseBenchArgs) -> Result<Vec<ExperimentRecord>, CliError> {
    check_grid(a)?;
    let d = a.dim.unwrap_or(ds.dim());
    if d < 2 || d > ds.dim() {
        return Err(usage(format!(
            "dim must be in 2..={} for this file, got {d}",
            ds.dim()
        )));
    }
    let clip = ds.metadata.clip;
    if !(clip > 0.0) {
        return Err(CliError::Runtime(format!("gradient file has invalid clip {clip}")));
    }

    // Fixed coordinate subset shared by every grid point.
    let coords: Option<Vec<usize>> = (d < ds.dim()).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut idx = sample(&mut rng, ds.dim(), d).into_vec();
        idx.sort_unstable();
        idx
    });

    let mut grid = Vec::new();
    for mechanism in [Mechanism::Dp, Mechanism::GeoDp] {
        for &sigma in &a.sigmas {
            for &beta in &a.betas {
                for &b in &a.batch_sizes {
                    grid.push((mechanism, sigma, beta, b));
                }
            }
        }
    }

    grid.par_iter()
        .enumerate()
        .map(|(i, &(mechanism, sigma, beta, b))| {
            let cfg = PerturbConfig::new(clip, sigma, b, beta, d).map_err(|e| usage(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            rng.set_stream(2 * i as u64 + 1);
            let mut noise = GaussianNoise::with_stream(a.seed, 2 * i as u64 + 2);
            let rows: Vec<usize> = if a.trials <= ds.count() {
                sample(&mut rng, ds.count(), a.trials).into_vec()
            } else {
                (0..a.trials).map(|_| rng.random_range(0..ds.count())).collect()
            };

            let mut dir_total = 0.0;
            let mut grad_total = 0.0;
            for r in rows {
                let row = ds.row(r);
                let v = match &coords {
                    Some(c) => c.iter().map(|&j| row[j]).collect(),
                    None => row.to_vec(),
                };
                let g = mechanisms::clip_gradient(
                    &CartesianGradient::new(v).map_err(|e| CliError::Runtime(e.to_string()))?,
                    clip,
                );
                let (direction, perturbed_direction, perturbed) = match mechanism {
                    Mechanism::Dp => {
                        let p = mechanisms::dp_perturb(&g, &cfg, &mut noise);
                        (analysis::direction_of(&g), analysis::direction_of(&p), p)
                    }
                    Mechanism::GeoDp => {
                        let s = mechanisms::geodp_perturb_spherical(&g, &cfg, &mut noise);
                        let p = geodp::hypersphere::to_cartesian(&s);
                        (analysis::direction_of(&g), s, p)
                    }
                };
                dir_total += analysis::direction_error(&direction, &perturbed_direction)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                grad_total += g
                    .as_slice()
                    .iter()
                    .zip(perturbed.as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
            let n = a.trials as f64;
            Ok(ExperimentRecord {
                mechanism,
                d,
                batch_size: b,
                sigma,
                beta,
                clip,
                seed: a.seed,
                trials: a.trials,
                mse_direction: dir_total / n,
                mse_gradient: grad_total / n,
            })
        })
        .collect()
}

fn resolve(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(CliError::Runtime(format!("{name}[.gz] not found in {}", dir.display())))
}

/// Loads the training and test sets from an MNIST directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let train = data::load_mnist(
        resolve(dir, "train-images-idx3-ubyte")?,
        resolve(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = data::load_mnist(
        resolve(dir, "t10k-images-idx3-ubyte")?,
        resolve(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Result of one `train` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub trajectory: training::Trajectory,
    /// Mean loss over the whole training set at the final weights.
    pub final_train_loss: f64,
    pub test_accuracy: f64,
}

pub fn train(a: &TrainArgs) -> Result<TrainRun, CliError> {
    if a.batch_size == 0 || a.iterations == 0 {
        return Err(usage("batch-size and iterations must be >= 1"));
    }
    let (train, test) = load_mnist_dir(&a.mnist.mnist_dir)?;
    train_on(&train, &test, a)
}

/// [`train`] on already loaded data.
pub fn train_on(train: &LabeledDataset, test: &LabeledDataset, a: &TrainArgs) -> Result<TrainRun, CliError> {
    if a.batch_size > train.len() {
        return Err(usage(format!(
            "batch-size {} exceeds the {} training examples",
            a.batch_size,
            train.len()
        )));
    }
    let dim = ModelState::for_dataset(train).dim();
    let perturb = PerturbConfig::new(a.clip, a.sigma, a.batch_size, a.beta, dim)
        .map_err(|e| usage(e.to_string()))?;
    let cfg = TrainConfig {
        mode: a.mode,
        perturb,
        learning_rate: a.lr,
        iterations: a.iterations,
        seed: a.seed,
        eval_every: if a.eval_every == 0 { usize::MAX } else { a.eval_every },
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let trajectory = Trainer::new(train, cfg)
        .test_set(test)
        .run()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let final_train_loss = training::dataset_loss(&trajectory.final_weights, train)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let test_accuracy = trajectory.final_test_accuracy.unwrap_or(f64::NAN);
    Ok(TrainRun {
        trajectory,
        final_train_loss,
        test_accuracy,
    })
}

/// Per-iteration rows followed by one summary row. Iteration rows carry the
/// batch loss; the summary row carries the full training-set loss and the
/// test accuracy at the final weights.
pub fn train_csv(a: &TrainArgs, run: &TrainRun) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "schema", "row", "mode", "iteration", "sigma", "beta", "clip", "batch_size", "lr", "seed",
        "train_loss", "clipped_norm", "test_accuracy",
    ])
    .expect("writing to memory");
    let row = |kind: &str, iteration: usize, loss: f64, norm: String, acc: String| {
        vec![
            TRAIN_SCHEMA.to_string(),
            kind.to_string(),
            a.mode.to_string(),
            iteration.to_string(),
            fmt(a.sigma),
            fmt(a.beta),
            fmt(a.clip),
            a.batch_size.to_string(),
            fmt(a.lr),
            a.seed.to_string(),
            fmt(loss),
            norm,
            acc,
        ]
    };
    for r in &run.trajectory.records {
        let acc = r.test_accuracy.map(fmt).unwrap_or_default();
        w.write_record(row("iteration", r.iteration, r.train_loss, fmt(r.clipped_norm), acc))
            .expect("writing to memory");
    }
    w.write_record(row(
        "summary",
        a.iterations,
        run.final_train_loss,
        String::new(),
        fmt(run.test_accuracy),
    ))
    .expect("writing to memory");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn collect(a: &CollectArgs) -> Result<GradientDataset, CliError> {
    if a.epochs == 0 {
        return Err(usage("epochs must be >= 1"));
    }
    if !(a.clip > 0.0) || !(a.lr > 0.0) {
        return Err(usage("clip and lr must be > 0"));
    }
    if a.project_to.is_some_and(|k| k < 2) {
        return Err(usage("project-to must be >= 2"));
    }
    let dir = &a.mnist.mnist_dir;
    let mut train = data::load_mnist(
        resolve(dir, "train-images-idx3-ubyte")?,
        resolve(dir, "train-labels-idx1-ubyte")?,
    )?;
    if let Some(n) = a.examples {
        if n == 0 || n > train.len() {
            return Err(usage(format!("examples must be in 1..={}", train.len())));
        }
        train = train.head(n);
    }
    let cfg = CollectConfig {
        epochs: a.epochs,
        clip: a.clip,
        learning_rate: a.lr,
        seed: a.seed,
        project_to: a.project_to,
    };
    let ds = training::collect_gradients(&train, &cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    data::save_gradients(&ds, &a.out)?;
    Ok(ds)
}

/// Largest relative disagreement between the decomposed and the directly
/// computed efficiency difference over random instances.
pub fn ed_check(a: &EdCheckArgs) -> Result<f64, CliError> {
    if a.trials == 0 {
        return Err(usage("trials must be >= 1"));
    }
    if a.dim < 2 {
        return Err(usage("dim must be >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let normals = |rng: &mut ChaCha8Rng, d: usize| mechanisms::sample_noise(rng, d, 1.0);
    let runtime = |e: &dyn std::fmt::Display| CliError::Runtime(e.to_string());
    let mut max_rel = 0.0f64;
    for _ in 0..a.trials {
        let d = rng.random_range(2..=a.dim);
        let w = ModelState::from_weights(normals(&mut rng, d), d - 1, 1).map_err(|e| runtime(&e))?;
        let w_star = ModelState::from_weights(normals(&mut rng, d), d - 1, 1).map_err(|e| runtime(&e))?;
        let g = CartesianGradient::new(normals(&mut rng, d)).map_err(|e| runtime(&e))?;
        let n = normals(&mut rng, d);
        let lr = rng.random_range(0.01..1.0);
        let clip = rng.random_range(0.1..2.0);
        let b = rng.random_range(1..=256usize);
        let scale = clip / b as f64;
        let perturbed = CartesianGradient::new(
            g.as_slice().iter().zip(&n).map(|(g, n)| g + scale * n).collect(),
        )
        .map_err(|e| runtime(&e))?;
        let split = analysis::ed_decompose(&w, &w_star, &g, &n, lr, clip, b).map_err(|e| runtime(&e))?;
        let direct = analysis::ed_direct(&w, &w_star, &g, &perturbed, lr).map_err(|e| runtime(&e))?;
        let denom = split.total.abs().max(direct.abs());
        if denom > 0.0 {
            max_rel = max_rel.max((split.total - direct).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
pub struct BookExperiments;

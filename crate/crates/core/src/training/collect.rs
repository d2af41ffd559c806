use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use super::{lr_loss_and_gradient, model, ModelState, TrainError};
use crate::data::{BatchSampler, GradientDataset, GradientMetadata, LabeledDataset};
use crate::mechanisms::clip_gradient;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectConfig {
    pub epochs: usize,
    pub clip: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Store each gradient through a seeded Gaussian random projection to
    /// this many dimensions (clipping applies after projection).
    pub project_to: Option<usize>,
}

/// Dense `k x d` projection with i.i.d. `N(0, 1/k)` entries, stored column
/// by column so a sparse input only touches the columns it needs.
struct Projection {
    k: usize,
    columns: Vec<f64>,
}

impl Projection {
    fn new(k: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let scale = 1.0 / (k as f64).sqrt();
        let columns = (0..k * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { k, columns }
    }

    fn apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (j, &v) in g.iter().enumerate() {
            if v != 0.0 {
                let col = &self.columns[j * self.k..(j + 1) * self.k];
                for (o, p) in out.iter_mut().zip(col) {
                    *o += v * p;
                }
            }
        }
        out
    }
}

/// Runs noise-free SGD with batch size 1 from zero weights, storing every
/// per-example clipped gradient as one row.
pub fn collect_gradients(
    data: &LabeledDataset,
    cfg: &CollectConfig,
) -> Result<GradientDataset, TrainError> {
    if cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
    }
    if !(cfg.clip > 0.0) || !(cfg.learning_rate > 0.0) {
        return Err(TrainError::InvalidConfig(
            "clip and learning rate must be > 0".into(),
        ));
    }
    if cfg.project_to.is_some_and(|k| k < 2) {
        return Err(TrainError::InvalidConfig("projection needs >= 2 dimensions".into()));
    }
    let mut w = ModelState::for_dataset(data);
    let projection = cfg.project_to.map(|k| Projection::new(k, w.dim(), cfg.seed));
    let out_dim = cfg.project_to.unwrap_or(w.dim());

    let steps = cfg.epochs * data.len();
    let mut rows = Vec::with_capacity(steps * out_dim);
    let mut sampler = BatchSampler::new(data.len(), 1, cfg.seed)?;
    for _ in 0..steps {
        let (_, grads) = lr_loss_and_gradient(&w, data, sampler.next_batch())?;
        let clipped = clip_gradient(&grads[0], cfg.clip);
        match &projection {
            Some(p) => {
                let projected = p.apply(grads[0].as_slice());
                let g = crate::hypersphere::CartesianGradient::new(projected)?;
                rows.extend_from_slice(clip_gradient(&g, cfg.clip).as_slice());
            }
            None => rows.extend_from_slice(clipped.as_slice()),
        }
        model::sgd_step_in_place(&mut w, clipped.as_slice(), cfg.learning_rate)?;
    }

    let mut extra = BTreeMap::new();
    extra.insert("epochs".to_string(), json!(cfg.epochs));
    extra.insert("examples".to_string(), json!(data.len()));
    extra.insert("learning_rate".to_string(), json!(cfg.learning_rate));
    extra.insert("model_dim".to_string(), json!(w.dim()));
    if let Some(k) = cfg.project_to {
        extra.insert("projection_dim".to_string(), json!(k));
    }
    let metadata = GradientMetadata {
        source_model: "softmax-logistic-regression".into(),
        clip: cfg.clip,
        seed: cfg.seed,
        extra,
    };
    Ok(GradientDataset::new(out_dim, rows, metadata)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let features = (0..n * 8).map(|_| rng.random::<f64>()).collect();
        let labels = (0..n).map(|i| i % 10).collect();
        LabeledDataset::new(features, labels, 8, 10).unwrap()
    }

    fn cfg(epochs: usize) -> CollectConfig {
        CollectConfig {
            epochs,
            clip: 0.1,
            learning_rate: 0.1,
            seed: 3,
            project_to: None,
        }
    }

    #[test]
    fn one_epoch_one_row_per_example() {
        let ds = collect_gradients(&toy(100), &cfg(1)).unwrap();
        assert_eq!(ds.count(), 100);
        assert_eq!(ds.dim(), 90);
        assert!(ds.rows().all(|r| crate::hypersphere::l2_norm(r) <= 0.1 * (1.0 + 1e-12)));
        assert_eq!(ds.metadata.clip, 0.1);
    }

    #[test]
    fn same_seed_same_rows() {
        let data = toy(40);
        let a = collect_gradients(&data, &cfg(2)).unwrap();
        let b = collect_gradients(&data, &cfg(2)).unwrap();
        assert_eq!(a.count(), 80);
        assert_eq!(a, b);
    }

    #[test]
    fn projected_rows_are_clipped() {
        let mut c = cfg(1);
        c.project_to = Some(16);
        let ds = collect_gradients(&toy(30), &c).unwrap();
        assert_eq!(ds.dim(), 16);
        assert!(ds.rows().all(|r| crate::hypersphere::l2_norm(r) <= 0.1 * (1.0 + 1e-12)));
        assert_eq!(ds.metadata.extra["projection_dim"], json!(16));
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(collect_gradients(&toy(5), &cfg(0)).is_err());
    }
}

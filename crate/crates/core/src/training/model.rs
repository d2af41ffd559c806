use rayon::prelude::*;

use super::TrainError;
use crate::data::LabeledDataset;
use crate::hypersphere::CartesianGradient;

/// Examples per parallel work unit. Fixed so floating-point summation order,
/// and therefore every result, is independent of the thread count.
const CHUNK: usize = 64;

/// Multiclass softmax logistic regression.
///
/// Weights are a `(num_features + 1) x num_classes` matrix flattened
/// row-major, so entry `(f, c)` sits at `f * num_classes + c`. Row
/// `num_features` holds the bias (a constant-1 feature).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    weights: Vec<f64>,
    num_features: usize,
    num_classes: usize,
}

impl ModelState {
    pub fn zeros(num_features: usize, num_classes: usize) -> Self {
        Self {
            weights: vec![0.0; (num_features + 1) * num_classes],
            num_features,
            num_classes,
        }
    }

    pub fn from_weights(
        weights: Vec<f64>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self, TrainError> {
        let d = (num_features + 1) * num_classes;
        if weights.len() != d {
            return Err(TrainError::ShapeMismatch {
                expected: d,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::NonFinite);
        }
        Ok(Self {
            weights,
            num_features,
            num_classes,
        })
    }

    pub fn for_dataset(data: &LabeledDataset) -> Self {
        Self::zeros(data.num_features(), data.num_classes())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<(), TrainError> {
        if data.num_features() != self.num_features {
            return Err(TrainError::ShapeMismatch {
                expected: self.num_features,
                found: data.num_features(),
            });
        }
        if data.num_classes() != self.num_classes {
            return Err(TrainError::ShapeMismatch {
                expected: self.num_classes,
                found: data.num_classes(),
            });
        }
        Ok(())
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let k = self.num_classes;
        out.copy_from_slice(&self.weights[self.num_features * k..]);
        for (f, &xf) in x.iter().enumerate() {
            if xf != 0.0 {
                let row = &self.weights[f * k..(f + 1) * k];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += xf * w;
                }
            }
        }
    }

    /// Cross-entropy loss of one example; `probs` receives `softmax - onehot`.
    fn loss_and_residual(&self, x: &[f64], label: usize, probs: &mut [f64]) -> f64 {
        self.logits(x, probs);
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        let loss = sum.ln() - (probs[label].ln());
        for p in probs.iter_mut() {
            *p /= sum;
        }
        probs[label] -= 1.0;
        loss
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.num_classes];
        self.logits(x, &mut logits);
        // first maximum wins ties
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }
}

fn check_batch(w: &ModelState, data: &LabeledDataset, batch: &[usize]) -> Result<(), TrainError> {
    w.check_data(data)?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(TrainError::InvalidConfig(format!(
            "example index {i} out of range for {} examples",
            data.len()
        )));
    }
    Ok(())
}

/// Gradient of one example as a dense vector: entry `(f, c)` is `x̃_f (p_c - y_c)`.
fn outer(x: &[f64], residual: &[f64], out: &mut [f64]) {
    let k = residual.len();
    for (f, &xf) in x.iter().enumerate() {
        let row = &mut out[f * k..(f + 1) * k];
        if xf == 0.0 {
            row.fill(0.0);
        } else {
            for (o, r) in row.iter_mut().zip(residual) {
                *o = xf * r;
            }
        }
    }
    out[x.len() * k..].copy_from_slice(residual);
}

/// Mean cross-entropy over `batch` and one gradient per example.
pub fn lr_loss_and_gradient(
    w: &ModelState,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<(f64, Vec<CartesianGradient>), TrainError> {
    check_batch(w, data, batch)?;
    let k = w.num_classes;
    let mut residual = vec![0.0; k];
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for &i in batch {
        loss += w.loss_and_residual(data.features(i), data.label(i), &mut residual);
        let mut g = vec![0.0; w.dim()];
        outer(data.features(i), &residual, &mut g);
        grads.push(CartesianGradient::new(g)?);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Mean loss plus the average of per-example clipped gradients, computed
/// without materialising every per-example gradient.
///
/// Equal (up to summation order) to clipping each gradient from
/// [`lr_loss_and_gradient`] and averaging; the per-example norm of the outer
/// product is `‖x̃‖ · ‖p - y‖`.
pub fn clipped_mean_gradient(
    w: &ModelState,
    data: &LabeledDataset,
    batch: &[usize],
    clip: f64,
) -> Result<(f64, CartesianGradient), TrainError> {
    check_batch(w, data, batch)?;
    let k = w.num_classes;
    let d = w.dim();
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; d];
            let mut residual = vec![0.0; k];
            let mut loss = 0.0;
            for &i in chunk {
                let x = data.features(i);
                loss += w.loss_and_residual(x, data.label(i), &mut residual);
                let x_norm = (x.iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt();
                let r_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm = x_norm * r_norm;
                let scale = if norm > clip { 1.0 / (norm / clip) } else { 1.0 };
                for (f, &xf) in x.iter().enumerate() {
                    if xf != 0.0 {
                        let s = scale * xf;
                        for (a, r) in acc[f * k..(f + 1) * k].iter_mut().zip(&residual) {
                            *a += s * r;
                        }
                    }
                }
                for (a, r) in acc[x.len() * k..].iter_mut().zip(&residual) {
                    *a += scale * r;
                }
            }
            (loss, acc)
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = vec![0.0; d];
    for (l, part) in partials {
        loss += l;
        for (a, p) in acc.iter_mut().zip(&part) {
            *a += p;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok((loss * inv, CartesianGradient::new(acc)?))
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(w: &ModelState, data: &LabeledDataset) -> Result<f64, TrainError> {
    w.check_data(data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let total: f64 = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut residual = vec![0.0; w.num_classes];
            chunk
                .iter()
                .map(|&i| w.loss_and_residual(data.features(i), data.label(i), &mut residual))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(total / data.len() as f64)
}

/// `w - η g`.
pub fn sgd_step(w: &ModelState, g: &CartesianGradient, lr: f64) -> Result<ModelState, TrainError> {
    let mut next = w.clone();
    sgd_step_in_place(&mut next, g.as_slice(), lr)?;
    Ok(next)
}

pub(crate) fn sgd_step_in_place(w: &mut ModelState, g: &[f64], lr: f64) -> Result<(), TrainError> {
    if g.len() != w.dim() {
        return Err(TrainError::ShapeMismatch {
            expected: w.dim(),
            found: g.len(),
        });
    }
    for (wi, gi) in w.weights.iter_mut().zip(g) {
        *wi -= lr * gi;
    }
    Ok(())
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn evaluate(w: &ModelState, test: &LabeledDataset) -> Result<f64, TrainError> {
    w.check_data(test)?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let correct: usize = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .filter(|&&i| w.predict(test.features(i)) == test.label(i))
                .count()
        })
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::average_clipped;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, f: usize, k: usize) -> LabeledDataset {
        let features = (0..n * f)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        LabeledDataset::new(features, labels, f, k).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, f: usize, k: usize) -> ModelState {
        let w = (0..(f + 1) * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        ModelState::from_weights(w, f, k).unwrap()
    }

    fn example_loss(w: &ModelState, data: &LabeledDataset, i: usize) -> f64 {
        lr_loss_and_gradient(w, data, &[i]).unwrap().0
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let data = LabeledDataset::new(vec![0.5; 784], vec![3], 784, 10).unwrap();
        let w = ModelState::for_dataset(&data);
        assert_eq!(w.dim(), 7850);
        let (loss, grads) = lr_loss_and_gradient(&w, &data, &[0]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        // bias block holds p - y
        let bias = &grads[0].as_slice()[7840..];
        for (c, &v) in bias.iter().enumerate() {
            let expected = if c == 3 { 0.1 - 1.0 } else { 0.1 };
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, k) = (6, 4);
        let data = random_dataset(&mut rng, 20, f, k);
        let h = 1e-5;
        for trial in 0..100 {
            let w = random_model(&mut rng, f, k);
            let i = trial % data.len();
            let (_, g) = lr_loss_and_gradient(&w, &data, &[i]).unwrap();
            for j in 0..w.dim() {
                let mut plus = w.clone();
                plus.weights[j] += h;
                let mut minus = w.clone();
                minus.weights[j] -= h;
                let fd = (example_loss(&plus, &data, i) - example_loss(&minus, &data, i)) / (2.0 * h);
                assert!((fd - g[0].as_slice()[j]).abs() < 1e-6, "coord {j}: {fd} vs {}", g[0].as_slice()[j]);
            }
        }
    }

    #[test]
    fn duplicated_example_gives_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_dataset(&mut rng, 5, 3, 3);
        let w = random_model(&mut rng, 3, 3);
        let (_, g) = lr_loss_and_gradient(&w, &data, &[2, 2]).unwrap();
        assert_eq!(g[0], g[1]);
    }

    #[test]
    fn fused_clipped_mean_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_dataset(&mut rng, 300, 12, 5);
        let w = random_model(&mut rng, 12, 5);
        let batch: Vec<usize> = (0..200).map(|_| rng.random_range(0..300)).collect();
        for clip in [0.05, 0.5, 100.0] {
            let (loss_a, grads) = lr_loss_and_gradient(&w, &data, &batch).unwrap();
            let reference = average_clipped(&grads, clip).unwrap();
            let (loss_b, fused) = clipped_mean_gradient(&w, &data, &batch, clip).unwrap();
            assert!((loss_a - loss_b).abs() < 1e-12);
            for (a, b) in reference.as_slice().iter().zip(fused.as_slice()) {
                assert!((a - b).abs() < 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let data = LabeledDataset::new(vec![0.1; 6], vec![0, 1], 3, 2).unwrap();
        let w = ModelState::zeros(4, 2);
        assert!(matches!(lr_loss_and_gradient(&w, &data, &[0]), Err(TrainError::ShapeMismatch { .. })));
        assert!(matches!(evaluate(&w, &data), Err(TrainError::ShapeMismatch { .. })));
        let w = ModelState::for_dataset(&data);
        assert!(matches!(lr_loss_and_gradient(&w, &data, &[]), Err(TrainError::EmptyBatch)));
        assert!(matches!(
            ModelState::from_weights(vec![0.0; 3], 3, 2),
            Err(TrainError::ShapeMismatch { expected: 8, found: 3 })
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let w = ModelState::from_weights(vec![1.0, 1.0], 0, 2).unwrap();
        let g = CartesianGradient::new(vec![1.0, -1.0]).unwrap();
        assert_eq!(sgd_step(&w, &g, 0.0).unwrap(), w);
        assert_eq!(sgd_step(&w, &g, 0.5).unwrap().weights(), &[0.5, 1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_model(&mut rng, 3, 2);
        let g = CartesianGradient::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let back = sgd_step(&sgd_step(&w, &g, 0.3).unwrap(), &g.scaled(-1.0), 0.3).unwrap();
        for (a, b) in back.weights().iter().zip(w.weights()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let short = CartesianGradient::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(sgd_step(&w, &short, 0.1), Err(TrainError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let features = (0..100 * 4).map(|_| rng.random::<f64>()).collect();
        let labels = (0..100).map(|i| i % 10).collect();
        let data = LabeledDataset::new(features, labels, 4, 10).unwrap();
        let acc = evaluate(&ModelState::for_dataset(&data), &data).unwrap();
        assert_eq!(acc, 0.1);
    }
}

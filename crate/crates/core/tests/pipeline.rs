//! End to end through the public API: IDX files on disk, gradient
//! collection, GDS1 persistence, perturbation and error metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geodp::analysis::mse_report;
use geodp::data::{encode_idx_images, encode_idx_labels, load_gradients, load_mnist, save_gradients};
use geodp::hypersphere::CartesianGradient;
use geodp::mechanisms::{dp_perturb, geodp_perturb, GaussianNoise, PerturbConfig};
use geodp::training::{collect_gradients, CollectConfig};

fn write_fixture(dir: &std::path::Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    // each digit brightens its own 4x4 block of an 8x8 image
    let mut pixels = Vec::with_capacity(n * 64);
    for &l in &labels {
        for p in 0..64usize {
            let block = (p / 8 / 4) * 2 + (p % 8) / 4;
            let base: u8 = rng.random_range(0..60);
            pixels.push(if block == usize::from(l) % 4 { base + 180 } else { base });
        }
    }
    let images = dir.join("images.idx");
    let label_file = dir.join("labels.idx");
    std::fs::write(&images, encode_idx_images(8, 8, &pixels)).unwrap();
    std::fs::write(&label_file, encode_idx_labels(&labels)).unwrap();
    (images, label_file)
}

#[test]
fn collected_gradients_survive_persistence_and_benchmarking() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path(), 200);
    let data = load_mnist(&images, &labels).unwrap();
    assert_eq!((data.len(), data.num_features()), (200, 64));

    let cfg = CollectConfig {
        epochs: 2,
        clip: 0.5,
        learning_rate: 0.1,
        seed: 4,
        project_to: None,
    };
    let ds = collect_gradients(&data, &cfg).unwrap();
    assert_eq!((ds.count(), ds.dim()), (400, 650));
    let path = dir.path().join("grads.gds");
    save_gradients(&ds, &path).unwrap();
    let loaded = load_gradients(&path).unwrap();
    assert_eq!(loaded, ds);

    let originals: Vec<CartesianGradient> = loaded
        .rows()
        .map(|r| CartesianGradient::new(r.to_vec()).unwrap())
        .collect();
    let mut noise = GaussianNoise::seeded(1);
    let mut report = |cfg: &PerturbConfig, geo: bool| {
        let perturbed: Vec<_> = originals
            .iter()
            .map(|g| if geo { geodp_perturb(g, cfg, &mut noise) } else { dp_perturb(g, cfg, &mut noise) })
            .collect();
        mse_report(&originals, &perturbed).unwrap()
    };

    let quiet = PerturbConfig::new(0.5, 0.0, 64, 0.1, 650).unwrap();
    assert_eq!(report(&quiet, false).mse_gradient, 0.0);
    assert!(report(&quiet, true).mse_direction < 1e-20);

    // larger sigma, larger error, for both mechanisms
    for geo in [false, true] {
        let lo = report(&PerturbConfig::new(0.5, 0.5, 64, 0.1, 650).unwrap(), geo);
        let hi = report(&PerturbConfig::new(0.5, 2.0, 64, 0.1, 650).unwrap(), geo);
        assert!(lo.mse_gradient < hi.mse_gradient);
        assert!(lo.mse_direction < hi.mse_direction);
        assert_eq!(lo.sample_count, 400);
    }
}

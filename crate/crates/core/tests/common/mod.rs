#![allow(dead_code)]

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use introspect_core::dataset::{Dataset, SyntheticConfig};
use introspect_core::experiment::{DatasetSource, ExperimentConfig};
use introspect_core::model::{init_model, Mlp, MlpModel, TrainConfig};
use introspect_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scales: &[f64]) -> Matrix {
    let data = (0..rows * cols).map(|i| (normal(rng) * scales[i % cols]) as f32).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// He-initialized network with nonzero random biases, in f64.
pub fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> Mlp<f64> {
    let mut m = init_model(dims, rng.random()).unwrap().cast::<f64>();
    for b in m.biases.iter_mut().flatten() {
        *b = 0.3 * normal(rng);
    }
    m
}

/// Scalar f64 forward pass, independent of the library's GEMM path.
pub fn oracle_logits(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = m.weights.len() - 1;
    for l in 0..m.weights.len() {
        let (n_in, n_out) = (m.layer_dims[l], m.layer_dims[l + 1]);
        a = (0..n_out)
            .map(|o| {
                let z = m.biases[l][o] + (0..n_in).map(|i| m.weights[l][o * n_in + i] * a[i]).sum::<f64>();
                if l == last { z } else { z.max(0.0) }
            })
            .collect();
    }
    a
}

pub fn synthetic_splits() -> (Dataset, Dataset) {
    DatasetSource::Synthetic {
        config: SyntheticConfig::default(),
        test_fraction: 0.2,
    }
    .load()
    .unwrap()
}

/// A small network trained once on the default synthetic splits.
pub fn trained_synthetic() -> &'static (MlpModel, Dataset, Dataset) {
    static CELL: OnceLock<(MlpModel, Dataset, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train, test) = synthetic_splits();
        let cfg = ExperimentConfig {
            hidden_layers: vec![32, 16],
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let (model, _) = introspect_core::experiment::train_model(&train, &test, &cfg).unwrap();
        (model, train, test)
    })
}

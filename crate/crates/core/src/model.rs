//! Dense ReLU classifier: initialization, forward pass with activation
//! capture, mini-batch SGD with momentum, prediction and serialization.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::real::{gemm, Operand, Real};

pub const MODEL_MAGIC: &[u8; 8] = b"INTRMLP\0";
pub const MODEL_VERSION: u32 = 1;

/// Layer widths of the MNIST classifier.
pub const MNIST_LAYERS: [usize; 5] = [784, 128, 128, 64, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub epochs: usize,
    pub final_train_loss: Option<f32>,
    pub test_accuracy: Option<f32>,
    pub dataset: Option<String>,
    pub num_classes: Option<usize>,
    pub train_config: Option<TrainConfig>,
}

/// Multi-layer perceptron with ReLU hidden layers and softmax output.
///
/// `weights[l]` is row-major `(layer_dims[l+1], layer_dims[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub seed: u64,
    pub metadata: ModelMetadata,
}

pub type MlpModel = Mlp<f32>;

/// Every intermediate value of one forward pass.
///
/// `pre_activations[l]` is the affine output of weight layer `l`;
/// `post_activations` has one entry per element of `layer_dims`, starting
/// with the input and ending with the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T: Real = f32> {
    pub pre_activations: Vec<Vec<T>>,
    pub post_activations: Vec<Vec<T>>,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<MlpModel> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid("a model needs at least an input and an output layer"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid("layer widths must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::invalid(e.to_string()))?;
        weights.push((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(Mlp {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        seed,
        metadata: ModelMetadata::default(),
    })
}

pub(crate) fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Mlp<T> {
    pub fn num_weight_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Converts parameters to another element type.
    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Mlp {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(conv).collect(),
            biases: self.biases.iter().map(conv).collect(),
            seed: self.seed,
            metadata: self.metadata.clone(),
        }
    }

    /// Affine output of weight layer `l` for input `a`.
    pub(crate) fn affine(&self, l: usize, a: &[T]) -> Vec<T> {
        let n_in = self.layer_dims[l];
        self.weights[l]
            .chunks_exact(n_in)
            .zip(&self.biases[l])
            .map(|(row, &b)| row.iter().zip(a).map(|(&w, &x)| w * x).sum::<T>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        check_dim(self.input_dim(), x.len())?;
        let last = self.num_weight_layers() - 1;
        let mut pre = Vec::with_capacity(last + 1);
        let mut post = Vec::with_capacity(last + 2);
        post.push(x.to_vec());
        for l in 0..=last {
            let z = self.affine(l, post.last().expect("input pushed"));
            let a = if l < last {
                z.iter().map(|&v| v.max(T::zero())).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        let logits = post.last().expect("output layer").clone();
        let probabilities = softmax(&logits);
        Ok(ForwardTrace {
            pre_activations: pre,
            post_activations: post,
            logits,
            probabilities,
        })
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim(self.input_dim(), x.len())?;
        let last = self.num_weight_layers() - 1;
        let mut a = x.to_vec();
        for l in 0..=last {
            a = self.affine(l, &a);
            if l < last {
                a.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        Ok(a)
    }

    /// Post-ReLU activation of the last hidden layer.
    pub fn penultimate(&self, x: &[T]) -> Result<Vec<T>> {
        let mut trace = self.forward(x)?;
        let n = trace.post_activations.len();
        Ok(trace.post_activations.swap_remove(n - 2))
    }

    /// Activations of every layer for a row-major batch of `n` inputs.
    fn forward_batch(&self, x: &[T], n: usize) -> Vec<Vec<T>> {
        let last = self.num_weight_layers() - 1;
        let mut acts = Vec::with_capacity(last + 2);
        acts.push(x.to_vec());
        for l in 0..=last {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut z = Vec::with_capacity(n * n_out);
            for _ in 0..n {
                z.extend_from_slice(&self.biases[l]);
            }
            gemm(
                T::one(),
                Operand::new(&acts[l], n, n_in),
                Operand::new(&self.weights[l], n_out, n_in).t(),
                T::one(),
                &mut z,
            );
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean softmax cross-entropy of a batch and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &[T], labels: &[u16]) -> Result<(T, Gradients<T>)> {
        let n = labels.len();
        let d = self.input_dim();
        check_dim(n * d, x.len())?;
        let k = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::UnknownLabel(bad));
        }
        let acts = self.forward_batch(x, n);
        let logits = acts.last().expect("output layer");
        let inv_n = T::one() / T::from_f64(n.max(1) as f64);

        let mut delta = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let z = &logits[i * k..(i + 1) * k];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            let y = labels[i] as usize;
            loss = loss + (log_sum - z[y]);
            for c in 0..k {
                let p = (z[c] - log_sum).exp();
                let target = if c == y { T::one() } else { T::zero() };
                delta[i * k + c] = (p - target) * inv_n;
            }
        }
        loss = loss * inv_n;

        let layers = self.num_weight_layers();
        let mut gw = vec![Vec::new(); layers];
        let mut gb = vec![Vec::new(); layers];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut w_grad = vec![T::zero(); n_out * n_in];
            gemm(
                T::one(),
                Operand::new(&delta, n, n_out).t(),
                Operand::new(&acts[l], n, n_in),
                T::zero(),
                &mut w_grad,
            );
            let mut b_grad = vec![T::zero(); n_out];
            for row in delta.chunks_exact(n_out) {
                for (g, &v) in b_grad.iter_mut().zip(row) {
                    *g = *g + v;
                }
            }
            gw[l] = w_grad;
            gb[l] = b_grad;
            if l > 0 {
                let mut prev = vec![T::zero(); n * n_in];
                gemm(
                    T::one(),
                    Operand::new(&delta, n, n_out),
                    Operand::new(&self.weights[l], n_out, n_in),
                    T::zero(),
                    &mut prev,
                );
                for (g, &a) in prev.iter_mut().zip(&acts[l]) {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                }
                delta = prev;
            }
        }
        Ok((
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
        ))
    }
}

impl MlpModel {
    /// Predicted labels (argmax, lowest index on ties) and class probabilities.
    pub fn predict(&self, instances: &Matrix) -> Result<(Vec<u16>, Matrix)> {
        check_dim(self.input_dim(), instances.cols())?;
        const CHUNK: usize = 256;
        let n = instances.rows();
        let k = self.output_dim();
        let mut labels = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * k);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let x = &instances.as_slice()[start * instances.cols()..end * instances.cols()];
            let acts = self.forward_batch(x, end - start);
            for z in acts.last().expect("output layer").chunks_exact(k) {
                let p = softmax(z);
                labels.push(argmax(&p) as u16);
                probs.extend(p);
            }
        }
        Ok((labels, Matrix::from_vec(n, k, probs)?))
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f32> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let (pred, _) = self.predict(&ds.instances)?;
        let correct = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f32 / ds.len() as f32)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * self.num_parameters());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = FileMetadata {
            seed: self.seed,
            metadata: self.metadata.clone(),
        };
        out.extend_from_slice(serde_json::to_string(&meta)?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let n_layers = r.u32()? as usize;
        if !(2..=1024).contains(&n_layers) {
            return Err(Error::ModelFormat(format!("implausible layer count {n_layers}")));
        }
        let mut layer_dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(Error::ModelFormat("zero-width layer".into()));
            }
            layer_dims.push(d);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            weights.push(r.f32s(w[0] * w[1])?);
            biases.push(r.f32s(w[1])?);
        }
        let tail = std::str::from_utf8(&bytes[r.pos..])
            .map_err(|_| Error::ModelFormat("metadata is not UTF-8".into()))?;
        let meta: FileMetadata = serde_json::from_str(tail)
            .map_err(|e| Error::ModelFormat(format!("corrupt metadata: {e}")))?;
        Ok(Mlp {
            layer_dims,
            weights,
            biases,
            seed: meta.seed,
            metadata: meta.metadata,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FileMetadata {
    seed: u64,
    metadata: ModelMetadata,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::ModelFormat(format!("truncated file at byte {}", self.bytes.len()))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::ModelFormat("parameter block size overflows".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MlpModel::from_bytes(&bytes)
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Returns the trained model and the mean training loss of every epoch.
/// Batch order is drawn from `cfg.seed`, so identical inputs give identical
/// parameters.
pub fn train(model: &MlpModel, data: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, Vec<f32>)> {
    cfg.validate()?;
    check_dim(model.input_dim(), data.dims())?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y as usize >= model.output_dim()) {
        return Err(Error::UnknownLabel(bad));
    }

    let mut model = model.clone();
    let mut vel_w: Vec<Vec<f32>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut vel_b: Vec<Vec<f32>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let d = data.dims();
    let mut batch_x = Vec::with_capacity(cfg.batch_size * d);
    let mut batch_y = Vec::with_capacity(cfg.batch_size);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(data.instances.row(i));
                batch_y.push(data.labels[i]);
            }
            let (loss, grads) = model.loss_and_gradients(&batch_x, &batch_y)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            epoch_loss += loss as f64 * chunk.len() as f64;
            for l in 0..model.weights.len() {
                sgd_step(&mut model.weights[l], &mut vel_w[l], &grads.weights[l], lr, mu);
                sgd_step(&mut model.biases[l], &mut vel_b[l], &grads.biases[l], lr, mu);
            }
        }
        curve.push((epoch_loss / data.len() as f64) as f32);
    }

    model.metadata.epochs += cfg.epochs;
    model.metadata.final_train_loss = curve.last().copied();
    model.metadata.dataset = Some(data.name.clone());
    model.metadata.num_classes = Some(data.num_classes);
    model.metadata.train_config = Some(cfg.clone());
    Ok((model, curve))
}

fn sgd_step(param: &mut [f32], vel: &mut [f32], grad: &[f32], lr: f32, mu: f32) {
    for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

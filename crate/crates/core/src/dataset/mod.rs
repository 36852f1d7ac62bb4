//! Labeled datasets, MNIST loading, the synthetic blob testbed and class
//! bridging (merging two labels to manufacture a known latent subclass).

pub mod idx;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use idx::{load_idx, IdxTensor};

/// A labeled instance matrix.
///
/// `labels` are the current (possibly bridged, always compacted) classes;
/// `original_labels` are the labels the data was loaded with and never change.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub instances: Matrix,
    pub labels: Vec<u16>,
    pub original_labels: Vec<u16>,
    pub num_classes: usize,
    pub feature_shape: Vec<usize>,
    /// Original label values merged into each current class.
    pub class_members: Vec<Vec<u16>>,
    /// Multiplier that restores the stored instances to their raw units
    /// (255 for MNIST pixels, 1 for synthetic data).
    pub raw_scale: f32,
}

/// Merge `absorb_label` into `keep_label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub keep_label: u16,
    pub absorb_label: u16,
}

impl BridgeSpec {
    pub fn new(keep_label: u16, absorb_label: u16) -> Self {
        BridgeSpec {
            keep_label,
            absorb_label,
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.keep_label == self.absorb_label
    }
}

/// Result of a bridge: the relabeled dataset and the old→new label mapping.
#[derive(Debug, Clone)]
pub struct Bridged {
    pub dataset: Dataset,
    pub label_map: BTreeMap<u16, u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dims: usize,
    pub per_class_count: usize,
    pub centroid_scale: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            dims: 20,
            per_class_count: 200,
            centroid_scale: 10.0,
            noise_sigma: 0.5,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return Err(Error::invalid("num_classes must be in 1..=65535"));
        }
        if self.dims == 0 {
            return Err(Error::invalid("dims must be at least 1"));
        }
        if self.per_class_count == 0 {
            return Err(Error::invalid("per_class_count must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if !self.centroid_scale.is_finite() {
            return Err(Error::invalid("centroid_scale must be finite"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SyntheticConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Dataset {
    /// Builds a dataset whose current labels equal its original labels.
    pub fn new(
        name: impl Into<String>,
        instances: Matrix,
        labels: Vec<u16>,
        feature_shape: Vec<usize>,
    ) -> Result<Self> {
        if labels.len() != instances.rows() {
            return Err(Error::CountMismatch(format!(
                "{} labels for {} instances",
                labels.len(),
                instances.rows()
            )));
        }
        let d: usize = feature_shape.iter().product();
        if d != instances.cols() {
            return Err(Error::invalid(format!(
                "feature shape {feature_shape:?} has {d} features but instances have {}",
                instances.cols()
            )));
        }
        let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let class_members = (0..num_classes).map(|c| vec![c as u16]).collect();
        Ok(Dataset {
            name: name.into(),
            instances,
            original_labels: labels.clone(),
            labels,
            num_classes,
            feature_shape,
            class_members,
            raw_scale: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.instances.cols()
    }

    /// Instances in raw units (e.g. 0–255 pixel intensities).
    pub fn raw_instances(&self) -> Matrix {
        if self.raw_scale == 1.0 {
            self.instances.clone()
        } else {
            let s = self.raw_scale;
            self.instances.map(|v| v * s)
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Dataset restricted to `indices`, in that order. Class numbering is kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            instances: self.instances.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            original_labels: indices.iter().map(|&i| self.original_labels[i]).collect(),
            num_classes: self.num_classes,
            feature_shape: self.feature_shape.clone(),
            class_members: self.class_members.clone(),
            raw_scale: self.raw_scale,
        }
    }

    /// Rows of `self` followed by rows of `other`; both must share classes and shape.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        if self.feature_shape != other.feature_shape
            || self.class_members != other.class_members
            || self.raw_scale != other.raw_scale
        {
            return Err(Error::invalid(format!(
                "cannot concatenate `{}` and `{}`: classes or feature shapes differ",
                self.name, other.name
            )));
        }
        let mut data = self.instances.as_slice().to_vec();
        data.extend_from_slice(other.instances.as_slice());
        Ok(Dataset {
            name: name.into(),
            instances: Matrix::from_vec(self.len() + other.len(), self.dims(), data)?,
            labels: [&self.labels[..], &other.labels[..]].concat(),
            original_labels: [&self.original_labels[..], &other.original_labels[..]].concat(),
            num_classes: self.num_classes,
            feature_shape: self.feature_shape.clone(),
            class_members: self.class_members.clone(),
            raw_scale: self.raw_scale,
        })
    }

    /// A seeded random subset of `n` instances (all of them if `n >= len`),
    /// kept in ascending source order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if n < idx.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
        }
        self.subset(&idx)
    }

    /// Seeded split into (train, test); `test_fraction` of each class goes to test.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid("test_fraction must be in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] as usize == c)
                .collect();
            members.shuffle(&mut rng);
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn validate(&self) -> Result<()> {
        let d: usize = self.feature_shape.iter().product();
        if d != self.dims() {
            return Err(Error::invalid("feature_shape does not match instance width"));
        }
        if self.labels.len() != self.len() || self.original_labels.len() != self.len() {
            return Err(Error::CountMismatch("label vectors differ from instance count".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(())
    }
}

const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
];

fn find_mnist_file(dir: &Path, names: (&str, &str)) -> Result<PathBuf> {
    for base in [names.0, names.1] {
        for candidate in [base.to_string(), format!("{base}.gz")] {
            let p = dir.join(candidate);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::MissingFile(dir.join(names.0)))
}

/// Loads the canonical MNIST train and test splits from `dir`.
///
/// Pixels are scaled into [0, 1]; `raw_scale` is 255.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths = Vec::with_capacity(4);
    for names in MNIST_FILES {
        paths.push(find_mnist_file(dir, names)?);
    }
    let train = mnist_split("mnist-train", &paths[0], &paths[1])?;
    let test = mnist_split("mnist-test", &paths[2], &paths[3])?;
    Ok((train, test))
}

fn mnist_split(name: &str, images: &Path, labels: &Path) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(Error::Idx {
            offset: 3,
            reason: format!("{} is not a 3-d image tensor", images.display()),
        });
    }
    if lab.dims.len() != 1 {
        return Err(Error::Idx {
            offset: 3,
            reason: format!("{} is not a 1-d label tensor", labels.display()),
        });
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::CountMismatch(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            img.dims[0],
            labels.display(),
            lab.dims[0]
        )));
    }
    let shape = vec![img.dims[1], img.dims[2]];
    let d = shape[0] * shape[1];
    let pixels: Vec<f32> = img.data.iter().map(|&b| b as f32 / 255.0).collect();
    let instances = Matrix::from_vec(img.dims[0], d, pixels)?;
    let labels: Vec<u16> = lab.data.iter().map(|&b| b as u16).collect();
    let mut ds = Dataset::new(name, instances, labels, shape)?;
    ds.raw_scale = 255.0;
    Ok(ds)
}

/// Merges `spec.absorb_label` into `spec.keep_label` and compacts labels to
/// `0..K-1`, preserving the relative order of the surviving label values.
pub fn apply_bridge(ds: &Dataset, spec: BridgeSpec) -> Result<Bridged> {
    for l in [spec.keep_label, spec.absorb_label] {
        if l as usize >= ds.num_classes {
            return Err(Error::UnknownLabel(l));
        }
    }
    let surviving: Vec<u16> = (0..ds.num_classes as u16)
        .filter(|&l| spec.is_trivial() || l != spec.absorb_label)
        .collect();
    let mut label_map = BTreeMap::new();
    for (new, &old) in surviving.iter().enumerate() {
        label_map.insert(old, new as u16);
    }
    if !spec.is_trivial() {
        let target = label_map[&spec.keep_label];
        label_map.insert(spec.absorb_label, target);
    }

    let mut class_members = vec![Vec::new(); surviving.len()];
    for (old, members) in ds.class_members.iter().enumerate() {
        class_members[label_map[&(old as u16)] as usize].extend_from_slice(members);
    }
    for m in &mut class_members {
        m.sort_unstable();
    }

    let mut name = ds.name.clone();
    if !spec.is_trivial() {
        name = format!("{name}+bridge{}-{}", spec.keep_label, spec.absorb_label);
    }
    let dataset = Dataset {
        name,
        instances: ds.instances.clone(),
        labels: ds.labels.iter().map(|l| label_map[l]).collect(),
        original_labels: ds.original_labels.clone(),
        num_classes: surviving.len(),
        feature_shape: ds.feature_shape.clone(),
        class_members,
        raw_scale: ds.raw_scale,
    };
    Ok(Bridged { dataset, label_map })
}

/// Gaussian blobs: class `c` is `centroid_c + N(0, noise_sigma²)` per feature.
/// Instances are interleaved by class (instance `i` has class `i % K`).
///
/// Like MNIST pixels, instances are stored divided by `raw_scale`
/// (here `|centroid_scale|`, or 1 when that is 0) so the network sees
/// unit-scale inputs; [`Dataset::raw_instances`] gives the original units.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let (centroids, mut rng) = draw_centroids(cfg)?;
    let n = cfg.num_classes * cfg.per_class_count;
    let scale = synthetic_scale(cfg);
    let mut data = Vec::with_capacity(n * cfg.dims);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for i in 0..n {
        let c = i % cfg.num_classes;
        for &mu in &centroids[c] {
            let v = if cfg.noise_sigma == 0.0 {
                mu
            } else {
                mu + noise.sample(&mut rng)
            };
            data.push(v / scale);
        }
        labels.push(c as u16);
    }
    let instances = Matrix::from_vec(n, cfg.dims, data)?;
    let mut ds = Dataset::new(
        format!("synthetic-k{}-d{}-s{}", cfg.num_classes, cfg.dims, cfg.seed),
        instances,
        labels,
        vec![cfg.dims],
    )?;
    ds.raw_scale = scale;
    Ok(ds)
}

fn synthetic_scale(cfg: &SyntheticConfig) -> f32 {
    if cfg.centroid_scale == 0.0 {
        1.0
    } else {
        cfg.centroid_scale.abs()
    }
}

fn draw_centroids(cfg: &SyntheticConfig) -> Result<(Vec<Vec<f32>>, ChaCha8Rng)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.dims)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * cfg.centroid_scale
                })
                .collect()
        })
        .collect();
    Ok((centroids, rng))
}

/// Class centroids that [`make_synthetic`] draws for `cfg`, in raw units.
pub fn synthetic_centroids(cfg: &SyntheticConfig) -> Result<Matrix> {
    let (centroids, _) = draw_centroids(cfg)?;
    Matrix::from_rows(&centroids)
}

//! Per-instance feature attributions.
//!
//! Every attribution decomposes the pre-softmax logit of one label. DeepLIFT
//! uses the linear rule on dense layers and the rescale rule on ReLUs, so its
//! attributions sum to `logit(x) - logit(reference)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::model::{argmax, Mlp, MlpModel};
use crate::real::Real;

/// Below this |Δpre-activation| the rescale multiplier falls back to the gradient.
pub const RESCALE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Gradient,
    GradXInput,
    #[serde(rename = "deeplift")]
    DeepLift,
    Loo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Gradient => "gradient",
            Method::GradXInput => "grad_x_input",
            Method::DeepLift => "deeplift",
            Method::Loo => "loo",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Method::Linear),
            "gradient" => Ok(Method::Gradient),
            "gradxinput" | "grad_x_input" | "grad-x-input" => Ok(Method::GradXInput),
            "deeplift" => Ok(Method::DeepLift),
            "loo" => Ok(Method::Loo),
            other => Err(Error::invalid(format!("unknown explanation method `{other}`"))),
        }
    }
}

/// The scalar being decomposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionTarget {
    #[default]
    PredictedLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Mean of the training instances.
    #[default]
    Mean,
    Zero,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ReferenceMode::Mean),
            "zero" => Ok(ReferenceMode::Zero),
            other => Err(Error::invalid(format!("unknown reference mode `{other}`"))),
        }
    }
}

impl ReferenceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceMode::Mean => "mean",
            ReferenceMode::Zero => "zero",
        }
    }

    /// Resolves the reference vector from the instances it should summarize.
    pub fn resolve(&self, instances: &Matrix) -> Vec<f32> {
        match self {
            ReferenceMode::Zero => vec![0.0; instances.cols()],
            ReferenceMode::Mean => column_mean(instances),
        }
    }
}

pub(crate) fn column_mean(m: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = m.rows().max(1) as f64;
    acc.into_iter().map(|v| (v / n) as f32).collect()
}

/// Partition of the feature indices into occlusion segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SegmentationGrid {
    /// Rectangular patches over an `height x width` image (row-major features).
    Patches {
        height: usize,
        width: usize,
        patch_h: usize,
        patch_w: usize,
    },
    /// Consecutive runs of `segment_size` features.
    Runs { dims: usize, segment_size: usize },
}

impl SegmentationGrid {
    /// 4x4 patches for 2-d feature shapes, runs of 4 otherwise.
    pub fn default_for(feature_shape: &[usize]) -> Self {
        match feature_shape {
            [h, w] => SegmentationGrid::Patches {
                height: *h,
                width: *w,
                patch_h: 4,
                patch_w: 4,
            },
            other => SegmentationGrid::Runs {
                dims: other.iter().product(),
                segment_size: 4,
            },
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            SegmentationGrid::Patches { height, width, .. } => height * width,
            SegmentationGrid::Runs { dims, .. } => *dims,
        }
    }

    pub fn segments(&self) -> Result<Vec<Vec<usize>>> {
        match *self {
            SegmentationGrid::Patches {
                height,
                width,
                patch_h,
                patch_w,
            } => {
                if patch_h == 0 || patch_w == 0 {
                    return Err(Error::invalid("patch size must be positive"));
                }
                let mut segs = Vec::new();
                for r0 in (0..height).step_by(patch_h) {
                    for c0 in (0..width).step_by(patch_w) {
                        let mut seg = Vec::with_capacity(patch_h * patch_w);
                        for r in r0..(r0 + patch_h).min(height) {
                            for c in c0..(c0 + patch_w).min(width) {
                                seg.push(r * width + c);
                            }
                        }
                        segs.push(seg);
                    }
                }
                Ok(segs)
            }
            SegmentationGrid::Runs { dims, segment_size } => {
                if segment_size == 0 {
                    return Err(Error::invalid("segment size must be positive"));
                }
                Ok((0..dims)
                    .step_by(segment_size)
                    .map(|s| (s..(s + segment_size).min(dims)).collect())
                    .collect())
            }
        }
    }
}

/// Per-feature contribution of a linear (or logistic) model's score: `w[label] ⊙ x`.
pub fn explain_linear(weights: &Matrix, biases: &[f32], x: &[f32], label: usize) -> Result<Vec<f32>> {
    check_dim(weights.rows(), biases.len())?;
    check_dim(weights.cols(), x.len())?;
    if label >= weights.rows() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            weights.rows()
        )));
    }
    Ok(weights.row(label).iter().zip(x).map(|(w, v)| w * v).collect())
}

fn check_label<T: Real>(model: &Mlp<T>, label: usize) -> Result<()> {
    if label >= model.output_dim() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} outputs",
            model.output_dim()
        )));
    }
    Ok(())
}

/// Backpropagates a multiplier vector on the logits down to the input.
///
/// `relu_factor(l, j)` is the factor applied at hidden unit `j` of weight
/// layer `l`: the ReLU derivative for gradients, the rescale ratio for DeepLIFT.
fn backpropagate<T: Real>(
    model: &Mlp<T>,
    label: usize,
    mut relu_factor: impl FnMut(usize, usize) -> T,
) -> Vec<T> {
    let layers = model.num_weight_layers();
    let mut m = vec![T::zero(); model.output_dim()];
    m[label] = T::one();
    for l in (0..layers).rev() {
        if l < layers - 1 {
            for (j, v) in m.iter_mut().enumerate() {
                *v = *v * relu_factor(l, j);
            }
        }
        let n_in = model.layer_dims[l];
        let mut prev = vec![T::zero(); n_in];
        for (row, &mj) in model.weights[l].chunks_exact(n_in).zip(&m) {
            if mj == T::zero() {
                continue;
            }
            for (p, &w) in prev.iter_mut().zip(row) {
                *p = *p + w * mj;
            }
        }
        m = prev;
    }
    m
}

/// Gradient of the `label` logit with respect to the input. The ReLU
/// derivative at exactly zero is taken as zero.
pub fn explain_gradient<T: Real>(model: &Mlp<T>, x: &[T], label: usize) -> Result<Vec<T>> {
    check_label(model, label)?;
    let trace = model.forward(x)?;
    Ok(backpropagate(model, label, |l, j| {
        if trace.pre_activations[l][j] > T::zero() {
            T::one()
        } else {
            T::zero()
        }
    }))
}

pub fn explain_grad_x_input<T: Real>(model: &Mlp<T>, x: &[T], label: usize) -> Result<Vec<T>> {
    let g = explain_gradient(model, x, label)?;
    Ok(g.into_iter().zip(x).map(|(g, &v)| g * v).collect())
}

/// DeepLIFT attributions of the `label` logit relative to `reference`.
pub fn explain_deeplift<T: Real>(
    model: &Mlp<T>,
    x: &[T],
    reference: &[T],
    label: usize,
) -> Result<Vec<T>> {
    check_label(model, label)?;
    check_dim(x.len(), reference.len())?;
    if let Some(i) = reference.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "deeplift reference".into(),
            index: i,
        });
    }
    let actual = model.forward(x)?;
    let baseline = model.forward(reference)?;
    deeplift_from_traces(model, x, reference, &actual, &baseline, label)
}

fn deeplift_from_traces<T: Real>(
    model: &Mlp<T>,
    x: &[T],
    reference: &[T],
    actual: &crate::model::ForwardTrace<T>,
    baseline: &crate::model::ForwardTrace<T>,
    label: usize,
) -> Result<Vec<T>> {
    for (l, z) in actual.pre_activations.iter().enumerate() {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "deeplift forward".into(),
                index: l,
            });
        }
    }
    let eps = T::from_f64(RESCALE_EPSILON);
    let multipliers = backpropagate(model, label, |l, j| {
        let z = actual.pre_activations[l][j];
        let dz = z - baseline.pre_activations[l][j];
        if dz.abs() < eps {
            if z > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        } else {
            let da = z.max(T::zero()) - baseline.pre_activations[l][j].max(T::zero());
            da / dz
        }
    });
    let out: Vec<T> = multipliers
        .into_iter()
        .zip(x.iter().zip(reference))
        .map(|(m, (&a, &r))| m * (a - r))
        .collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "deeplift attribution".into(),
            index: i,
        });
    }
    Ok(out)
}

/// Leave-one-out occlusion: each feature gets the drop in the `label` logit
/// caused by zeroing its whole segment.
pub fn explain_loo<T: Real>(
    model: &Mlp<T>,
    x: &[T],
    label: usize,
    seg: &SegmentationGrid,
) -> Result<Vec<T>> {
    check_label(model, label)?;
    check_dim(model.input_dim(), seg.dims())?;
    let segments = seg.segments()?;
    let base = model.logits(x)?[label];
    let mut out = vec![T::zero(); x.len()];
    let mut occluded = x.to_vec();
    for s in &segments {
        for &j in s {
            occluded[j] = T::zero();
        }
        let importance = base - model.logits(&occluded)?[label];
        for &j in s {
            out[j] = importance;
            occluded[j] = x[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub method: Method,
    /// DeepLIFT reference vector; required for [`Method::DeepLift`].
    pub reference: Option<Vec<f32>>,
    /// Occlusion segmentation; defaults from the dataset's feature shape.
    pub segmentation: Option<SegmentationGrid>,
    /// Also materialize attributions for every label.
    pub all_labels: bool,
}

impl ExplainOptions {
    pub fn new(method: Method) -> Self {
        ExplainOptions {
            method,
            reference: None,
            segmentation: None,
            all_labels: false,
        }
    }
}

/// Attributions for a whole dataset, one row per instance, each explaining
/// that instance's predicted label.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationSet {
    pub method: Method,
    pub target: AttributionTarget,
    pub saliencies: Matrix,
    /// Row-major `N x C x D` when requested.
    pub full_saliencies: Option<Vec<f32>>,
    pub num_labels: usize,
    pub predicted_labels: Vec<u16>,
    pub reference: Option<Vec<f32>>,
    pub instance_ids: Vec<usize>,
    /// Largest |saliency| seen for each feature.
    pub max_abs: Vec<f32>,
}

impl ExplanationSet {
    pub fn len(&self) -> usize {
        self.saliencies.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attribution of instance `i` for `label`, if the full tensor exists.
    pub fn full_row(&self, i: usize, label: usize) -> Option<&[f32]> {
        let d = self.saliencies.cols();
        let start = (i * self.num_labels + label) * d;
        self.full_saliencies.as_ref().map(|f| &f[start..start + d])
    }
}

fn explain_one(model: &MlpModel, x: &[f32], label: usize, opts: &ExplainOptions, seg: &SegmentationGrid) -> Result<Vec<f32>> {
    match opts.method {
        Method::Linear => {
            let w = Matrix::from_vec(model.output_dim(), model.input_dim(), model.weights[0].clone())?;
            explain_linear(&w, &model.biases[0], x, label)
        }
        Method::Gradient => explain_gradient(model, x, label),
        Method::GradXInput => explain_grad_x_input(model, x, label),
        Method::DeepLift => {
            let r = opts
                .reference
                .as_deref()
                .ok_or_else(|| Error::invalid("deeplift needs a reference vector"))?;
            explain_deeplift(model, x, r, label)
        }
        Method::Loo => explain_loo(model, x, label, seg),
    }
}

pub fn explain_dataset(model: &MlpModel, ds: &Dataset, opts: &ExplainOptions) -> Result<ExplanationSet> {
    check_dim(model.input_dim(), ds.dims())?;
    if opts.method == Method::Linear && model.num_weight_layers() != 1 {
        return Err(Error::invalid(
            "linear explanations need a single-layer (linear) model",
        ));
    }
    if let Some(r) = &opts.reference {
        check_dim(ds.dims(), r.len())?;
    } else if opts.method == Method::DeepLift {
        return Err(Error::invalid("deeplift needs a reference vector"));
    }
    let seg = opts
        .segmentation
        .clone()
        .unwrap_or_else(|| SegmentationGrid::default_for(&ds.feature_shape));
    let k = model.output_dim();
    let d = ds.dims();

    let rows: Vec<Result<(u16, Vec<f32>, Option<Vec<f32>>)>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.instances.row(i);
            let pred = argmax(&model.logits(x)?);
            if opts.all_labels {
                let mut full = Vec::with_capacity(k * d);
                for label in 0..k {
                    full.extend(explain_one(model, x, label, opts, &seg)?);
                }
                let own = full[pred * d..(pred + 1) * d].to_vec();
                Ok((pred as u16, own, Some(full)))
            } else {
                Ok((pred as u16, explain_one(model, x, pred, opts, &seg)?, None))
            }
        })
        .collect();

    let mut predicted = Vec::with_capacity(ds.len());
    let mut data = Vec::with_capacity(ds.len() * d);
    let mut full = opts.all_labels.then(|| Vec::with_capacity(ds.len() * k * d));
    let mut max_abs = vec![0.0f32; d];
    for (i, row) in rows.into_iter().enumerate() {
        let (pred, sal, full_row) = row?;
        if let Some(j) = sal.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("{} explanation of instance {i}", opts.method),
                index: j,
            });
        }
        for (m, &v) in max_abs.iter_mut().zip(&sal) {
            *m = m.max(v.abs());
        }
        predicted.push(pred);
        data.extend(sal);
        if let (Some(f), Some(r)) = (full.as_mut(), full_row) {
            f.extend(r);
        }
    }
    Ok(ExplanationSet {
        method: opts.method,
        target: AttributionTarget::PredictedLogit,
        saliencies: Matrix::from_vec(ds.len(), d, data)?,
        full_saliencies: full,
        num_labels: k,
        predicted_labels: predicted,
        reference: opts.reference.clone(),
        instance_ids: (0..ds.len()).collect(),
        max_abs,
    })
}

//! Class introspection: group instances by class, cluster their projected
//! explanation (or raw) vectors per class, and score how fragmented each
//! class is. Several large clusters inside one class point at a latent
//! subclass.

use serde::{Deserialize, Serialize};

use crate::cluster::{check_points, dbscan, ClusterParams, NOISE};
use crate::dataset::{BridgeSpec, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::explain::{explain_dataset, ExplainOptions, ExplanationSet, Method, ReferenceMode};
use crate::matrix::Matrix;
use crate::model::MlpModel;
use crate::reduce::{fit_pca, project, winsorize, PcaModel, WINSORIZE_PERCENTILE};

/// When a class counts as fragmented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagThresholds {
    /// Minimum (second-largest / largest) non-noise cluster size ratio.
    pub min_ratio: f64,
    /// Minimum size of the second-largest non-noise cluster.
    pub min_second: usize,
}

impl Default for FlagThresholds {
    fn default() -> Self {
        FlagThresholds {
            min_ratio: 0.25,
            min_second: 10,
        }
    }
}

/// How instances are assigned to the classes being introspected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PredictedLabel,
    TrueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFragmentation {
    pub class: u16,
    /// Number of instances grouped into this class.
    pub count: usize,
    /// Size of each non-noise cluster, indexed by cluster id.
    pub cluster_histogram: Vec<usize>,
    pub noise_count: usize,
    pub fragmentation_score: f64,
    pub within_class_variance: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub pca_k: usize,
    pub eps: f64,
    pub min_pts: usize,
    /// `None` for raw-data baselines.
    pub method: Option<Method>,
    pub winsorize: bool,
    pub grouping: Grouping,
    pub thresholds: FlagThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub dataset: String,
    pub bridge: Option<BridgeSpec>,
    pub model: Option<String>,
    pub params: ReportParams,
    pub classes: Vec<ClassFragmentation>,
}

impl FragmentationReport {
    pub fn flagged_classes(&self) -> Vec<u16> {
        self.classes
            .iter()
            .filter(|c| c.flagged)
            .map(|c| c.class)
            .collect()
    }

    pub fn total_noise(&self) -> usize {
        self.classes.iter().map(|c| c.noise_count).sum()
    }

    pub fn total_count(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }
}

/// Second-largest over largest non-noise cluster size; 0 with fewer than two clusters.
pub fn fragmentation_score(histogram: &[usize]) -> f64 {
    let (first, second) = top_two(histogram);
    if second == 0 || first == 0 {
        0.0
    } else {
        second as f64 / first as f64
    }
}

fn top_two(histogram: &[usize]) -> (usize, usize) {
    let mut sorted: Vec<usize> = histogram.iter().copied().filter(|&s| s > 0).collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    (
        sorted.first().copied().unwrap_or(0),
        sorted.get(1).copied().unwrap_or(0),
    )
}

pub fn is_flagged(histogram: &[usize], t: &FlagThresholds) -> bool {
    let (_, second) = top_two(histogram);
    fragmentation_score(histogram) >= t.min_ratio && second >= t.min_second
}

/// Trace of each class's covariance over its rows of `projections`
/// (`N - 1` normalization; 0 for classes with fewer than two rows).
pub fn class_variance(projections: &Matrix, class_of: &[u16], num_classes: usize) -> Result<Vec<f64>> {
    check_dim(projections.rows(), class_of.len())?;
    let k = projections.cols();
    let mut count = vec![0usize; num_classes];
    let mut sum = vec![vec![0.0f64; k]; num_classes];
    for (row, &c) in projections.iter_rows().zip(class_of) {
        let c = c as usize;
        if c >= num_classes {
            return Err(Error::UnknownLabel(c as u16));
        }
        count[c] += 1;
        for (s, &v) in sum[c].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let means: Vec<Vec<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let mut ss = vec![0.0f64; num_classes];
    for (row, &c) in projections.iter_rows().zip(class_of) {
        let c = c as usize;
        ss[c] += row
            .iter()
            .zip(&means[c])
            .map(|(&v, m)| (v as f64 - m).powi(2))
            .sum::<f64>();
    }
    Ok(ss
        .into_iter()
        .zip(count)
        .map(|(s, n)| if n < 2 { 0.0 } else { s / (n - 1) as f64 })
        .collect())
}

/// Per-class DBSCAN over `projections` grouped by `groups`.
///
/// Returns the per-class summaries and each instance's cluster id within its
/// class (`-1` for noise).
pub fn cluster_by_class(
    projections: &Matrix,
    groups: &[u16],
    num_classes: usize,
    params: ClusterParams,
    thresholds: &FlagThresholds,
) -> Result<(Vec<ClassFragmentation>, Vec<i32>)> {
    check_dim(projections.rows(), groups.len())?;
    params.validate()?;
    check_points(projections)?;
    let variance = class_variance(projections, groups, num_classes)?;
    let mut members = vec![Vec::new(); num_classes];
    for (i, &g) in groups.iter().enumerate() {
        members[g as usize].push(i);
    }
    let mut cluster_labels = vec![NOISE; groups.len()];
    let mut classes = Vec::with_capacity(num_classes);
    for (c, idx) in members.iter().enumerate() {
        let sub = projections.select_rows(idx);
        let assignment = dbscan(&sub, params)?;
        for (&i, &l) in idx.iter().zip(&assignment.labels) {
            cluster_labels[i] = l;
        }
        let histogram = assignment.cluster_sizes();
        classes.push(ClassFragmentation {
            class: c as u16,
            count: idx.len(),
            fragmentation_score: fragmentation_score(&histogram),
            flagged: is_flagged(&histogram, thresholds),
            cluster_histogram: histogram,
            noise_count: assignment.noise_count,
            within_class_variance: variance[c],
        });
    }
    Ok((classes, cluster_labels))
}

/// Settings shared by the explanation pipeline and the raw baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub pca_k: usize,
    pub cluster: ClusterParams,
    pub winsorize: bool,
    pub thresholds: FlagThresholds,
}

impl AnalysisConfig {
    pub fn new(pca_k: usize, cluster: ClusterParams) -> Self {
        AnalysisConfig {
            pca_k,
            cluster,
            winsorize: true,
            thresholds: FlagThresholds::default(),
        }
    }
}

/// Everything computed downstream of vector extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub pca: PcaModel,
    pub projections: Matrix,
    pub groups: Vec<u16>,
    pub num_classes: usize,
    pub cluster_labels: Vec<i32>,
    pub classes: Vec<ClassFragmentation>,
}

/// Global PCA over all `vectors`, then per-class DBSCAN in projected space.
pub fn analyze_vectors(
    vectors: &Matrix,
    groups: &[u16],
    num_classes: usize,
    cfg: &AnalysisConfig,
) -> Result<Analysis> {
    check_dim(vectors.rows(), groups.len())?;
    let fit_input = if cfg.winsorize {
        winsorize(vectors, WINSORIZE_PERCENTILE)
    } else {
        vectors.clone()
    };
    let pca = fit_pca(&fit_input, cfg.pca_k)?;
    let projections = project(&pca, &fit_input)?;
    let (classes, cluster_labels) =
        cluster_by_class(&projections, groups, num_classes, cfg.cluster, &cfg.thresholds)?;
    Ok(Analysis {
        pca,
        projections,
        groups: groups.to_vec(),
        num_classes,
        cluster_labels,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    pub reference_mode: ReferenceMode,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub explanations: ExplanationSet,
    pub analysis: Analysis,
    pub report: FragmentationReport,
}

/// Predict, explain the predicted label of every instance, fit a global PCA
/// over all explanations and cluster each predicted class.
///
/// `reference_source` supplies the instances the DeepLIFT mean reference is
/// computed from (normally the training split); `ds` itself is used if absent.
pub fn run_pipeline(
    model: &MlpModel,
    ds: &Dataset,
    reference_source: Option<&Matrix>,
    cfg: &PipelineConfig,
) -> Result<PipelineRun> {
    if ds.is_empty() {
        return Err(Error::invalid("pipeline needs a nonempty dataset"));
    }
    check_dim(model.input_dim(), ds.dims())?;
    let mut opts = ExplainOptions::new(cfg.method);
    if cfg.method == Method::DeepLift {
        let source = reference_source.unwrap_or(&ds.instances);
        opts.reference = Some(cfg.reference_mode.resolve(source));
    }
    let explanations = explain_dataset(model, ds, &opts)?;
    let num_classes = model.output_dim();
    let analysis = analyze_vectors(
        &explanations.saliencies,
        &explanations.predicted_labels,
        num_classes,
        &cfg.analysis,
    )?;
    let report = FragmentationReport {
        dataset: ds.name.clone(),
        bridge: None,
        model: None,
        params: report_params(&cfg.analysis, Some(cfg.method), Grouping::PredictedLabel),
        classes: analysis.classes.clone(),
    };
    Ok(PipelineRun {
        explanations,
        analysis,
        report,
    })
}

pub(crate) fn report_params(cfg: &AnalysisConfig, method: Option<Method>, grouping: Grouping) -> ReportParams {
    ReportParams {
        pca_k: cfg.pca_k,
        eps: cfg.cluster.eps,
        min_pts: cfg.cluster.min_pts,
        method,
        winsorize: cfg.winsorize,
        grouping,
        thresholds: cfg.thresholds,
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub vectors: Matrix,
    pub analysis: Analysis,
    pub report: FragmentationReport,
}

/// The explanation-free baseline: the same analysis over raw instance
/// vectors (in raw units), grouped by true labels.
pub fn run_baseline(ds: &Dataset, cfg: &AnalysisConfig) -> Result<BaselineRun> {
    if ds.is_empty() {
        return Err(Error::invalid("baseline needs a nonempty dataset"));
    }
    let vectors = ds.raw_instances();
    let analysis = analyze_vectors(&vectors, &ds.labels, ds.num_classes, cfg)?;
    let report = FragmentationReport {
        dataset: ds.name.clone(),
        bridge: None,
        model: None,
        params: report_params(cfg, None, Grouping::TrueLabel),
        classes: analysis.classes.clone(),
    };
    Ok(BaselineRun {
        vectors,
        analysis,
        report,
    })
}

/// Reclusters stored projections with new parameters.
pub fn recluster(
    projections: &Matrix,
    groups: &[u16],
    num_classes: usize,
    base: &FragmentationReport,
    params: ClusterParams,
) -> Result<(FragmentationReport, Vec<i32>)> {
    let (classes, labels) =
        cluster_by_class(projections, groups, num_classes, params, &base.params.thresholds)?;
    let mut report = base.clone();
    report.params.eps = params.eps;
    report.params.min_pts = params.min_pts;
    report.classes = classes;
    Ok((report, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub noise_fraction: f64,
    pub scores: Vec<f64>,
    pub flagged: Vec<u16>,
    /// Largest score minus the mean score of the remaining classes.
    pub separation: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSweep {
    /// `None` when every candidate exceeds the noise limit.
    pub chosen_eps: Option<f64>,
    pub rows: Vec<SweepRow>,
}

/// Upper bound on the global noise fraction for a usable epsilon.
pub const MAX_NOISE_FRACTION: f64 = 0.5;

/// Evaluates per-class clustering over `eps_grid` and picks the epsilon with
/// the largest separation among those with at most half the points as
/// noise. Ties prefer less noise, then earlier grid entries.
/// The full table is returned even when no candidate is admissible.
pub fn sweep_epsilon(
    projections: &Matrix,
    groups: &[u16],
    num_classes: usize,
    eps_grid: &[f64],
    min_pts: usize,
    thresholds: &FlagThresholds,
) -> Result<EpsSweep> {
    if eps_grid.is_empty() {
        return Err(Error::invalid("epsilon grid is empty"));
    }
    let n = groups.len().max(1) as f64;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let params = ClusterParams::new(eps, min_pts)?;
        let (classes, _) = cluster_by_class(projections, groups, num_classes, params, thresholds)?;
        let noise: usize = classes.iter().map(|c| c.noise_count).sum();
        let scores: Vec<f64> = classes.iter().map(|c| c.fragmentation_score).collect();
        let noise_fraction = noise as f64 / n;
        rows.push(SweepRow {
            eps,
            noise_fraction,
            separation: separation(&scores),
            flagged: classes.iter().filter(|c| c.flagged).map(|c| c.class).collect(),
            scores,
            admissible: noise_fraction <= MAX_NOISE_FRACTION,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.admissible)
        .max_by(|(ia, a), (ib, b)| {
            a.separation
                .total_cmp(&b.separation)
                .then(b.noise_fraction.total_cmp(&a.noise_fraction))
                .then(ib.cmp(ia))
        })
        .map(|(_, r)| r.eps);
    Ok(EpsSweep {
        chosen_eps: best,
        rows,
    })
}

fn separation(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let best = crate::model::argmax(scores);
    let others: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .collect();
    let mean_others = if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    scores[best] - mean_others
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonalityScores {
    pub predicted_labels: Vec<u16>,
    /// Cosine similarity of each instance's penultimate activation to its
    /// predicted class's mean activation.
    pub scores: Vec<f32>,
    pub class_means: Vec<Vec<f32>>,
}

pub fn commonality(model: &MlpModel, ds: &Dataset) -> Result<CommonalityScores> {
    check_dim(model.input_dim(), ds.dims())?;
    let k = model.output_dim();
    let width = model.layer_dims[model.layer_dims.len() - 2];
    let mut predicted = Vec::with_capacity(ds.len());
    let mut acts = Vec::with_capacity(ds.len());
    for x in ds.instances.iter_rows() {
        let trace = model.forward(x)?;
        predicted.push(crate::model::argmax(&trace.logits) as u16);
        let n = trace.post_activations.len();
        acts.push(trace.post_activations[n - 2].clone());
    }
    let mut sums = vec![vec![0.0f64; width]; k];
    let mut counts = vec![0usize; k];
    for (a, &c) in acts.iter().zip(&predicted) {
        counts[c as usize] += 1;
        for (s, &v) in sums[c as usize].iter_mut().zip(a) {
            *s += v as f64;
        }
    }
    let class_means: Vec<Vec<f32>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| (v / n.max(1) as f64) as f32).collect())
        .collect();
    let scores = acts
        .iter()
        .zip(&predicted)
        .map(|(a, &c)| cosine(a, &class_means[c as usize]))
        .collect();
    Ok(CommonalityScores {
        predicted_labels: predicted,
        scores,
        class_means,
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
    }
}

/// Majority-vote agreement between cluster ids and ground-truth labels for
/// the instances in `indices`: each cluster is mapped to its most common
/// truth label and the fraction of matching non-noise instances is returned.
pub fn majority_agreement(cluster_labels: &[i32], truth: &[u16], indices: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let mut votes: BTreeMap<i32, BTreeMap<u16, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for &i in indices {
        if cluster_labels[i] == NOISE {
            continue;
        }
        total += 1;
        *votes
            .entry(cluster_labels[i])
            .or_default()
            .entry(truth[i])
            .or_default() += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let matched: usize = votes
        .values()
        .map(|v| v.values().copied().max().unwrap_or(0))
        .sum();
    matched as f64 / total as f64
}

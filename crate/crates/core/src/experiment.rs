//! End-to-end runs: dataset sources, artifact assembly and the resumable
//! all-pairs bridge sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    load_run, save_run, sha256_hex, Array, DatasetInfo, ExplainInfo, Manifest, ModelInfo, PcaInfo,
    RunArtifact, RunKind, SCHEMA_VERSION, TOOL_VERSION,
};
use crate::cluster::{log_grid, ClusterParams, DEFAULT_MIN_PTS};
use crate::dataset::{apply_bridge, load_mnist, make_synthetic, BridgeSpec, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::explain::{Method, ReferenceMode};
use crate::introspect::{
    recluster, run_baseline, run_pipeline, sweep_epsilon, Analysis, AnalysisConfig, EpsSweep,
    FlagThresholds, FragmentationReport, Grouping, PipelineConfig,
};
use crate::matrix::Matrix;
use crate::model::{init_model, train, MlpModel, TrainConfig};

/// Where a train/test pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Mnist { dir: PathBuf },
    Synthetic {
        config: SyntheticConfig,
        test_fraction: f64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Mnist { dir } => load_mnist(dir),
            DatasetSource::Synthetic {
                config,
                test_fraction,
            } => make_synthetic(config)?.split(*test_fraction, config.seed ^ 0x5eed),
        }
    }
}

/// Bridges both splits with the same spec.
pub fn bridge_pair(train: &Dataset, test: &Dataset, spec: BridgeSpec) -> Result<(Dataset, Dataset)> {
    Ok((apply_bridge(train, spec)?.dataset, apply_bridge(test, spec)?.dataset))
}

/// Either a fixed epsilon or a grid to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsChoice {
    Fixed(f64),
    Sweep(Vec<f64>),
}

impl EpsChoice {
    /// Default log-spaced grid.
    pub fn default_sweep() -> Self {
        EpsChoice::Sweep(log_grid(1e-3, 1e3, 61))
    }

    fn initial(&self) -> Result<f64> {
        match self {
            EpsChoice::Fixed(e) => Ok(*e),
            EpsChoice::Sweep(g) => g
                .first()
                .copied()
                .ok_or_else(|| Error::invalid("epsilon grid is empty")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub hidden_layers: Vec<usize>,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub method: Method,
    pub reference: ReferenceMode,
    pub pca_k: usize,
    pub eps: EpsChoice,
    pub min_pts: usize,
    pub winsorize: bool,
    pub thresholds: FlagThresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hidden_layers: vec![128, 128, 64],
            model_seed: 0,
            train: TrainConfig::default(),
            method: Method::DeepLift,
            reference: ReferenceMode::Mean,
            pca_k: 5,
            eps: EpsChoice::default_sweep(),
            min_pts: DEFAULT_MIN_PTS,
            winsorize: true,
            thresholds: FlagThresholds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(classes);
        dims
    }

    fn analysis(&self, eps: f64) -> Result<AnalysisConfig> {
        Ok(AnalysisConfig {
            pca_k: self.pca_k,
            cluster: ClusterParams::new(eps, self.min_pts)?,
            winsorize: self.winsorize,
            thresholds: self.thresholds,
        })
    }
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn creation_time() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Applies an epsilon sweep (if requested) to a finished analysis.
fn settle_eps(
    analysis: &mut Analysis,
    report: &mut FragmentationReport,
    eps: &EpsChoice,
    min_pts: usize,
) -> Result<Option<EpsSweep>> {
    let EpsChoice::Sweep(grid) = eps else {
        return Ok(None);
    };
    let sweep = sweep_epsilon(
        &analysis.projections,
        &analysis.groups,
        analysis.num_classes,
        grid,
        min_pts,
        &report.params.thresholds,
    )?;
    let params = ClusterParams::new(sweep.chosen_eps.ok_or(Error::NoAdmissibleEps)?, min_pts)?;
    let (new_report, labels) = recluster(
        &analysis.projections,
        &analysis.groups,
        analysis.num_classes,
        report,
        params,
    )?;
    analysis.cluster_labels = labels;
    analysis.classes = new_report.classes.clone();
    *report = new_report;
    Ok(Some(sweep))
}

fn dataset_info(ds: &Dataset, bridge: Option<BridgeSpec>) -> DatasetInfo {
    DatasetInfo {
        name: ds.name.clone(),
        bridge,
        num_classes: ds.num_classes,
        instances: ds.len(),
        feature_shape: ds.feature_shape.clone(),
        class_members: ds.class_members.clone(),
    }
}

fn common_arrays(ds: &Dataset, analysis: &Analysis, arrays: &mut std::collections::BTreeMap<String, Array>) {
    arrays.insert("projections".into(), Array::from_matrix(&analysis.projections));
    arrays.insert("groups".into(), Array::labels(&analysis.groups));
    arrays.insert("true_labels".into(), Array::labels(&ds.labels));
    arrays.insert("original_labels".into(), Array::labels(&ds.original_labels));
    arrays.insert(
        "cluster_labels".into(),
        Array::i32(vec![ds.len()], analysis.cluster_labels.clone()).expect("length matches"),
    );
    arrays.insert(
        "instance_ids".into(),
        Array::i32(vec![ds.len()], (0..ds.len() as i32).collect()).expect("length matches"),
    );
    arrays.insert("pca_mean".into(), Array::f32(vec![analysis.pca.dims()], analysis.pca.mean.clone()).expect("length matches"));
    arrays.insert("pca_components".into(), Array::from_matrix(&analysis.pca.components));
}

/// Explanation pipeline on `ds` with `model`, packaged as a sealed artifact.
pub fn pipeline_artifact(
    model: &MlpModel,
    ds: &Dataset,
    reference_source: Option<&Matrix>,
    bridge: Option<BridgeSpec>,
    cfg: &ExperimentConfig,
) -> Result<RunArtifact> {
    let pipeline = PipelineConfig {
        method: cfg.method,
        reference_mode: cfg.reference,
        analysis: cfg.analysis(cfg.eps.initial()?)?,
    };
    let mut run = run_pipeline(model, ds, reference_source, &pipeline)?;
    let sweep = settle_eps(&mut run.analysis, &mut run.report, &cfg.eps, cfg.min_pts)?;
    let model_hash = sha256_hex(&model.to_bytes()?);
    run.report.bridge = bridge;
    run.report.model = Some(model_hash.clone());

    let mut arrays = std::collections::BTreeMap::new();
    common_arrays(ds, &run.analysis, &mut arrays);
    arrays.insert("explanations".into(), Array::from_matrix(&run.explanations.saliencies));
    arrays.insert("predicted_labels".into(), Array::labels(&run.explanations.predicted_labels));
    arrays.insert("saliency_max_abs".into(), Array::f32(vec![ds.dims()], run.explanations.max_abs.clone())?);
    if let Some(r) = &run.explanations.reference {
        arrays.insert("reference".into(), Array::f32(vec![r.len()], r.clone())?);
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        run_id: String::new(),
        tool_version: TOOL_VERSION.into(),
        created_unix: creation_time(),
        kind: RunKind::Pipeline,
        dataset: dataset_info(ds, bridge),
        model: Some(ModelInfo {
            sha256: model_hash,
            layer_dims: model.layer_dims.clone(),
            seed: model.seed,
            test_accuracy: model.metadata.test_accuracy,
        }),
        explain: Some(ExplainInfo {
            method: cfg.method,
            target: run.explanations.target,
            reference: (cfg.method == Method::DeepLift).then_some(cfg.reference),
        }),
        pca: PcaInfo {
            k: cfg.pca_k,
            explained_variance_ratio: run.analysis.pca.explained_variance_ratio.clone(),
            winsorize: cfg.winsorize,
        },
        cluster: ClusterParams::new(run.report.params.eps, cfg.min_pts)?,
        grouping: Grouping::PredictedLabel,
        vector_array: "explanations".into(),
        eps_sweep: sweep.map(|s| s.rows),
        arrays: Default::default(),
    };
    RunArtifact {
        manifest,
        arrays,
        report: run.report,
    }
    .seal()
}

/// Raw-data baseline on `ds`, packaged as a sealed artifact.
pub fn baseline_artifact(ds: &Dataset, bridge: Option<BridgeSpec>, cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let mut run = run_baseline(ds, &cfg.analysis(cfg.eps.initial()?)?)?;
    let sweep = settle_eps(&mut run.analysis, &mut run.report, &cfg.eps, cfg.min_pts)?;
    run.report.bridge = bridge;
    let mut arrays = std::collections::BTreeMap::new();
    common_arrays(ds, &run.analysis, &mut arrays);
    arrays.insert("instances".into(), Array::from_matrix(&run.vectors));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        run_id: String::new(),
        tool_version: TOOL_VERSION.into(),
        created_unix: creation_time(),
        kind: RunKind::Baseline,
        dataset: dataset_info(ds, bridge),
        model: None,
        explain: None,
        pca: PcaInfo {
            k: cfg.pca_k,
            explained_variance_ratio: run.analysis.pca.explained_variance_ratio.clone(),
            winsorize: cfg.winsorize,
        },
        cluster: ClusterParams::new(run.report.params.eps, cfg.min_pts)?,
        grouping: Grouping::TrueLabel,
        vector_array: "instances".into(),
        eps_sweep: sweep.map(|s| s.rows),
        arrays: Default::default(),
    };
    RunArtifact {
        manifest,
        arrays,
        report: run.report,
    }
    .seal()
}

/// Trains a fresh model on `train` and records its accuracy on `test`.
pub fn train_model(train_ds: &Dataset, test_ds: &Dataset, cfg: &ExperimentConfig) -> Result<(MlpModel, Vec<f32>)> {
    let dims = cfg.layer_dims(train_ds.dims(), train_ds.num_classes);
    let model = init_model(&dims, cfg.model_seed)?;
    let (mut model, curve) = train(&model, train_ds, &cfg.train)?;
    model.metadata.test_accuracy = Some(model.accuracy(test_ds)?);
    Ok((model, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub bridge: BridgeSpec,
    pub run_id: String,
    /// True when a completed artifact from an earlier invocation was reused.
    pub reused: bool,
    pub test_accuracy: Option<f32>,
    pub flagged: Vec<u16>,
    pub bridged_class: u16,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairMarker {
    run_id: String,
    fingerprint: String,
}

/// All unordered label pairs `(a, b)` with `a < b`.
pub fn label_pairs(num_classes: usize) -> Vec<BridgeSpec> {
    let mut pairs = Vec::with_capacity(num_classes * num_classes.saturating_sub(1) / 2);
    for a in 0..num_classes as u16 {
        for b in a + 1..num_classes as u16 {
            pairs.push(BridgeSpec::new(a, b));
        }
    }
    pairs
}

fn pair_marker(out: &Path, spec: BridgeSpec) -> PathBuf {
    out.join(".pairs")
        .join(format!("{}-{}.json", spec.keep_label, spec.absorb_label))
}

/// Bridge → train → explain → analyze → persist, for every label pair.
///
/// Pairs whose artifact and completion marker already exist (for the same
/// configuration) are reused untouched. `jobs` bounds pair-level parallelism.
pub fn sweep_bridges(
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &ExperimentConfig,
    out: impl AsRef<Path>,
    jobs: usize,
) -> Result<Vec<PairOutcome>> {
    let out = out.as_ref();
    fs::create_dir_all(out.join(".pairs")).map_err(|e| Error::io(out, e))?;
    let fingerprint = sha256_hex(
        format!(
            "{}|{}|{}",
            serde_json::to_string(cfg)?,
            train_ds.name,
            test_ds.name
        )
        .as_bytes(),
    );
    let pairs = label_pairs(train_ds.num_classes);
    let run_pair = |spec: BridgeSpec| -> Result<PairOutcome> {
        let marker = pair_marker(out, spec);
        if let Some(done) = read_marker(&marker, &fingerprint) {
            if let Ok(a) = load_run(out.join(&done.run_id)) {
                return Ok(outcome(spec, &a, true));
            }
        }
        let (tr, te) = bridge_pair(train_ds, test_ds, spec)?;
        let (model, _) = train_model(&tr, &te, cfg)?;
        let artifact = pipeline_artifact(&model, &te, Some(&tr.instances), Some(spec), cfg)?;
        save_run(&artifact, out)?;
        let tmp = marker.with_extension("json.tmp");
        let body = serde_json::to_vec(&PairMarker {
            run_id: artifact.run_id().to_string(),
            fingerprint: fingerprint.clone(),
        })?;
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &marker).map_err(|e| Error::io(&marker, e))?;
        Ok(outcome(spec, &artifact, false))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| pairs.par_iter().map(|&s| run_pair(s)).collect())
}

fn read_marker(path: &Path, fingerprint: &str) -> Option<PairMarker> {
    let text = fs::read_to_string(path).ok()?;
    let m: PairMarker = serde_json::from_str(&text).ok()?;
    (m.fingerprint == fingerprint).then_some(m)
}

fn outcome(spec: BridgeSpec, a: &RunArtifact, reused: bool) -> PairOutcome {
    let bridged_class = a
        .manifest
        .dataset
        .class_members
        .iter()
        .position(|m| m.contains(&spec.keep_label))
        .unwrap_or(spec.keep_label as usize) as u16;
    PairOutcome {
        bridge: spec,
        run_id: a.run_id().to_string(),
        reused,
        test_accuracy: a.manifest.model.as_ref().and_then(|m| m.test_accuracy),
        flagged: a.report.flagged_classes(),
        bridged_class,
    }
}

//! Reproducible run artifacts.
//!
//! Layout of one run:
//!
//! ```text
//! <run_id>/manifest.json
//! <run_id>/report.json
//! <run_id>/arrays/<name>.bin    raw little-endian, shape and dtype in the manifest
//! ```
//!
//! `run_id` is the hex SHA-256 of the manifest (with `run_id` and
//! `created_unix` blanked) followed by every array's bytes in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::ClusterParams;
use crate::dataset::BridgeSpec;
use crate::error::{Error, Result};
use crate::explain::{AttributionTarget, Method, ReferenceMode};
use crate::introspect::{FragmentationReport, Grouping, SweepRow};
use crate::matrix::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const ARRAYS_DIR: &str = "arrays";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(shape, ArrayData::F32(data))
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::checked(shape, ArrayData::I32(data))
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Array {
            shape: vec![m.rows(), m.cols()],
            data: ArrayData::F32(m.as_slice().to_vec()),
        }
    }

    pub fn labels<T: Copy + Into<i64>>(values: &[T]) -> Self {
        Array {
            shape: vec![values.len()],
            data: ArrayData::I32(values.iter().map(|&v| v.into() as i32).collect()),
        }
    }

    fn checked(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let a = Array { shape, data };
        if a.element_count() != a.len() {
            return Err(Error::invalid(format!(
                "array of shape {:?} cannot hold {} values",
                a.shape,
                a.len()
            )));
        }
        Ok(a)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I32(_) => DType::I32,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            ArrayData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            ArrayData::I32(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }

    /// Two-dimensional `f32` array as a matrix.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match (self.shape.as_slice(), &self.data) {
            ([r, c], ArrayData::F32(v)) => Matrix::from_vec(*r, *c, v.clone()).ok(),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.len());
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    fn from_bytes(name: &str, spec: &ArraySpec, bytes: &[u8]) -> Result<Self> {
        let count: usize = spec.shape.iter().product();
        if bytes.len() != 4 * count {
            return Err(Error::ArtifactArray {
                name: name.into(),
                reason: format!(
                    "file holds {} bytes but shape {:?} needs {}",
                    bytes.len(),
                    spec.shape,
                    4 * count
                ),
            });
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match spec.dtype {
            DType::F32 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
        };
        Ok(Array {
            shape: spec.shape.clone(),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub name: String,
    pub bridge: Option<BridgeSpec>,
    pub num_classes: usize,
    pub instances: usize,
    pub feature_shape: Vec<usize>,
    /// Original labels merged into each class.
    pub class_members: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub sha256: String,
    pub layer_dims: Vec<usize>,
    pub seed: u64,
    pub test_accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainInfo {
    pub method: Method,
    pub target: AttributionTarget,
    pub reference: Option<ReferenceMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaInfo {
    pub k: usize,
    pub explained_variance_ratio: Vec<f32>,
    pub winsorize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_id: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub kind: RunKind,
    pub dataset: DatasetInfo,
    pub model: Option<ModelInfo>,
    pub explain: Option<ExplainInfo>,
    pub pca: PcaInfo,
    pub cluster: ClusterParams,
    pub grouping: Grouping,
    /// Name of the array holding the analyzed per-instance vectors.
    pub vector_array: String,
    pub eps_sweep: Option<Vec<SweepRow>>,
    pub arrays: BTreeMap<String, ArraySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pipeline,
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, Array>,
    pub report: FragmentationReport,
}

/// Arrays every run must carry, all with leading dimension N.
pub const PER_INSTANCE_ARRAYS: [&str; 6] = [
    "projections",
    "groups",
    "true_labels",
    "original_labels",
    "cluster_labels",
    "instance_ids",
];

impl RunArtifact {
    /// Fills in the array specs and the content-hash run id.
    pub fn seal(mut self) -> Result<Self> {
        self.manifest.arrays = self
            .arrays
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    ArraySpec {
                        dtype: a.dtype(),
                        shape: a.shape.clone(),
                    },
                )
            })
            .collect();
        self.validate()?;
        self.manifest.run_id = self.content_hash()?;
        Ok(self)
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn content_hash(&self) -> Result<String> {
        let mut m = self.manifest.clone();
        m.run_id = String::new();
        m.created_unix = 0;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&m)?);
        h.update(serde_json::to_vec(&self.report)?);
        for (name, a) in &self.arrays {
            h.update(name.as_bytes());
            h.update(a.to_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| Error::ArtifactArray {
            name: name.into(),
            reason: "missing".into(),
        })
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.array(name)?.to_matrix().ok_or_else(|| Error::ArtifactArray {
            name: name.into(),
            reason: "not a 2-d f32 array".into(),
        })
    }

    pub fn labels(&self, name: &str) -> Result<&[i32]> {
        self.array(name)?.as_i32().ok_or_else(|| Error::ArtifactArray {
            name: name.into(),
            reason: "not an i32 array".into(),
        })
    }

    pub fn groups(&self) -> Result<Vec<u16>> {
        self.labels("groups")?
            .iter()
            .map(|&g| {
                u16::try_from(g).map_err(|_| Error::ArtifactArray {
                    name: "groups".into(),
                    reason: format!("invalid class id {g}"),
                })
            })
            .collect()
    }

    /// Checks the manifest against the arrays and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        for (name, spec) in &m.arrays {
            let a = self.array(name)?;
            if a.dtype() != spec.dtype {
                return Err(Error::ArtifactArray {
                    name: name.clone(),
                    reason: format!("dtype {:?} does not match manifest {:?}", a.dtype(), spec.dtype),
                });
            }
            if a.shape != spec.shape {
                return Err(Error::ArtifactArray {
                    name: name.clone(),
                    reason: format!("shape {:?} does not match manifest {:?}", a.shape, spec.shape),
                });
            }
        }
        for name in self.arrays.keys() {
            if !m.arrays.contains_key(name) {
                return Err(Error::Manifest(format!("array `{name}` is not declared")));
            }
        }
        let n = m.dataset.instances;
        let mut required: Vec<&str> = PER_INSTANCE_ARRAYS.to_vec();
        required.push(&m.vector_array);
        for name in required {
            let a = self.array(name)?;
            if a.shape.first() != Some(&n) {
                return Err(Error::ArtifactArray {
                    name: name.into(),
                    reason: format!("leading dimension {:?} differs from N={n}", a.shape.first()),
                });
            }
        }
        let k = self.array("projections")?.shape.get(1).copied();
        if k != Some(m.pca.k) {
            return Err(Error::ArtifactArray {
                name: "projections".into(),
                reason: format!("width {k:?} differs from pca.k={}", m.pca.k),
            });
        }
        if self.report.total_count() != n {
            return Err(Error::Manifest(format!(
                "report covers {} instances, dataset has {n}",
                self.report.total_count()
            )));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn manifest_bytes(m: &Manifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(m)?;
    v.push(b'\n');
    Ok(v)
}

pub fn report_bytes(r: &FragmentationReport) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(r)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes `<dir>/<run_id>/` atomically (temp directory + rename) and returns its path.
/// An existing directory for the same run id is left untouched.
pub fn save_run(artifact: &RunArtifact, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    artifact.validate()?;
    let id = artifact.run_id();
    if id.is_empty() {
        return Err(Error::Manifest("artifact has not been sealed".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let target = dir.join(id);
    if target.join(MANIFEST_FILE).is_file() {
        return Ok(target);
    }
    let tmp = dir.join(format!(".tmp-{id}-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let arrays_dir = tmp.join(ARRAYS_DIR);
    fs::create_dir_all(&arrays_dir).map_err(|e| Error::io(&arrays_dir, e))?;
    for (name, a) in &artifact.arrays {
        write_file(&arrays_dir.join(format!("{name}.bin")), &a.to_bytes())?;
    }
    write_file(&tmp.join(REPORT_FILE), &report_bytes(&artifact.report)?)?;
    write_file(&tmp.join(MANIFEST_FILE), &manifest_bytes(&artifact.manifest)?)?;
    match fs::rename(&tmp, &target) {
        Ok(()) => Ok(target),
        Err(_) if target.join(MANIFEST_FILE).is_file() => {
            let _ = fs::remove_dir_all(&tmp);
            Ok(target)
        }
        Err(e) => Err(Error::io(&target, e)),
    }
}

pub fn load_manifest(run_dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = run_dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn load_run(run_dir: impl AsRef<Path>) -> Result<RunArtifact> {
    let run_dir = run_dir.as_ref();
    let manifest = load_manifest(run_dir)?;
    let report_path = run_dir.join(REPORT_FILE);
    let report_text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: FragmentationReport = serde_json::from_str(&report_text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", report_path.display())))?;
    let mut arrays = BTreeMap::new();
    for (name, spec) in &manifest.arrays {
        let path = run_dir.join(ARRAYS_DIR).join(format!("{name}.bin"));
        let bytes = fs::read(&path).map_err(|_| Error::ArtifactArray {
            name: name.clone(),
            reason: format!("missing array file {}", path.display()),
        })?;
        arrays.insert(name.clone(), Array::from_bytes(name, spec, &bytes)?);
    }
    let artifact = RunArtifact {
        manifest,
        arrays,
        report,
    };
    artifact.validate()?;
    Ok(artifact)
}

/// Run directories directly under `dir` (those containing a manifest), sorted by name.
pub fn list_runs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && path.join(MANIFEST_FILE).is_file() {
            runs.push(path);
        }
    }
    runs.sort();
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::invalid(format!("unknown export format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "class",
    "members",
    "count",
    "cluster_histogram",
    "noise",
    "fragmentation_score",
    "within_class_variance",
    "flagged",
];

/// Per-class table of a report. JSON output is identical to `report.json`.
pub fn export_report(report: &FragmentationReport, members: &[Vec<u16>], format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Json => Ok(String::from_utf8(report_bytes(report)?).expect("json is utf-8")),
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for c in &report.classes {
                let m = members
                    .get(c.class as usize)
                    .map(|m| m.iter().map(u16::to_string).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default();
                let hist = c
                    .cluster_histogram
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(";");
                w.write_record([
                    c.class.to_string(),
                    m,
                    c.count.to_string(),
                    hist,
                    c.noise_count.to_string(),
                    c.fragmentation_score.to_string(),
                    c.within_class_variance.to_string(),
                    c.flagged.to_string(),
                ])?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

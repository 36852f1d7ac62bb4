//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! MNIST criteria read IDX files from `MNIST_DIR` or `<workspace>/data/mnist`
//! and report NOT RUN when neither exists (a failure under `REQUIRE_MNIST=1`).

#[path = "acceptance/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use introspect_core::artifacts::{list_runs, load_run, save_run, RunArtifact};
use introspect_core::dataset::{apply_bridge, make_synthetic, BridgeSpec, SyntheticConfig};
use introspect_core::experiment::{pipeline_artifact, EpsChoice, ExperimentConfig};
use introspect_core::explain::{explain_deeplift, explain_gradient};
use introspect_core::model::{init_model, load_model, Mlp};
use introspect_core::reduce::{fit_pca, project};
use introspect_core::cluster::{dbscan, ClusterParams};
use introspect_core::Matrix;

const BIN: &str = env!("CARGO_BIN_EXE_introspect");
const PINNED_EPOCH: &str = "1700000000";

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<Outcome, String>;

fn main() {
    // Respond to `--list` like a libtest binary so tooling can enumerate targets.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Check); 7] = [
        ("P1", p1_accuracy),
        ("P2", p2_bridged_flagged),
        ("P3", p3_variance),
        ("P4", p4_baseline),
        ("P5", p5_synthetic),
        ("P6", p6_properties),
        ("P7", p7_resume),
    ];
    let require_mnist = std::env::var_os("REQUIRE_MNIST").is_some_and(|v| v == "1");
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = check().unwrap_or_else(Outcome::Fail);
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) if require_mnist => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("{name} {tag}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn verdict(ok: bool, detail: String) -> Check {
    Ok(if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) })
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = match std::env::var_os("MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    };
    let has_files = ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"].iter().all(|f| {
        dir.join(f).is_file() || dir.join(format!("{f}.gz")).is_file()
    });
    has_files.then_some(dir)
}

fn not_run_without_mnist() -> Outcome {
    Outcome::NotRun("MNIST IDX files not found (set MNIST_DIR or fill data/mnist)".into())
}

fn run(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("SOURCE_DATE_EPOCH", PINNED_EPOCH)
        .output()
        .map_err(|e| format!("spawning {BIN}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`introspect {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("temp paths are UTF-8")
}

fn only_run(dir: &Path) -> Result<RunArtifact, String> {
    let runs = list_runs(dir).map_err(|e| e.to_string())?;
    match runs.as_slice() {
        [one] => load_run(one).map_err(|e| e.to_string()),
        other => Err(format!("expected one run in {}, found {}", dir.display(), other.len())),
    }
}

fn class_holding(artifact: &RunArtifact, original: u16) -> Option<u16> {
    let members = &artifact.manifest.dataset.class_members;
    members.iter().position(|m| m.contains(&original)).map(|c| c as u16)
}

fn train_accuracy(data_dir: &Path, bridge: Option<&str>, out: &Path) -> Result<(f32, usize, f64), String> {
    let mut args = vec!["train", "--dataset", "mnist", "--data-dir", p(data_dir), "--out", p(out)];
    if let Some(b) = bridge {
        args.extend(["--bridge", b]);
    }
    let started = Instant::now();
    run(&args)?;
    let secs = started.elapsed().as_secs_f64();
    let model = load_model(out).map_err(|e| e.to_string())?;
    let acc = model.metadata.test_accuracy.ok_or("model has no test accuracy")?;
    Ok((acc, model.output_dim(), secs))
}

fn p1_accuracy() -> Check {
    let Some(data) = mnist_dir() else {
        return Ok(not_run_without_mnist());
    };
    let tmp = tempdir()?;
    let (plain, k_plain, t_plain) = train_accuracy(&data, None, &tmp.path().join("plain.bin"))?;
    let (bridged, k_bridged, t_bridged) = train_accuracy(&data, Some("1,8"), &tmp.path().join("b18.bin"))?;
    let ok = plain >= 0.97 && bridged >= 0.97 && k_plain == 10 && k_bridged == 9 && t_plain.max(t_bridged) <= 1800.0;
    verdict(
        ok,
        format!(
            "test accuracy {:.2}% (10 classes, {t_plain:.0}s) and {:.2}% bridged 1+8 ({k_bridged} classes, {t_bridged:.0}s); need >= 97% within 30 min",
            plain * 100.0,
            bridged * 100.0
        ),
    )
}

/// Trains the 0+1 bridged model and analyzes the test split once for P2 and P3.
fn bridged_01_run() -> Result<Option<RunArtifact>, String> {
    thread_local! {
        static CACHE: std::cell::RefCell<Option<Result<Option<RunArtifact>, String>>> = const { std::cell::RefCell::new(None) };
    }
    if let Some(hit) = CACHE.with(|c| c.borrow().clone()) {
        return hit;
    }
    let result = (|| {
        let Some(data) = mnist_dir() else {
            return Ok(None);
        };
        let tmp = tempdir()?;
        let model = tmp.path().join("b01.bin");
        let runs = tmp.path().join("runs");
        run(&["train", "--dataset", "mnist", "--data-dir", p(&data), "--bridge", "0,1", "--out", p(&model)])?;
        run(&[
            "analyze", "--model", p(&model), "--dataset", "mnist", "--data-dir", p(&data),
            "--bridge", "0,1", "--method", "deeplift", "--pca-k", "5", "--out", p(&runs),
        ])?;
        only_run(&runs).map(Some)
    })();
    CACHE.with(|c| *c.borrow_mut() = Some(result.clone()));
    result
}

fn p2_bridged_flagged() -> Check {
    let Some(run) = bridged_01_run()? else {
        return Ok(not_run_without_mnist());
    };
    let target = class_holding(&run, 0).ok_or("no class holds digit 0")?;
    let c = &run.report.classes[target as usize];
    let clustered: usize = c.cluster_histogram.iter().sum();
    let mut sizes = c.cluster_histogram.clone();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let two_big = sizes.len() >= 2 && (sizes[1] as f64) >= 0.2 * clustered as f64;
    let others = run.report.classes.iter().filter(|o| o.class != target);
    let unflagged = others.clone().filter(|o| !o.flagged).count();
    let total_others = others.count();
    let ok = c.flagged && two_big && unflagged + 1 >= total_others;
    verdict(
        ok,
        format!(
            "merged 0+1 class flagged={} with clusters {:?} of {} clustered; {unflagged}/{total_others} other classes unflagged; chosen eps {:.4} (reference setting 0.004)",
            c.flagged, c.cluster_histogram, clustered, run.report.params.eps
        ),
    )
}

fn p3_variance() -> Check {
    let Some(run) = bridged_01_run()? else {
        return Ok(not_run_without_mnist());
    };
    let target = class_holding(&run, 0).ok_or("no class holds digit 0")?;
    let variances: Vec<f64> = run.report.classes.iter().map(|c| c.within_class_variance).collect();
    let top = variances
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i as u16)
        .ok_or("empty report")?;
    let runner_up = variances
        .iter()
        .enumerate()
        .filter(|(i, _)| *i as u16 != target)
        .map(|(_, v)| *v)
        .fold(f64::MIN, f64::max);
    verdict(
        top == target,
        format!(
            "largest within-class variance is class {top} ({:.3}); merged 0+1 class is {target} ({:.3}), next largest {runner_up:.3}",
            variances[top as usize], variances[target as usize]
        ),
    )
}

fn baseline_sweep(data: &Path, bridge: &str, out: &Path) -> Result<RunArtifact, String> {
    run(&[
        "baseline", "--dataset", "mnist", "--data-dir", p(data), "--bridge", bridge,
        "--split", "train", "--subset", "10000",
        "--eps-min", "100", "--eps-max", "400", "--eps-steps", "13", "--out", p(out),
    ])?;
    only_run(out)
}

fn p4_baseline() -> Check {
    let Some(data) = mnist_dir() else {
        return Ok(not_run_without_mnist());
    };
    let tmp = tempdir()?;
    let flagged_at = |run: &RunArtifact, original: u16| -> Result<Vec<f64>, String> {
        let target = class_holding(run, original).ok_or("bridged class missing")?;
        let rows = run.manifest.eps_sweep.as_ref().ok_or("baseline stored no sweep table")?;
        Ok(rows.iter().filter(|r| r.flagged.contains(&target)).map(|r| r.eps).collect())
    };
    let r18 = baseline_sweep(&data, "1,8", &tmp.path().join("b18"))?;
    let r01 = baseline_sweep(&data, "0,1", &tmp.path().join("b01"))?;
    let never_18 = flagged_at(&r18, 1)?;
    let some_01 = flagged_at(&r01, 0)?;
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.0}")).collect::<Vec<_>>().join(",");
    verdict(
        never_18.is_empty() && !some_01.is_empty(),
        format!(
            "raw-pixel baseline, 10k train subset, eps 100..400 (13 pts): 1+8 flagged at [{}], 0+1 flagged at [{}]",
            fmt(&never_18),
            fmt(&some_01)
        ),
    )
}

fn p5_synthetic() -> Check {
    let tmp = tempdir()?;
    let model_b = tmp.path().join("b.bin");
    let model_c = tmp.path().join("c.bin");
    let (runs_b, runs_c) = (tmp.path().join("rb"), tmp.path().join("rc"));
    let syn = ["--dataset", "synthetic", "--seed", "0"];
    run(&[&["train"][..], &syn[..], &["--bridge", "0,9", "--out", p(&model_b)]].concat())?;
    run(&[&["analyze"][..], &syn[..], &["--bridge", "0,9", "--model", p(&model_b), "--out", p(&runs_b)]].concat())?;
    let bridged = only_run(&runs_b)?;
    let eps = bridged.report.params.eps.to_string();

    run(&[&["train"][..], &syn[..], &["--out", p(&model_c)]].concat())?;
    run(&[&["analyze"][..], &syn[..], &["--model", p(&model_c), "--eps", &eps, "--out", p(&runs_c)]].concat())?;
    let control = only_run(&runs_c)?;

    let target = class_holding(&bridged, 0).ok_or("bridged class missing")?;
    let groups = bridged.groups().map_err(|e| e.to_string())?;
    let clusters = bridged.labels("cluster_labels").map_err(|e| e.to_string())?;
    let originals = bridged.labels("original_labels").map_err(|e| e.to_string())?;
    let (mut c_sel, mut t_sel) = (Vec::new(), Vec::new());
    for i in 0..groups.len() {
        if groups[i] == target {
            c_sel.push(clusters[i]);
            t_sel.push(originals[i] as u16);
        }
    }
    let agreement = oracles::majority_agreement(&c_sel, &t_sel);
    let flagged = bridged.report.flagged_classes();
    let control_flagged = control.report.flagged_classes();
    verdict(
        flagged == vec![target] && agreement >= 0.95 && control_flagged.is_empty(),
        format!(
            "bridged 0+9 flags {flagged:?} (expect [{target}]) with clusters {:?}, majority agreement {agreement:.3}; unbridged control at the same eps {eps} flags {control_flagged:?}",
            bridged.report.classes[target as usize].cluster_histogram
        ),
    )
}

fn p6_properties() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, check) in [
        ("gradient", prop_gradient as fn() -> Result<String, String>),
        ("deeplift", prop_deeplift),
        ("pca", prop_pca),
        ("dbscan", prop_dbscan),
        ("bridge", prop_bridge),
        ("artifact", prop_artifact),
    ] {
        match check() {
            Ok(note) => notes.push(format!("{name}: {note}")),
            Err(e) => {
                ok = false;
                notes.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    verdict(ok, notes.join("; "))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> Mlp<f64> {
    let mut m = init_model(dims, rng.random()).expect("valid dims").cast::<f64>();
    for b in m.biases.iter_mut().flatten() {
        *b = 0.3 * normal(rng);
    }
    m
}

fn prop_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for net in 0..50 {
        let mut dims = vec![rng.random_range(3..=12)];
        for _ in 0..rng.random_range(1..=3) {
            dims.push(rng.random_range(2..=10));
        }
        dims.push(rng.random_range(2..=5));
        let m = random_net(&mut rng, &dims);
        let x: Vec<f64> = (0..dims[0]).map(|_| normal(&mut rng)).collect();
        for label in 0..*dims.last().unwrap() {
            let g = explain_gradient(&m, &x, label).map_err(|e| e.to_string())?;
            let fd = oracles::fd_gradient(&dims, &m.weights, &m.biases, &x, label, 1e-6);
            let scale = g.iter().chain(&fd).fold(1e-12f64, |a, v| a.max(v.abs()));
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            if err >= 1e-4 {
                return Err(format!("net {net} dims {dims:?} label {label}: relative error {err:.2e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("50 nets, worst rel err {worst:.1e}"))
}

fn prop_deeplift() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dims = [784, 128, 128, 64, 10];
    let m = random_net(&mut rng, &dims).cast::<f32>();
    let (w64, b64): (Vec<Vec<f64>>, Vec<Vec<f64>>) = {
        let c = m.cast::<f64>();
        (c.weights, c.biases)
    };
    let reference: Vec<f32> = (0..784).map(|_| rng.random::<f32>() * 0.5).collect();
    let ref64: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let logit_ref = oracles::logits(&dims, &w64, &b64, &ref64);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x: Vec<f32> = (0..784).map(|_| rng.random::<f32>()).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let logit_x = oracles::logits(&dims, &w64, &b64, &x64);
        let label = logit_x
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let attr = explain_deeplift(&m, &x, &reference, label).map_err(|e| e.to_string())?;
        let sum: f64 = attr.iter().map(|&v| v as f64).sum();
        let delta = logit_x[label] - logit_ref[label];
        let tol = 1e-3f64.max(1e-4 * delta.abs());
        let err = (sum - delta).abs();
        if err > tol {
            return Err(format!("instance {i}: sum {sum} vs logit difference {delta}"));
        }
        worst = worst.max(err / tol);
    }
    Ok(format!("1000 instances, worst error {worst:.1e} of tolerance"))
}

fn prop_pca() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_ortho = 0.0f64;
    for case in 0..20 {
        let n = rng.random_range(50..=800);
        let d = rng.random_range(2..=60);
        let k = rng.random_range(1..=d.min(12));
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..5.0)).collect();
        let data: Vec<f32> = (0..n * d).map(|i| (normal(&mut rng) * scales[i % d]) as f32).collect();
        let x = Matrix::from_vec(n, d, data).map_err(|e| e.to_string())?;
        let pca = fit_pca(&x, k).map_err(|e| e.to_string())?;
        let c = &pca.components;
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = c.row(a).iter().zip(c.row(b)).map(|(&u, &v)| u as f64 * v as f64).sum();
                let dev = (dot - if a == b { 1.0 } else { 0.0 }).abs();
                worst_ortho = worst_ortho.max(dev);
                if dev > 1e-5 {
                    return Err(format!("case {case}: components {a},{b} dot {dot}"));
                }
            }
        }
        if pca.explained_variance.windows(2).any(|w| w[0] < w[1]) {
            return Err(format!("case {case}: variances not sorted {:?}", pca.explained_variance));
        }
        // Sample variance of each projected column should equal the reported variance.
        let y = project(&pca, &x).map_err(|e| e.to_string())?;
        for j in 0..k {
            let col: Vec<f64> = (0..n).map(|i| y.get(i, j) as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let reported = pca.explained_variance[j] as f64;
            if (var - reported).abs() > 1e-3 * reported.max(1e-6) {
                return Err(format!("case {case}: axis {j} variance {var} vs reported {reported}"));
            }
        }
    }
    Ok(format!("20 fits, worst orthonormality deviation {worst_ortho:.1e}"))
}

fn prop_dbscan() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut clusters_seen = 0;
    for case in 0..300 {
        let n = rng.random_range(1..=400);
        let d = rng.random_range(1..=6);
        let blobs: Vec<Vec<f64>> = (0..rng.random_range(1..=5))
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let points: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                if rng.random_bool(0.15) {
                    (0..d).map(|_| rng.random_range(-12.0..12.0) as f32).collect()
                } else {
                    let c = &blobs[rng.random_range(0..blobs.len())];
                    c.iter().map(|&m| (m + normal(&mut rng)) as f32).collect()
                }
            })
            .collect();
        let eps = rng.random_range(0.1..3.0);
        let min_pts = rng.random_range(1..=10);
        let m = Matrix::from_rows(&points).map_err(|e| e.to_string())?;
        let got = dbscan(&m, ClusterParams::new(eps, min_pts).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let want = oracles::dbscan(&points, eps, min_pts);
        if got.labels != want {
            return Err(format!("case {case} (n={n}, d={d}, eps={eps:.3}, min_pts={min_pts}) differs"));
        }
        clusters_seen += got.num_clusters;
    }
    Ok(format!("300 cases identical to brute force ({clusters_seen} clusters total)"))
}

fn prop_bridge() -> Result<String, String> {
    let mut checked = 0;
    for k in [2usize, 3, 5, 10] {
        let ds = make_synthetic(&SyntheticConfig {
            num_classes: k,
            dims: 4,
            per_class_count: 7 + k,
            seed: k as u64,
            ..SyntheticConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let counts = ds.class_counts();
        for a in 0..k as u16 {
            for b in 0..k as u16 {
                if a == b {
                    continue;
                }
                let bridged = apply_bridge(&ds, BridgeSpec::new(a, b)).map_err(|e| e.to_string())?;
                let out = &bridged.dataset;
                let merged = bridged.label_map[&a];
                let new_counts = out.class_counts();
                if new_counts[merged as usize] != counts[a as usize] + counts[b as usize]
                    || new_counts.iter().sum::<usize>() != ds.len()
                    || out.num_classes != k - 1
                {
                    return Err(format!("k={k} bridge {a},{b}: counts {new_counts:?}"));
                }
                let again = apply_bridge(out, BridgeSpec::new(merged, merged)).map_err(|e| e.to_string())?;
                if again.dataset != *out {
                    return Err(format!("k={k} bridge {a},{b}: re-applying the merged class changed the data"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} bridges conserve counts and are idempotent"))
}

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out).map_err(|e| format!("reading {}: {e}", dir.display()))?;
    Ok(out)
}

fn prop_artifact() -> Result<String, String> {
    let ds = make_synthetic(&SyntheticConfig {
        num_classes: 4,
        per_class_count: 30,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let model = init_model(&[ds.dims(), 8, 4], 3).map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        eps: EpsChoice::Fixed(0.5),
        pca_k: 3,
        ..ExperimentConfig::default()
    };
    let artifact = pipeline_artifact(&model, &ds, Some(&ds.instances), None, &cfg).map_err(|e| e.to_string())?;
    let tmp = tempdir()?;
    let first = save_run(&artifact, tmp.path().join("a")).map_err(|e| e.to_string())?;
    let loaded = load_run(&first).map_err(|e| e.to_string())?;
    if loaded != artifact {
        return Err("loaded artifact differs from the saved one".into());
    }
    let second = save_run(&loaded, tmp.path().join("b")).map_err(|e| e.to_string())?;
    let (a, b) = (snapshot(&first)?, snapshot(&second)?);
    if a != b {
        return Err("re-saved artifact is not byte-identical".into());
    }
    Ok(format!("save/load/save byte-identical over {} files", a.len()))
}

fn marker_count(out: &Path) -> usize {
    std::fs::read_dir(out.join(".pairs"))
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
        .unwrap_or(0)
}

fn pairs_args(out: &Path) -> Vec<String> {
    [
        "pairs", "--dataset", "synthetic", "--synthetic-classes", "4", "--synthetic-per-class", "1500",
        "--seed", "3", "--jobs", "1", "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([p(out).to_string()])
    .collect()
}

fn run_pairs(out: &Path) -> Result<usize, String> {
    let args = pairs_args(out);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let output = run(&refs)?;
    Ok(String::from_utf8_lossy(&output.stdout).lines().filter(|l| l.contains(" reused ")).count())
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn p7_resume() -> Check {
    let tmp = tempdir()?;
    let clean = tmp.path().join("clean");
    run_pairs(&clean)?;
    let reference = snapshot(&clean)?;
    let artifacts = list_runs(&clean).map_err(|e| e.to_string())?.len();
    if artifacts != 6 {
        return verdict(false, format!("4 classes produced {artifacts} artifacts, expected 6"));
    }

    // A real interruption: kill the process once the first pair is committed.
    let killed = tmp.path().join("killed");
    let mut child = Command::new(BIN)
        .args(pairs_args(&killed))
        .env("SOURCE_DATE_EPOCH", PINNED_EPOCH)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(300);
    let interrupted = loop {
        if child.try_wait().map_err(|e| e.to_string())?.is_some() {
            break false;
        }
        if marker_count(&killed) >= 1 || Instant::now() > deadline {
            child.kill().map_err(|e| e.to_string())?;
            child.wait().map_err(|e| e.to_string())?;
            break true;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let done_at_kill = marker_count(&killed);
    let before = snapshot(&killed)?;
    let reused_after_kill = run_pairs(&killed)?;
    let after_kill = snapshot(&killed)?;
    let untouched = before.iter().all(|(k, v)| after_kill.get(k) == Some(v));

    // Deterministic interruption: drop half the pairs from a finished directory.
    let partial = tmp.path().join("partial");
    copy_tree(&clean, &partial).map_err(|e| e.to_string())?;
    for pair in ["0-1", "1-2", "2-3"] {
        let marker = partial.join(".pairs").join(format!("{pair}.json"));
        let text = std::fs::read_to_string(&marker).map_err(|e| e.to_string())?;
        let id = serde_json::from_str::<serde_json::Value>(&text).map_err(|e| e.to_string())?["run_id"]
            .as_str()
            .ok_or("marker without run_id")?
            .to_string();
        std::fs::remove_dir_all(partial.join(id)).map_err(|e| e.to_string())?;
        std::fs::remove_file(marker).map_err(|e| e.to_string())?;
    }
    let reused_partial = run_pairs(&partial)?;
    let after_partial = snapshot(&partial)?;

    let ok = after_kill == reference
        && untouched
        && reused_after_kill >= done_at_kill
        && reused_partial == 3
        && after_partial == reference;
    verdict(
        ok,
        format!(
            "6 artifacts for 4 classes; {} with {done_at_kill} pairs done, rerun reused {reused_after_kill} and matched a clean run byte-for-byte: {}; after deleting 3 of 6 the rerun reused {reused_partial} and matched: {}",
            if interrupted { "killed mid-run" } else { "run finished before the kill" },
            after_kill == reference && untouched,
            after_partial == reference
        ),
    )
}

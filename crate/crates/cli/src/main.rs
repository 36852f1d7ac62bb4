//! `introspect`: train, explain, cluster and report, from the command line.
//!
//! Exit codes: 0 success, 2 argument error, 3 data error, 4 numeric failure.

mod settings;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use introspect_core::artifacts::save_run;
use introspect_core::dataset::Dataset;
use introspect_core::experiment::{
    baseline_artifact, bridge_pair, pipeline_artifact, sweep_bridges, train_model,
};
use introspect_core::explain::{Method, ReferenceMode};
use introspect_core::introspect::{
    run_baseline, run_pipeline, sweep_epsilon, AnalysisConfig, FragmentationReport, PipelineConfig,
};
use introspect_core::cluster::ClusterParams;
use introspect_core::model::{load_model, save_model};
use introspect_core::{Error, ErrorKind, Result};

use settings::{resolve, DatasetKind, Settings, Split};

#[derive(Parser, Debug)]
#[command(name = "introspect", version)]
#[command(about = "Find latent subclasses by clustering per-class explanations")]
#[command(after_help = "Examples:
  introspect train --dataset mnist --data-dir data/mnist --bridge 1,8 --out model.bin
  introspect analyze --model model.bin --dataset mnist --data-dir data/mnist --bridge 1,8 --out runs
  introspect baseline --dataset mnist --data-dir data/mnist --bridge 0,1 --eps 250 --out runs
  introspect pairs --dataset synthetic --synthetic-classes 4 --jobs 4 --out runs
  introspect serve --runs-dir runs --port 8080")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier and write a model file
    Train {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// JSON file with settings; explicit flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain, project and cluster a trained model's predictions into a run artifact
    Analyze {
        /// Model file produced by `train`
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        analysis: AnalysisFlags,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Runs directory
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Same analysis on raw instances grouped by true label (no model)
    Baseline {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        analysis: AnalysisFlags,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Print the epsilon table and the chosen epsilon (explanations with --model, raw data otherwise)
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        analysis: AnalysisFlags,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also save the run at the chosen epsilon into this runs directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bridge every label pair, train, analyze and save; completed pairs are reused
    Pairs {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        analysis: AnalysisFlags,
        /// Pairs processed in parallel
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Serve the HTTP API over a runs directory
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        /// Directory of static web assets served at `/`
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct DataFlags {
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory holding the four MNIST IDX files (optionally .gz)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Merge label B into label A, e.g. `1,8`
    #[arg(long, value_parser = parse_bridge)]
    bridge: Option<[u16; 2]>,
    /// Split to analyze
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Analyze a seeded random subset of this many instances
    #[arg(long)]
    subset: Option<usize>,
    /// Test share of the synthetic dataset
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    synthetic_classes: Option<usize>,
    #[arg(long)]
    synthetic_dims: Option<usize>,
    #[arg(long)]
    synthetic_per_class: Option<usize>,
    #[arg(long)]
    centroid_scale: Option<f32>,
    #[arg(long)]
    noise_sigma: Option<f32>,
    /// Seed for every random choice (data, init, shuffling, subsets)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Hidden layer widths, e.g. `128,128,64`
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
}

#[derive(Args, Debug, Default)]
struct AnalysisFlags {
    /// deeplift, gradient, gradxinput, loo or linear
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// DeepLIFT reference: mean of the training set, or zero
    #[arg(long, value_parser = parse_reference)]
    reference: Option<ReferenceMode>,
    #[arg(long)]
    pca_k: Option<usize>,
    /// Fixed DBSCAN radius; when absent a log grid is swept
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps_min: Option<f64>,
    #[arg(long)]
    eps_max: Option<f64>,
    #[arg(long)]
    eps_steps: Option<usize>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// Clip explanation magnitudes at the 99.9th percentile before PCA
    #[arg(long)]
    winsorize: Option<bool>,
    /// Flag when second/largest cluster size reaches this ratio
    #[arg(long)]
    min_ratio: Option<f64>,
    /// ... and the second cluster has at least this many members
    #[arg(long)]
    min_second: Option<usize>,
}

fn parse_bridge(s: &str) -> std::result::Result<[u16; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.parse().map_err(|e| format!("bad label `{a}`: {e}"))?,
            b.parse().map_err(|e| format!("bad label `{b}`: {e}"))?,
        ]),
        _ => Err(format!("expected two labels `A,B`, got `{s}`")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_reference(s: &str) -> std::result::Result<ReferenceMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn put<T: Serialize>(m: &mut Map<String, Value>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

impl DataFlags {
    fn collect(&self, m: &mut Map<String, Value>) {
        put(m, "dataset", &self.dataset);
        put(m, "data_dir", &self.data_dir);
        put(m, "bridge", &self.bridge);
        put(m, "split", &self.split);
        put(m, "subset", &self.subset);
        put(m, "test_fraction", &self.test_fraction);
        put(m, "synthetic_classes", &self.synthetic_classes);
        put(m, "synthetic_dims", &self.synthetic_dims);
        put(m, "synthetic_per_class", &self.synthetic_per_class);
        put(m, "centroid_scale", &self.centroid_scale);
        put(m, "noise_sigma", &self.noise_sigma);
        put(m, "seed", &self.seed);
    }
}

impl TrainFlags {
    fn collect(&self, m: &mut Map<String, Value>) {
        put(m, "hidden", &self.hidden);
        put(m, "epochs", &self.epochs);
        put(m, "batch", &self.batch);
        put(m, "lr", &self.lr);
        put(m, "momentum", &self.momentum);
    }
}

impl AnalysisFlags {
    fn collect(&self, m: &mut Map<String, Value>) {
        put(m, "method", &self.method);
        put(m, "reference", &self.reference);
        put(m, "pca_k", &self.pca_k);
        put(m, "eps", &self.eps);
        put(m, "eps_min", &self.eps_min);
        put(m, "eps_max", &self.eps_max);
        put(m, "eps_steps", &self.eps_steps);
        put(m, "min_pts", &self.min_pts);
        put(m, "winsorize", &self.winsorize);
        put(m, "min_ratio", &self.min_ratio);
        put(m, "min_second", &self.min_second);
    }
}

fn settings(
    config: Option<&Path>,
    data: &DataFlags,
    train: Option<&TrainFlags>,
    analysis: Option<&AnalysisFlags>,
) -> Result<Settings> {
    let mut m = Map::new();
    data.collect(&mut m);
    if let Some(t) = train {
        t.collect(&mut m);
    }
    if let Some(a) = analysis {
        a.collect(&mut m);
    }
    let s = resolve(config, m)?;
    println!("effective config: {}", serde_json::to_string(&s)?);
    Ok(s)
}

/// Train/test splits with the optional bridge applied to both.
fn load_data(s: &Settings) -> Result<(Dataset, Dataset)> {
    let (train, test) = s.load()?;
    match s.bridge_spec() {
        Some(spec) => bridge_pair(&train, &test, spec),
        None => Ok((train, test)),
    }
}

fn print_report(report: &FragmentationReport, members: &[Vec<u16>]) {
    println!("eps: {}  min_pts: {}", report.params.eps, report.params.min_pts);
    println!("class  members    count  noise  score   variance      clusters");
    for c in &report.classes {
        let m = members
            .get(c.class as usize)
            .map(|m| m.iter().map(u16::to_string).collect::<Vec<_>>().join("+"))
            .unwrap_or_default();
        println!(
            "{:>5}  {:<9} {:>6} {:>6}  {:<6.3}  {:<12.5e}  {:?}{}",
            c.class,
            m,
            c.count,
            c.noise_count,
            c.fragmentation_score,
            c.within_class_variance,
            c.cluster_histogram,
            if c.flagged { "  FLAGGED" } else { "" }
        );
    }
    println!("flagged classes: {:?}", report.flagged_classes());
}

fn cmd_train(s: &Settings, out: &Path) -> Result<()> {
    let (train, test) = load_data(s)?;
    println!(
        "dataset: {}  classes: {}  train: {}  test: {}",
        train.name,
        train.num_classes,
        train.len(),
        test.len()
    );
    let (mut model, curve) = train_model(&train, &test, &s.experiment())?;
    for (i, loss) in curve.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.5}", i + 1);
    }
    model.metadata.dataset = Some(train.name.clone());
    model.metadata.num_classes = Some(train.num_classes);
    save_model(&model, out)?;
    let acc = model.metadata.test_accuracy.unwrap_or(f32::NAN);
    println!("test accuracy: {:.4} ({:.2}%)", acc, acc * 100.0);
    println!("model written to {}", out.display());
    Ok(())
}

fn check_model_classes(model_classes: usize, ds: &Dataset) -> Result<()> {
    if model_classes != ds.num_classes {
        return Err(Error::invalid(format!(
            "model predicts {model_classes} classes but the dataset has {} (check --bridge)",
            ds.num_classes
        )));
    }
    Ok(())
}

fn cmd_analyze(s: &Settings, model_path: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let (train, test) = load_data(s)?;
    check_model_classes(model.output_dim(), &train)?;
    let ds = s.pick(&train, &test)?;
    let artifact = pipeline_artifact(&model, &ds, Some(&train.instances), s.bridge_spec(), &s.experiment())?;
    let dir = save_run(&artifact, out)?;
    print_report(&artifact.report, &artifact.manifest.dataset.class_members);
    println!("run {} written to {}", artifact.run_id(), dir.display());
    Ok(())
}

fn cmd_baseline(s: &Settings, out: &Path) -> Result<()> {
    let (train, test) = load_data(s)?;
    let ds = s.pick(&train, &test)?;
    let artifact = baseline_artifact(&ds, s.bridge_spec(), &s.experiment())?;
    let dir = save_run(&artifact, out)?;
    print_report(&artifact.report, &artifact.manifest.dataset.class_members);
    println!("run {} written to {}", artifact.run_id(), dir.display());
    Ok(())
}

fn cmd_sweep(s: &Settings, model_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (train, test) = load_data(s)?;
    let ds = s.pick(&train, &test)?;
    let grid = match s.eps {
        Some(e) => vec![e],
        None => s.eps_grid(),
    };
    let analysis = AnalysisConfig {
        pca_k: s.pca_k,
        cluster: ClusterParams::new(grid[0], s.min_pts)?,
        winsorize: s.winsorize,
        thresholds: s.experiment().thresholds,
    };
    let model = model_path.map(load_model).transpose()?;
    let (projections, groups) = match &model {
        Some(model) => {
            check_model_classes(model.output_dim(), &train)?;
            let cfg = PipelineConfig {
                method: s.method,
                reference_mode: s.reference,
                analysis: analysis.clone(),
            };
            let run = run_pipeline(model, &ds, Some(&train.instances), &cfg)?;
            (run.analysis.projections, run.analysis.groups)
        }
        None => {
            let run = run_baseline(&ds, &analysis)?;
            (run.analysis.projections, run.analysis.groups)
        }
    };
    let sweep = sweep_epsilon(
        &projections,
        &groups,
        ds.num_classes,
        &grid,
        s.min_pts,
        &analysis.thresholds,
    )?;
    println!("eps           noise   separation  admissible  flagged  max_score");
    for r in &sweep.rows {
        let max = r.scores.iter().copied().fold(0.0f64, f64::max);
        println!(
            "{:<12.6e}  {:<6.3}  {:<10.4}  {:<10}  {:<7}  {:.4}",
            r.eps,
            r.noise_fraction,
            r.separation,
            r.admissible,
            format!("{:?}", r.flagged),
            max
        );
    }
    let Some(chosen) = sweep.chosen_eps else {
        println!("chosen eps: none");
        return Err(Error::NoAdmissibleEps);
    };
    println!("chosen eps: {chosen}");
    if let Some(out) = out {
        let mut cfg = s.experiment();
        cfg.eps = introspect_core::experiment::EpsChoice::Sweep(grid);
        let artifact = match &model {
            Some(model) => pipeline_artifact(model, &ds, Some(&train.instances), s.bridge_spec(), &cfg)?,
            None => baseline_artifact(&ds, s.bridge_spec(), &cfg)?,
        };
        let dir = save_run(&artifact, out)?;
        println!("run {} written to {}", artifact.run_id(), dir.display());
    }
    Ok(())
}

fn cmd_pairs(s: &Settings, out: &Path) -> Result<()> {
    if s.bridge.is_some() {
        return Err(Error::invalid("pairs bridges every label pair itself; drop --bridge"));
    }
    let (train, test) = s.load()?;
    let outcomes = sweep_bridges(&train, &test, &s.experiment(), out, s.jobs)?;
    println!("pair    bridged  accuracy  flagged     status  run");
    for o in &outcomes {
        println!(
            "{:<6}  {:>7}  {:<8}  {:<10}  {:<6}  {}",
            format!("{},{}", o.bridge.keep_label, o.bridge.absorb_label),
            o.bridged_class,
            o.test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            format!("{:?}", o.flagged),
            if o.reused { "reused" } else { "new" },
            o.run_id
        );
    }
    println!("{} pairs, {} artifacts in {}", outcomes.len(), outcomes.len(), out.display());
    Ok(())
}

fn cmd_serve(addr: SocketAddr, runs_dir: PathBuf, static_dir: Option<PathBuf>) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::invalid(format!("runtime: {e}")))?;
    rt.block_on(introspect_service::serve(addr, runs_dir, static_dir))
        .map_err(|e| Error::invalid(format!("cannot serve on {addr}: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            train,
            config,
            out,
        } => {
            let s = settings(config.as_deref(), &data, Some(&train), None)?;
            cmd_train(&s, &out)
        }
        Command::Analyze {
            model,
            data,
            analysis,
            config,
            out,
        } => {
            let s = settings(config.as_deref(), &data, None, Some(&analysis))?;
            cmd_analyze(&s, &model, &out)
        }
        Command::Baseline {
            data,
            analysis,
            config,
            out,
        } => {
            let s = settings(config.as_deref(), &data, None, Some(&analysis))?;
            cmd_baseline(&s, &out)
        }
        Command::Sweep {
            model,
            data,
            analysis,
            config,
            out,
        } => {
            let s = settings(config.as_deref(), &data, None, Some(&analysis))?;
            cmd_sweep(&s, model.as_deref(), out.as_deref())
        }
        Command::Pairs {
            data,
            train,
            analysis,
            jobs,
            config,
            out,
        } => {
            let mut m = Map::new();
            put(&mut m, "jobs", &jobs);
            data.collect(&mut m);
            train.collect(&mut m);
            analysis.collect(&mut m);
            let s = resolve(config.as_deref(), m)?;
            println!("effective config: {}", serde_json::to_string(&s)?);
            cmd_pairs(&s, &out)
        }
        Command::Serve {
            port,
            host,
            runs_dir,
            static_dir,
        } => {
            println!(
                "effective config: {}",
                serde_json::json!({ "host": host, "port": port, "runs_dir": runs_dir, "static_dir": static_dir })
            );
            cmd_serve(SocketAddr::new(host, port), runs_dir, static_dir)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Argument => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line front end: fit and sample pose distributions, run refinement
//! campaigns, score predictions and check loss gradients.

mod manifest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use posefocal::losses::{gradient_check, random_case, LossWeights, DEFAULT_LOSS_POINTS};
use posefocal::metrics::{self, Thresholds};
use posefocal::sampling::{fit_parametric, select_deltas_95pct, PoseDistribution};
use posefocal::simulator::{run_experiment, ExperimentConfig};
use posefocal::{io, rng_for, ModelPoints};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use manifest::RunManifest;

const EXPERIMENT_SCHEMA: &str = include_str!("../schemas/experiment.schema.json");

/// Relative gradient error above which `gradcheck` fails.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "posefocal", version, about = "Pose and focal length refinement toolkit")]
struct Cli {
    /// Base seed of every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DistKind {
    Parametric,
    Nonparametric,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a pose/focal distribution to a JSON-lines annotation file.
    FitDist {
        annotations: PathBuf,
        #[arg(long, value_enum)]
        kind: DistKind,
    },
    /// Draw poses from a distribution document.
    Sample {
        distribution: PathBuf,
        #[arg(short, long)]
        n: usize,
    },
    /// Run a paired refinement campaign described by --config.
    Simulate,
    /// Score a JSON-lines file of prediction/ground-truth pairs.
    Evaluate {
        pairs: PathBuf,
        /// Also write CSV histograms of every metric here.
        #[arg(long)]
        histograms: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        /// Number of random points.
        #[arg(short, long, default_value_t = 100)]
        n: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        /// Model points per loss evaluation.
        #[arg(long, default_value_t = DEFAULT_LOSS_POINTS)]
        points: usize,
    },
    /// Print the JSON schema of the simulate configuration.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::FitDist { annotations, kind } => fit_dist(cli, seed, annotations, *kind),
        Command::Sample { distribution, n } => sample(cli, seed, distribution, *n),
        Command::Simulate => simulate(cli),
        Command::Evaluate { pairs, histograms } => evaluate(cli, seed, pairs, histograms.as_deref()),
        Command::Gradcheck { n, h, points } => gradcheck(cli, seed, *n, *h, *points),
        Command::Schema => {
            emit(cli.out.as_deref(), EXPERIMENT_SCHEMA)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Deserializes JSON, reporting the path of the offending field.
fn parse_with_path<T: DeserializeOwned>(text: &str, source: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        anyhow!(
            "{}: invalid value at `{}`: {}",
            source.display(),
            e.path(),
            e.inner()
        )
    })
}

/// Optional `--config` document, recorded in the manifest.
fn load_config<T: DeserializeOwned + Default>(cli: &Cli, manifest: &mut RunManifest) -> Result<T> {
    match &cli.config {
        Some(path) => {
            let text = manifest.read_input(path)?;
            parse_with_path(&text, path)
        }
        None => Ok(T::default()),
    }
}

fn json_only(cli: &Cli, command: &str) -> Result<()> {
    if cli.format == Format::Csv {
        bail!("{command} only writes JSON");
    }
    Ok(())
}

fn fit_dist(cli: &Cli, seed: u64, path: &Path, kind: DistKind) -> Result<ExitCode> {
    json_only(cli, "fit-dist")?;
    let mut manifest = RunManifest::new("fit-dist", seed, json!({ "kind": kind }));
    let text = manifest.read_input(path)?;
    let records = io::parse_annotations(&text).with_context(|| format!("reading {}", path.display()))?;
    let distribution = match kind {
        DistKind::Parametric => PoseDistribution::Parametric(Box::new(fit_parametric(&records)?)),
        DistKind::Nonparametric => PoseDistribution::Nonparametric {
            deltas: select_deltas_95pct(&records)?,
            records,
        },
    };
    emit(
        cli.out.as_deref(),
        &to_json(&json!({ "manifest": manifest, "distribution": distribution })),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct DistributionDocument {
    distribution: serde_json::Value,
}

fn sample(cli: &Cli, seed: u64, path: &Path, n: usize) -> Result<ExitCode> {
    let mut manifest = RunManifest::new("sample", seed, json!({ "n": n }));
    let text = manifest.read_input(path)?;
    // Accept a fit-dist output document or a bare distribution.
    let body = match serde_json::from_str::<DistributionDocument>(&text) {
        Ok(doc) => doc.distribution.to_string(),
        Err(_) => text,
    };
    let distribution: PoseDistribution = parse_with_path(&body, path)?;
    let poses = distribution.sample(n, seed)?;
    let mut out = String::new();
    match cli.format {
        Format::Json => {
            out.push_str(&serde_json::to_string(&json!({ "manifest": manifest }))?);
            out.push('\n');
            for p in &poses {
                out.push_str(&serde_json::to_string(p)?);
                out.push('\n');
            }
        }
        Format::Csv => {
            out.push_str(&manifest.csv_comment());
            out.push_str("qw,qx,qy,qz,tx_m,ty_m,tz_m,f_px\n");
            for p in &poses {
                let [w, x, y, z] = p.rotation.wxyz();
                let t = p.translation;
                writeln!(out, "{w},{x},{y},{z},{},{},{},{}", t.x, t.y, t.z, p.focal)?;
            }
        }
    }
    emit(cli.out.as_deref(), &out)?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(cli: &Cli) -> Result<ExitCode> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("simulate needs --config"))?;
    let mut manifest = RunManifest::new("simulate", 0, serde_json::Value::Null);
    let text = manifest.read_input(path)?;
    let mut config: ExperimentConfig = parse_with_path(&text, path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    manifest.seed = config.seed;
    manifest.config = serde_json::to_value(&config)?;
    let report = run_experiment(&config)?;
    let out = match cli.format {
        Format::Json => to_json(&json!({ "manifest": manifest, "report": report })),
        Format::Csv => manifest.csv_comment() + &report.medians_csv(),
    };
    emit(cli.out.as_deref(), &out)?;
    Ok(ExitCode::SUCCESS)
}

fn evaluate(cli: &Cli, seed: u64, path: &Path, histograms: Option<&Path>) -> Result<ExitCode> {
    let mut manifest = RunManifest::new("evaluate", seed, serde_json::Value::Null);
    let thresholds: Thresholds = load_config(cli, &mut manifest)?;
    manifest.config = serde_json::to_value(thresholds)?;
    let text = manifest.read_input(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cache: HashMap<String, ModelPoints> = HashMap::new();
    let mut model_inputs = Vec::new();
    let pairs = io::parse_pairs(&text, |name| {
        if let Some(points) = cache.get(name) {
            return Ok(Some(points.clone()));
        }
        let file = base.join(name);
        let Ok(bytes) = std::fs::read(&file) else {
            return Ok(None);
        };
        let points = ModelPoints::load(&file)?;
        model_inputs.push((file, bytes));
        cache.insert(name.to_string(), points.clone());
        Ok(Some(points))
    })
    .with_context(|| format!("reading {}", path.display()))?;
    for (file, bytes) in &model_inputs {
        manifest.add_input(file, bytes);
    }

    let records = metrics::evaluate_pairs(&pairs)?;
    let summary = metrics::aggregate(&records, &thresholds)?;
    let out = match cli.format {
        Format::Json => to_json(&json!({ "manifest": manifest, "summary": summary, "records": records })),
        Format::Csv => {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let mut s = manifest.csv_comment();
            s.push_str("count,median_e_r,acc_r,median_e_t,median_e_rt,median_e_f,median_e_p,acc_p,acc_d\n");
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                summary.count,
                summary.median_e_r,
                summary.acc_r,
                summary.median_e_t,
                summary.median_e_rt,
                summary.median_e_f,
                opt(summary.median_e_p),
                summary.acc_p,
                opt(summary.acc_d)
            )?;
            s
        }
    };
    emit(cli.out.as_deref(), &out)?;
    if let Some(h) = histograms {
        emit(Some(h), &(manifest.csv_comment() + &metrics::histograms_csv(&records)))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradPoint {
    index: usize,
    value: f64,
    max_rel_error: f64,
    smooth: bool,
    kinks: Vec<String>,
}

fn gradcheck(cli: &Cli, seed: u64, n: usize, h: f64, n_points: usize) -> Result<ExitCode> {
    let mut manifest = RunManifest::new("gradcheck", seed, serde_json::Value::Null);
    let weights: LossWeights = load_config(cli, &mut manifest)?;
    weights.validate()?;
    manifest.config = json!({ "n": n, "h": h, "points": n_points, "weights": weights });

    let points: Vec<GradPoint> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let (mut problem, delta) = random_case(&mut rng, n_points)?;
            problem.weights = weights;
            let r = gradient_check(|d| problem.total_objective(d), &delta, h)?;
            Ok(GradPoint {
                index: i,
                value: r.value,
                max_rel_error: r.max_rel_error,
                smooth: r.smooth,
                kinks: r.kinks,
            })
        })
        .collect::<posefocal::Result<_>>()?;

    let smooth: Vec<&GradPoint> = points.iter().filter(|p| p.smooth).collect();
    let worst = smooth.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let passed = worst <= GRADCHECK_TOLERANCE;
    let out = match cli.format {
        Format::Json => to_json(&json!({
            "manifest": manifest,
            "summary": {
                "points": points.len(),
                "smooth": smooth.len(),
                "non_smooth": points.len() - smooth.len(),
                "max_rel_error_smooth": worst,
                "tolerance": GRADCHECK_TOLERANCE,
                "passed": passed,
            },
            "points": points,
        })),
        Format::Csv => {
            let mut s = manifest.csv_comment();
            s.push_str("index,value,max_rel_error,smooth,kinks\n");
            for p in &points {
                writeln!(s, "{},{},{},{},{}", p.index, p.value, p.max_rel_error, p.smooth, p.kinks.join(" "))?;
            }
            s
        }
    };
    emit(cli.out.as_deref(), &out)?;
    if !passed {
        eprintln!("gradient check failed: max relative error {worst:e} > {GRADCHECK_TOLERANCE:e}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use faasml::config::{load_constants, ConfigFile};
use faasml::costmodel::{
    estimate_epochs, faas_time, iaas_time, sweep, sweep_csv, variant_cost, CostModelParams, EstimateSpec, FaasChannel,
    Infra, Scenario,
};
use faasml::optim::Algorithm;
use faasml::ps::{PsCore, PsServer};
use faasml::runtime::{calibrate_compute, run_job_with_data};
use faasml::{Error, ModelKind, Pattern};

#[derive(Parser)]
#[command(
    name = "faasml",
    version,
    about = "Serverless-style distributed ML training and cost modelling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write report.json and trace.csv.
    Train(TrainArgs),
    /// Evaluate the FaaS/IaaS cost model over worker counts.
    Model(ModelArgs),
    /// Estimate epochs to converge from a data sample and predict end-to-end time.
    Estimate(EstimateArgs),
    /// Run a standalone parameter server.
    PsServe(PsServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// real_local or simulate
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// ga_sgd, ma_sgd, admm or kmeans_em
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    channel: Option<String>,
    /// allreduce, scatterreduce or ps
    #[arg(long)]
    pattern: Option<String>,
    /// bsp or asp
    #[arg(long)]
    sync: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and trace.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Constants file: an experiment file or a bare table of cost-model fields.
    #[arg(long)]
    constants: Option<PathBuf>,
    /// Comma-separated worker counts, e.g. 1,10,50.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, default_value = "baseline")]
    scenario: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    sample_frac: f64,
    /// Also run the configured job and report its actual epochs and time.
    #[arg(long)]
    actual: bool,
}

#[derive(Args)]
struct PsServeArgs {
    /// Model dimension.
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Pushes that complete a round.
    #[arg(long)]
    workers: usize,
    #[arg(long, default_value = "127.0.0.1:7000")]
    bind: String,
    /// Seconds a round waits for missing pushes.
    #[arg(long, default_value_t = 600.0)]
    timeout_s: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Model(a) => model(a).map(|_| ExitCode::SUCCESS),
        Command::Estimate(a) => estimate(a).map(|_| ExitCode::SUCCESS),
        Command::PsServe(a) => ps_serve(a).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}

/// Parses a flag through the enum's serde names so flags and config files agree.
fn parse_name<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(Value::String(value.to_string())).map_err(|e| anyhow!("--{flag}: {e}"))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let mut cfg = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut job = load_config(a.config.as_deref())?.job;
    if let Some(m) = &a.mode {
        job.mode = parse_name("mode", m)?;
    }
    if let Some(w) = a.workers {
        job.workers = w;
    }
    if let Some(alg) = &a.algorithm {
        job.algorithm = parse_name("algorithm", alg)?;
    }
    if let Some(c) = &a.channel {
        job.channel = c.clone();
        job.channel_profile = None;
    }
    if let Some(p) = &a.pattern {
        job.pattern = p.parse::<Pattern>().map_err(|e| anyhow!("--pattern: {e}"))?;
    }
    if let Some(s) = &a.sync {
        job.sync = parse_name("sync", s)?;
    }
    if let Some(s) = a.seed {
        job.seed = s;
    }
    job.validate()?;
    let data = Arc::new(job.load_dataset()?);
    let report = run_job_with_data(&job, data)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report_path = a.out.join("report.json");
    std::fs::write(&report_path, report.to_json()? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    let trace_path = a.out.join("trace.csv");
    std::fs::write(&trace_path, report.trace_csv()).with_context(|| format!("writing {}", trace_path.display()))?;

    println!(
        "converged={} epochs={} rounds={} final_loss={:.6} total_s={:.3} cost_usd={:.6}",
        report.converged,
        report.epochs,
        report.rounds,
        report.final_loss,
        report.breakdown.total_s,
        report.dollar_cost_usd
    );
    Ok(if report.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn parse_w_list(s: &str) -> Result<Vec<usize>> {
    let ws = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("--sweep: bad worker count {t:?}: {e}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if ws.is_empty() || ws.contains(&0) {
        bail!("--sweep: worker counts must be >= 1");
    }
    Ok(ws)
}

fn model(a: ModelArgs) -> Result<()> {
    let p = match &a.constants {
        Some(path) => load_constants(path)?,
        None => CostModelParams::default(),
    };
    let scenario = Scenario::named(&a.scenario)?;
    let ws = match &a.sweep {
        Some(s) => parse_w_list(s)?,
        None => vec![p.w],
    };
    let csv = sweep_csv(&sweep(&p, &ws, &scenario)?);
    match &a.out {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let job = cfg.job;
    let data = Arc::new(job.load_dataset()?);
    let kind = job.model_kind();
    let dim = kind.dim(data.n_features());
    let compute = match job.compute_s_per_epoch {
        Some(c) => c,
        None => calibrate_compute(&job, &data)?,
    };
    let mut p = cfg.costmodel;
    p.s = data.size_bytes() as f64 / 1e6;
    p.m = (dim * 8) as f64 / 1e6;
    p.w = job.workers;
    p.c_faas = compute;
    p.c_iaas = compute;
    p.channel = if job.channel.starts_with("elasticache") {
        FaasChannel::Ec
    } else {
        FaasChannel::S3
    };
    p.channel_startup_s = job.channel_profile()?.startup_s;

    let algorithms = match kind {
        ModelKind::KMeans { .. } => vec![Algorithm::KmeansEm],
        _ => vec![Algorithm::GaSgd, Algorithm::Admm],
    };
    let per_worker_rows = data.n_rows().div_ceil(job.workers);
    let mut out = json!({
        "dataset_mb": p.s,
        "model_mb": p.m,
        "workers": p.w,
        "sample_frac": a.sample_frac,
        "compute_s_per_epoch": compute,
        "R_sgd": Value::Null,
        "R_admm": Value::Null,
    });
    let mut predictions = Vec::new();
    for alg in algorithms {
        let spec = EstimateSpec {
            model: kind,
            algorithm: alg,
            eta: job.eta,
            batch_size: job.batch_size,
            local_epochs: job.local_epochs,
            rho: job.rho,
            lambda: job.lambda,
            threshold: job.threshold,
            sample_frac: a.sample_frac,
            seed: job.seed,
            max_epochs: job.max_epochs,
        };
        let field = match alg {
            Algorithm::GaSgd => "R_sgd",
            Algorithm::Admm => "R_admm",
            _ => "R_kmeans",
        };
        let epochs = match estimate_epochs(&data, &spec) {
            Ok(r) => r,
            Err(e @ Error::EstimateFailed { .. }) => {
                out[field] = Value::Null;
                predictions.push(json!({ "algorithm": alg.name(), "error": e.to_string() }));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        out[field] = json!(epochs);
        let mut q = p.clone();
        q.r_faas = epochs as f64;
        q.r_iaas = epochs as f64;
        q.rounds_per_epoch = match alg {
            Algorithm::GaSgd | Algorithm::MaSgd => per_worker_rows.div_ceil(job.batch_size).max(1) as f64,
            Algorithm::Admm => 1.0 / job.local_epochs as f64,
            Algorithm::KmeansEm => 1.0,
        };
        let faas = faas_time(&q)?;
        let iaas = iaas_time(&q)?;
        predictions.push(json!({
            "algorithm": alg.name(),
            "epochs": epochs,
            "faas": faas,
            "faas_cost_usd": variant_cost(&q, Infra::Faas, faas.total_s),
            "iaas": iaas,
            "iaas_cost_usd": variant_cost(&q, Infra::Iaas, iaas.total_s),
        }));
    }
    out["predictions"] = Value::Array(predictions);
    if a.actual {
        let report = run_job_with_data(&job, data.clone())?;
        out["actual"] = json!({
            "algorithm": job.algorithm.name(),
            "converged": report.converged,
            "epochs": report.epochs,
            "total_s": report.breakdown.total_s,
        });
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn ps_serve(a: PsServeArgs) -> Result<()> {
    if !(a.timeout_s > 0.0) {
        bail!("--timeout-s must be > 0");
    }
    let core = PsCore::new(a.dim, a.eta, a.workers)?.with_timeout(std::time::Duration::from_secs_f64(a.timeout_s));
    let server = PsServer::start(Arc::new(core), a.bind.as_str())?;
    println!("listening on {}", server.local_addr());
    server.wait();
    Ok(())
}

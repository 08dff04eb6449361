//! Job execution: starter, worker ranks, synchronous and asynchronous training, report.

mod asp;
mod checkpoint;
mod config;
mod report;
mod starter;
mod worker;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::clock::{ClockMode, VirtualClock};
use crate::collective::{encoded_len, Pattern};
use crate::costmodel::{dollar_cost, Infra};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{kmeans_assign_stats, ModelKind};
use crate::optim::initial_model;
use crate::ps::{PsCore, PsServer};
use crate::storage::{BlobStore, FsStore, MemStore, StoreTrace, TraceEvent};

pub use self::asp::{asp_local_epoch, asp_read, asp_step, asp_write, GLOBAL_MODEL_KEY};
pub use self::checkpoint::Checkpoint;
pub use self::config::{DataSource, JobConfig, Mode, ModelName, Straggler, SyncMode, DEFAULT_COMPUTE_S_PER_VALUE};
pub use self::report::{JobReport, Monitor, TracePoint, WorkerSummary, REPORT_SCHEMA, TRACE_HEADER};
pub use self::starter::{
    decode_partition, encode_partition, partition_key, read_manifest, starter, WorkerHandle, MANIFEST_KEY,
};

use self::report::metric_value;
use self::worker::{run_bsp_rank, JobShared, PsEndpoint, RankOutcome};

/// Loads the configured dataset and runs the job.
pub fn run_job(cfg: &JobConfig) -> Result<JobReport> {
    cfg.validate()?;
    let data = Arc::new(cfg.load_dataset()?);
    run_job_with_data(cfg, data)
}

/// Runs the job on an already loaded dataset.
pub fn run_job_with_data(cfg: &JobConfig, data: Arc<Dataset>) -> Result<JobReport> {
    run_job_traced(cfg, data).map(|(r, _)| r)
}

/// Like [`run_job_with_data`], also returning every store operation the workers made.
pub fn run_job_traced(cfg: &JobConfig, data: Arc<Dataset>) -> Result<(JobReport, Vec<TraceEvent>)> {
    cfg.validate()?;
    let kind = cfg.model_kind();
    let n_rows = data.n_rows();
    if cfg.workers > n_rows {
        return Err(Error::config(
            "job.workers",
            format!("{} workers for {n_rows} rows leaves some without data", cfg.workers),
        ));
    }
    if let ModelKind::KMeans { k } = kind {
        if k > n_rows {
            return Err(Error::config("job.k", format!("k = {k} exceeds the {n_rows} rows")));
        }
    }
    let dim = kind.dim(data.n_features());
    let channel = cfg.channel_profile()?;
    let data_profile = cfg.data_profile()?;
    if let Some(limit) = channel.max_item_bytes {
        if encoded_len(dim) > limit {
            return Err(Error::PayloadTooLarge {
                size: encoded_len(dim),
                limit,
            });
        }
    }

    let (store, _tempdir): (Arc<dyn BlobStore>, Option<tempfile::TempDir>) = match cfg.mode {
        Mode::Simulate => (Arc::new(MemStore::new()), None),
        Mode::RealLocal => match &cfg.store_dir {
            Some(dir) => (Arc::new(FsStore::new(dir)?), None),
            None => {
                let dir = tempfile::tempdir()?;
                (Arc::new(FsStore::new(dir.path())?), Some(dir))
            }
        },
    };
    let handles = starter(&data, cfg.workers, store.as_ref())?;
    let iters_per_epoch = handles
        .iter()
        .map(|h| h.partition.rows.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(1)
        .max(1);

    let clock_mode = match cfg.mode {
        Mode::Simulate => ClockMode::Virtual,
        Mode::RealLocal => ClockMode::Real,
    };
    let cancel = Arc::new(AtomicBool::new(false));
    let wait = Duration::from_secs_f64(cfg.wait_timeout_s);
    let mut server = None;
    let ps = match cfg.pattern {
        Pattern::Ps => {
            let update_s = cfg.ps_update_s_per_mb * encoded_len(dim) as f64 / 1e6;
            let core = PsCore::new(dim, cfg.eta, cfg.workers)?
                .with_update_cost(update_s)
                .with_timeout(wait)
                .with_cancel(cancel.clone());
            match (cfg.mode, &cfg.ps_address) {
                (Mode::Simulate, _) => Some(PsEndpoint::Local(Arc::new(core))),
                (Mode::RealLocal, Some(addr)) => Some(PsEndpoint::Remote(addr.clone())),
                (Mode::RealLocal, None) => {
                    let s = PsServer::start(Arc::new(core), "127.0.0.1:0")?;
                    let addr = s.local_addr().to_string();
                    server = Some(s);
                    Some(PsEndpoint::Remote(addr))
                }
            }
        }
        _ => None,
    };

    let sh = JobShared {
        cfg: cfg.clone(),
        kind,
        n_rows,
        dim,
        iters_per_epoch,
        init_model: initial_model(kind, &data, cfg.seed)?,
        monitor: Monitor::new(kind, data.clone(), cfg.record_models),
        timeline: VirtualClock::new(cfg.workers, clock_mode),
        trace: StoreTrace::new(),
        store: store.clone(),
        startup_s: cfg.faas_startup.at(cfg.workers).max(channel.startup_s),
        respawn_startup_s: cfg.faas_startup.at(1),
        channel,
        data_profile,
        cancel,
        ps,
        ps_transfers: AtomicU64::new(0),
        ps_bytes: AtomicU64::new(0),
        compute_s_per_epoch: cfg
            .compute_s_per_epoch
            .unwrap_or(DEFAULT_COMPUTE_S_PER_VALUE * n_rows as f64 * dim as f64),
    };

    let outcome = match (cfg.sync, cfg.mode) {
        (SyncMode::Bsp, _) => run_ranks(&sh, |rank| run_bsp_rank(&sh, rank)).map(|o| {
            let rounds = o[0].iterations;
            (o, rounds, None)
        }),
        (SyncMode::Asp, Mode::Simulate) => asp::run_simulated(&sh).map(|(o, c, conv)| (o, c, Some(conv))),
        (SyncMode::Asp, Mode::RealLocal) => asp::run_threads(&sh).map(|(o, c, conv)| (o, c, Some(conv))),
    };
    if let Some(mut s) = server {
        if outcome.is_err() {
            s.core().cancel();
        }
        s.shutdown();
    }
    let (outcomes, rounds, asp_converged) = outcome?;

    let model = match asp_converged {
        Some(_) => asp_read(store.as_ref(), &sh.init_model)?,
        None => outcomes[0].model.clone(),
    };
    let converged = asp_converged.unwrap_or(outcomes[0].converged);
    let eval = sh.monitor.evaluate(&model)?;
    let epochs = outcomes.iter().map(|o| o.epochs_done).max().unwrap_or(0);

    let workers: Vec<WorkerSummary> = outcomes
        .iter()
        .enumerate()
        .map(|(rank, o)| WorkerSummary {
            rank,
            iterations: o.iterations,
            respawns: o.respawns,
            breakdown: sh.timeline.worker(rank).breakdown(),
        })
        .collect();
    let critical = workers.iter().fold(&workers[0], |best, w| {
        if w.breakdown.total_s > best.breakdown.total_s {
            w
        } else {
            best
        }
    });
    let breakdown = critical.breakdown;
    let (infra, extras) = match cfg.pattern {
        Pattern::Ps => (Infra::Hybrid, 0.0),
        _ => (Infra::Faas, sh.channel.hourly_price_usd),
    };
    let report = JobReport {
        schema: REPORT_SCHEMA.into(),
        converged,
        epochs,
        rounds,
        final_loss: eval.loss,
        final_metric: metric_value(eval.metric),
        breakdown,
        bytes_transferred: sh.trace.bytes_transferred() as u64 + sh.ps_bytes.load(Ordering::Relaxed),
        transfers: sh.trace.transfers() as u64 + sh.ps_transfers.load(Ordering::Relaxed),
        dollar_cost_usd: dollar_cost(breakdown.total_s, cfg.workers, &cfg.pricing, infra, extras),
        respawns: workers.iter().map(|w| w.respawns).sum(),
        trace: sh.monitor.trace(),
        workers,
        admm_residuals: sh.monitor.residuals(),
        model,
        model_snapshots: sh.monitor.snapshots(),
    };
    Ok((report, sh.trace.events()))
}

/// Runs `body` for every rank on its own thread. The first failure cancels the others;
/// the lowest-rank failure that is not a cancellation is returned.
pub(crate) fn run_ranks<F>(sh: &JobShared, body: F) -> Result<Vec<RankOutcome>>
where
    F: Fn(usize) -> Result<RankOutcome> + Sync,
{
    let body = &body;
    let results: Vec<Result<RankOutcome>> = std::thread::scope(|s| {
        let mut handles = Vec::with_capacity(sh.cfg.workers);
        for rank in 0..sh.cfg.workers {
            let spawned = std::thread::Builder::new()
                .name(format!("worker-{rank}"))
                .spawn_scoped(s, move || {
                    let out = body(rank);
                    if out.is_err() {
                        sh.cancel.store(true, Ordering::SeqCst);
                        if let Some(PsEndpoint::Local(core)) = &sh.ps {
                            core.cancel();
                        }
                    }
                    out
                });
            match spawned {
                Ok(h) => handles.push(Ok(h)),
                Err(e) => {
                    sh.cancel.store(true, Ordering::SeqCst);
                    if let Some(PsEndpoint::Local(core)) = &sh.ps {
                        core.cancel();
                    }
                    handles.push(Err(Error::Launch {
                        rank,
                        message: e.to_string(),
                    }));
                }
            }
        }
        handles
            .into_iter()
            .map(|h| match h {
                Ok(h) => h
                    .join()
                    .unwrap_or_else(|_| Err(Error::Server("worker thread panicked".into()))),
                Err(e) => Err(e),
            })
            .collect()
    });
    let mut first_cancel = None;
    let mut ok = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(o) => ok.push(o),
            Err(Error::Cancelled) => first_cancel = first_cancel.or(Some(Error::Cancelled)),
            Err(e) => return Err(e),
        }
    }
    match first_cancel {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

/// Measures single-worker seconds per epoch for `cfg` on `data` from a real gradient
/// pass over up to 1000 rows; the result can be used as `compute_s_per_epoch`.
pub fn calibrate_compute(cfg: &JobConfig, data: &Dataset) -> Result<f64> {
    let kind = cfg.model_kind();
    let n = data.n_rows().min(1000);
    if n == 0 {
        return Err(Error::invalid("cannot calibrate on an empty dataset"));
    }
    let model = initial_model(kind, data, cfg.seed)?;
    let batch = Batch::range(data, 0..n);
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        match kind {
            ModelKind::KMeans { k } => {
                std::hint::black_box(kmeans_assign_stats(&model, k, &batch)?);
            }
            _ => {
                std::hint::black_box(kind.loss_grad(&model, &batch)?);
            }
        }
    }
    let per_row = start.elapsed().as_secs_f64() / (reps * n) as f64;
    Ok(per_row * data.n_rows() as f64)
}

//! One BSP worker rank: startup, data loading, the training loop, and checkpoint-driven
//! respawns when the function lifetime runs out.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::clock::{Phase, VirtualClock, WorkerClock};
use crate::collective::{bsp_round, encoded_len, CollectiveContext, Pattern, ReduceOp, Round};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{kmeans_assign_stats, ClusterStats, ModelKind, ModelVector};
use crate::optim::{
    admm_consensus_from_sum, admm_dual_update, admm_local_solve, epoch_batches, kmeans_centroids, lr_schedule,
    sgd_step, shuffle_seed, Algorithm, LocalSolver,
};
use crate::ps::{PsClient, PsCore, PsLink, SimulatedPs};
use crate::storage::{with_profile, BlobStore, ChannelProfile, InstrumentedStore, StoreTrace, TimedStore, WaitOptions};

use super::checkpoint::Checkpoint;
use super::config::JobConfig;
use super::report::Monitor;
use super::starter::{decode_partition, partition_key};

pub(crate) fn checkpoint_key(rank: usize) -> String {
    format!("ckpt/{rank}")
}

pub(crate) enum PsEndpoint {
    Local(Arc<PsCore>),
    Remote(String),
}

/// State shared by every rank of one job.
pub(crate) struct JobShared {
    pub cfg: JobConfig,
    pub kind: ModelKind,
    pub n_rows: usize,
    pub dim: usize,
    pub iters_per_epoch: usize,
    pub init_model: ModelVector,
    pub monitor: Monitor,
    pub timeline: Arc<VirtualClock>,
    pub trace: Arc<StoreTrace>,
    pub store: Arc<dyn BlobStore>,
    pub channel: ChannelProfile,
    pub data_profile: ChannelProfile,
    pub cancel: Arc<AtomicBool>,
    pub ps: Option<PsEndpoint>,
    pub ps_transfers: AtomicU64,
    pub ps_bytes: AtomicU64,
    pub compute_s_per_epoch: f64,
    pub startup_s: f64,
    pub respawn_startup_s: f64,
}

impl JobShared {
    pub fn wait_options(&self) -> WaitOptions {
        WaitOptions {
            timeout: Duration::from_secs_f64(self.cfg.wait_timeout_s),
            poll_interval: Duration::from_millis(5),
            cancel: Some(self.cancel.clone()),
        }
    }

    /// Epochs a non-GA round covers.
    pub fn epochs_per_round(&self) -> usize {
        match self.cfg.algorithm {
            Algorithm::KmeansEm => 1,
            _ => self.cfg.local_epochs,
        }
    }
}

pub(crate) struct RankOutcome {
    pub iterations: usize,
    pub respawns: usize,
    pub epochs_done: usize,
    pub converged: bool,
    pub model: ModelVector,
}

/// Training position. GA counts (epoch, iteration); the other algorithms use `epoch` as
/// the round index and leave `iter` at 0.
#[derive(Clone)]
struct Progress {
    epoch: u64,
    iter: u64,
    model: ModelVector,
    dual: ModelVector,
    consensus: ModelVector,
    epochs_done: usize,
    finished: bool,
    converged: bool,
}

/// A live function instance of one rank.
pub(crate) struct Worker<'a> {
    pub sh: &'a JobShared,
    pub rank: usize,
    pub clock: Arc<WorkerClock>,
    pub channel_store: InstrumentedStore<TimedStore>,
    pub data_store: TimedStore,
    pub local: Dataset,
    ps: Option<Box<dyn PsLink>>,
    factor: f64,
    plan: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Worker<'a> {
    /// Starts an instance: startup delay, partition download and, for the parameter
    /// server pattern, a connection.
    pub fn spawn(sh: &'a JobShared, rank: usize, clock: Arc<WorkerClock>, respawn: bool) -> Result<Worker<'a>> {
        clock.start_instance();
        if clock.is_virtual() {
            clock.charge(
                Phase::Startup,
                if respawn { sh.respawn_startup_s } else { sh.startup_s },
            );
        }
        let timed = with_profile(sh.store.clone(), sh.channel.clone(), clock.clone(), sh.timeline.clone());
        let channel_store = InstrumentedStore::new(timed, rank, sh.trace.clone()).with_clock(clock.clone());
        let data_store = with_profile(
            sh.store.clone(),
            sh.data_profile.clone(),
            clock.clone(),
            sh.timeline.clone(),
        );

        clock.set_store_phase(Phase::Loading);
        let bytes = clock.measure(Phase::Loading, None, || data_store.get(&partition_key(rank)));
        clock.set_store_phase(Phase::Communication);
        let bytes = bytes?.ok_or_else(|| Error::Launch {
            rank,
            message: format!("{} is missing", partition_key(rank)),
        })?;
        let local = decode_partition(&bytes)?;

        let ps: Option<Box<dyn PsLink>> = match &sh.ps {
            None => None,
            Some(PsEndpoint::Local(core)) => Some(Box::new(SimulatedPs::new(
                core.clone(),
                sh.channel.clone(),
                clock.clone(),
            ))),
            Some(PsEndpoint::Remote(addr)) => Some(Box::new(PsClient::connect(addr.as_str()).map_err(|e| {
                Error::Launch {
                    rank,
                    message: format!("cannot reach parameter server {addr}: {e}"),
                }
            })?)),
        };
        Ok(Worker {
            sh,
            rank,
            clock,
            channel_store,
            data_store,
            local,
            ps,
            factor: sh.cfg.straggler_factor(rank),
            plan: None,
        })
    }

    /// Runs `f` as `passes` passes over `rows` rows of compute.
    pub fn compute<T>(&self, rows: usize, passes: usize, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let modeled = self.sh.compute_s_per_epoch * (rows * passes) as f64 / self.sh.n_rows as f64 * self.factor;
        let real = !self.clock.is_virtual();
        self.clock.measure(Phase::Compute, Some(modeled), || {
            let start = Instant::now();
            let out = f();
            if real && self.factor > 1.0 {
                std::thread::sleep(start.elapsed().mul_f64(self.factor - 1.0));
            }
            out
        })
    }

    fn reduce(
        &self,
        round: Round,
        previous: Option<Round>,
        op: ReduceOp,
        v: &ModelVector,
        weight: f64,
    ) -> Result<ModelVector> {
        let mut ctx = CollectiveContext::new(
            &self.channel_store,
            self.sh.cfg.workers,
            self.rank,
            round.epoch,
            round.iter,
            op,
        )?;
        ctx.wait = self.sh.wait_options();
        ctx.previous = previous;
        let pattern = match self.sh.cfg.pattern {
            Pattern::Ps => Pattern::AllReduce,
            p => p,
        };
        self.clock
            .measure(Phase::Communication, None, || bsp_round(&ctx, pattern, v, weight))
    }

    fn save(&self, p: &Progress) -> Result<()> {
        let state = match self.sh.cfg.algorithm {
            Algorithm::Admm => vec![p.dual.clone(), p.consensus.clone()],
            _ => Vec::new(),
        };
        let ck = Checkpoint {
            worker_id: self.rank as u32,
            epoch: p.epoch as u32,
            iter: p.iter as u32,
            model: p.model.clone(),
            state,
        };
        let bytes = ck.encode()?;
        self.clock.measure(Phase::Communication, None, || {
            self.data_store.put(&checkpoint_key(self.rank), &bytes)
        })
    }

    fn restore(&self) -> Result<Progress> {
        self.clock.set_store_phase(Phase::Loading);
        let bytes = self
            .clock
            .measure(Phase::Loading, None, || self.data_store.get(&checkpoint_key(self.rank)));
        self.clock.set_store_phase(Phase::Communication);
        let bytes =
            bytes?.ok_or_else(|| Error::CorruptCheckpoint(format!("{} is missing", checkpoint_key(self.rank))))?;
        let ck = Checkpoint::decode(&bytes)?;
        if ck.worker_id as usize != self.rank {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint of worker {} read by {}",
                ck.worker_id, self.rank
            )));
        }
        if ck.model.dim() != self.sh.dim {
            return Err(Error::CorruptCheckpoint(format!(
                "model has {} values, expected {}",
                ck.model.dim(),
                self.sh.dim
            )));
        }
        let (dual, consensus) = match ck.state.as_slice() {
            [] => (ModelVector::zeros(self.sh.dim), ck.model.clone()),
            [u, z] if u.dim() == self.sh.dim && z.dim() == self.sh.dim => (u.clone(), z.clone()),
            _ => return Err(Error::CorruptCheckpoint("unexpected optimizer state".into())),
        };
        let epoch = ck.epoch as usize;
        let epochs_done = match self.sh.cfg.algorithm {
            Algorithm::GaSgd => epoch,
            _ => epoch * self.sh.epochs_per_round(),
        };
        Ok(Progress {
            epoch: ck.epoch as u64,
            iter: ck.iter as u64,
            model: ck.model,
            dual,
            consensus,
            epochs_done,
            finished: false,
            converged: false,
        })
    }

    /// Evaluates after `epochs_done` epochs and decides whether to stop.
    fn end_epoch(&self, p: &mut Progress, epochs_done: usize) -> Result<()> {
        p.epochs_done = epochs_done;
        let e = self.sh.monitor.evaluate_epoch(epochs_done, &p.model)?;
        if self.rank == 0 {
            self.sh.monitor.record(epochs_done, self.clock.now(), e.loss);
        }
        if !e.loss.is_finite() || !p.model.is_finite() {
            return Err(Error::Divergence { eta: self.sh.cfg.eta });
        }
        p.converged = e.loss <= self.sh.cfg.threshold;
        p.finished = p.converged || epochs_done >= self.sh.cfg.max_epochs;
        Ok(())
    }

    fn previous_round(&self, p: &Progress) -> Option<Round> {
        match (self.sh.cfg.algorithm, p.epoch, p.iter) {
            (_, 0, 0) => None,
            (Algorithm::GaSgd, e, 0) => Some(Round {
                epoch: e - 1,
                iter: self.sh.iters_per_epoch as u64 - 1,
            }),
            (Algorithm::GaSgd, e, i) => Some(Round { epoch: e, iter: i - 1 }),
            (_, r, _) => Some(Round { epoch: r - 1, iter: 0 }),
        }
    }

    fn step(&mut self, p: &mut Progress) -> Result<()> {
        match self.sh.cfg.algorithm {
            Algorithm::GaSgd => self.step_ga(p),
            Algorithm::MaSgd => self.step_ma(p),
            Algorithm::Admm => self.step_admm(p),
            Algorithm::KmeansEm => self.step_kmeans(p),
        }
    }

    fn step_ga(&mut self, p: &mut Progress) -> Result<()> {
        let cfg = &self.sh.cfg;
        if self.plan.as_ref().is_none_or(|(e, _)| *e != p.epoch) {
            let seed = shuffle_seed(cfg.seed, self.rank, p.epoch as usize);
            self.plan = Some((
                p.epoch,
                epoch_batches(self.local.n_rows(), cfg.batch_size, self.sh.iters_per_epoch, seed),
            ));
        }
        let rows = self
            .plan
            .as_ref()
            .map(|(_, plan)| plan[p.iter as usize].clone())
            .unwrap_or_default();
        let grad = self.compute(rows.len(), 1, || {
            if rows.is_empty() {
                Ok(ModelVector::zeros(self.sh.dim))
            } else {
                self.sh
                    .kind
                    .loss_grad(&p.model, &Batch::indices(&self.local, &rows))
                    .map(|(_, g)| g)
            }
        })?;
        let weight = rows.len() as f64;
        let round = Round {
            epoch: p.epoch,
            iter: p.iter,
        };
        p.model = match self.ps.as_mut() {
            Some(link) => {
                let clock = self.clock.clone();
                let (model, _) = clock.measure(Phase::Communication, None, || -> Result<_> {
                    link.push(&grad, weight, p.epoch as u32, p.iter as u32)?;
                    link.pull()
                })?;
                let frame = (4 + crate::ps::FIXED_BYTES + encoded_len(self.sh.dim)) as u64;
                self.sh.ps_transfers.fetch_add(2, Ordering::Relaxed);
                self.sh.ps_bytes.fetch_add(2 * frame, Ordering::Relaxed);
                model
            }
            None => {
                let mean = self.reduce(round, self.previous_round(p), ReduceOp::WeightedMean, &grad, weight)?;
                sgd_step(
                    &p.model,
                    &mean,
                    lr_schedule(cfg.eta, p.epoch as usize, self.sh.cfg.schedule()),
                )?
            }
        };
        p.iter += 1;
        if p.iter as usize == self.sh.iters_per_epoch {
            p.epoch += 1;
            p.iter = 0;
            self.end_epoch(p, p.epoch as usize)?;
        }
        Ok(())
    }

    fn step_ma(&mut self, p: &mut Progress) -> Result<()> {
        let cfg = &self.sh.cfg;
        let h = cfg.local_epochs;
        let r = p.epoch as usize;
        let n = self.local.n_rows();
        let local = self.compute(n, h, || {
            let mut w = p.model.clone();
            for e in r * h..(r + 1) * h {
                w = local_sgd_epoch(
                    self.sh.kind,
                    &self.local,
                    w,
                    cfg.batch_size,
                    lr_schedule(cfg.eta, e, cfg.schedule()),
                    shuffle_seed(cfg.seed, self.rank, e),
                )?;
            }
            Ok(w)
        })?;
        let round = Round {
            epoch: p.epoch,
            iter: 0,
        };
        p.model = self.reduce(round, self.previous_round(p), ReduceOp::WeightedMean, &local, n as f64)?;
        p.epoch += 1;
        self.end_epoch(p, (r + 1) * h)
    }

    fn step_admm(&mut self, p: &mut Progress) -> Result<()> {
        let cfg = &self.sh.cfg;
        let h = cfg.local_epochs;
        let r = p.epoch as usize;
        let solver = LocalSolver {
            rho: cfg.rho,
            epochs: h,
            eta: lr_schedule(cfg.eta, r * h, cfg.schedule()),
            batch_size: cfg.batch_size,
        };
        let wi = self.compute(self.local.n_rows(), h, || {
            admm_local_solve(
                self.sh.kind,
                &self.local,
                &p.consensus,
                &p.dual,
                &solver,
                shuffle_seed(cfg.seed, self.rank, r),
            )
        })?;
        let mut v = wi.clone();
        v.axpy(1.0, &p.dual)?;
        let round = Round {
            epoch: p.epoch,
            iter: 0,
        };
        let sum = self.reduce(round, self.previous_round(p), ReduceOp::Sum, &v, 1.0)?;
        let z = admm_consensus_from_sum(&sum, cfg.workers, cfg.rho, cfg.lambda)?;
        p.dual = admm_dual_update(&p.dual, &wi, &z)?;
        self.sh.monitor.residual(r, wi.distance(&z)?);
        p.consensus = z.clone();
        p.model = z;
        p.epoch += 1;
        self.end_epoch(p, (r + 1) * h)
    }

    fn step_kmeans(&mut self, p: &mut Progress) -> Result<()> {
        let ModelKind::KMeans { k } = self.sh.kind else {
            return Err(Error::invalid("kmeans_em needs a k-means model"));
        };
        let stats = self.compute(self.local.n_rows(), 1, || {
            kmeans_assign_stats(&p.model, k, &self.local.all())
        })?;
        let round = Round {
            epoch: p.epoch,
            iter: 0,
        };
        let sum = self.reduce(round, self.previous_round(p), ReduceOp::Sum, &stats.to_vector(), 1.0)?;
        let total = ClusterStats::from_vector(k, self.local.n_features(), &sum)?;
        p.model = kmeans_centroids(&total, &p.model)?;
        p.epoch += 1;
        self.end_epoch(p, p.epoch as usize)
    }
}

/// One pass of mini-batch SGD over `data` in a seeded order.
pub(crate) fn local_sgd_epoch(
    kind: ModelKind,
    data: &Dataset,
    mut w: ModelVector,
    batch: usize,
    eta: f64,
    seed: u64,
) -> Result<ModelVector> {
    for rows in epoch_batches(data.n_rows(), batch, 1, seed) {
        if rows.is_empty() {
            continue;
        }
        let (_, g) = kind.loss_grad(&w, &Batch::indices(data, &rows))?;
        w = sgd_step(&w, &g, eta)?;
    }
    Ok(w)
}

/// Decides at an iteration boundary whether the instance may run another iteration.
/// `Ok(true)` means checkpoint and respawn.
pub(crate) fn lifetime_check(
    cfg: &JobConfig,
    clock: &WorkerClock,
    rank: usize,
    steps_this_instance: usize,
) -> Result<bool> {
    let elapsed = clock.instance_elapsed();
    let exceeded = || Error::IterationExceedsLifetime {
        rank,
        elapsed_s: elapsed,
        lifetime_s: cfg.lifetime_s,
    };
    if elapsed > cfg.lifetime_s {
        return Err(exceeded());
    }
    if elapsed >= cfg.lifetime_s - cfg.checkpoint_margin_s {
        if steps_this_instance == 0 {
            return Err(exceeded());
        }
        return Ok(true);
    }
    Ok(false)
}

/// Runs rank `rank` of a BSP job to completion, respawning as the lifetime requires.
pub(crate) fn run_bsp_rank(sh: &JobShared, rank: usize) -> Result<RankOutcome> {
    let clock = sh.timeline.worker(rank);
    let mut respawns = 0;
    let mut iterations = 0;
    let mut progress = Progress {
        epoch: 0,
        iter: 0,
        model: sh.init_model.clone(),
        dual: ModelVector::zeros(sh.dim),
        consensus: sh.init_model.clone(),
        epochs_done: 0,
        finished: false,
        converged: false,
    };
    loop {
        if sh.cancel.load(Ordering::Relaxed) {
            return Err(Error::Cancelled);
        }
        let mut worker = Worker::spawn(sh, rank, clock.clone(), respawns > 0)?;
        if respawns > 0 {
            progress = worker.restore()?;
        } else {
            worker.end_epoch(&mut progress, 0)?;
        }
        let mut steps = 0;
        loop {
            if progress.finished {
                return Ok(RankOutcome {
                    iterations,
                    respawns,
                    epochs_done: progress.epochs_done,
                    converged: progress.converged,
                    model: progress.model,
                });
            }
            if sh.cancel.load(Ordering::Relaxed) {
                return Err(Error::Cancelled);
            }
            if lifetime_check(&sh.cfg, &clock, rank, steps)? {
                worker.save(&progress)?;
                respawns += 1;
                break;
            }
            worker.step(&mut progress)?;
            iterations += 1;
            steps += 1;
        }
    }
}

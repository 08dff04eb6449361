//! Asynchronous training: each worker repeatedly reads the shared model, runs one local
//! epoch and overwrites the shared model, without waiting for anyone.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::clock::Phase;
use crate::collective::{decode_update, encode_update, encoded_len};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelVector};
use crate::optim::{lr_schedule, shuffle_seed};
use crate::storage::BlobStore;

use super::checkpoint::Checkpoint;
use super::config::JobConfig;
use super::worker::{checkpoint_key, lifetime_check, local_sgd_epoch, JobShared, RankOutcome, Worker};

/// Key of the shared model.
pub const GLOBAL_MODEL_KEY: &str = "g/model";

/// The shared model, or `init` before anyone wrote it.
pub fn asp_read(store: &dyn BlobStore, init: &ModelVector) -> Result<ModelVector> {
    match store.get(GLOBAL_MODEL_KEY)? {
        Some(bytes) => {
            let (model, _) = decode_update(&bytes)?;
            if model.dim() != init.dim() {
                return Err(Error::DimensionMismatch {
                    expected: init.dim(),
                    got: model.dim(),
                });
            }
            Ok(model)
        }
        None => Ok(init.clone()),
    }
}

/// One local epoch starting from `model`; `local_epoch` picks the step size and shuffle.
pub fn asp_local_epoch(
    cfg: &JobConfig,
    kind: ModelKind,
    data: &Dataset,
    model: ModelVector,
    rank: usize,
    local_epoch: usize,
) -> Result<ModelVector> {
    let eta = lr_schedule(cfg.eta, local_epoch, cfg.schedule());
    local_sgd_epoch(
        kind,
        data,
        model,
        cfg.batch_size,
        eta,
        shuffle_seed(cfg.seed, rank, local_epoch),
    )
}

pub fn asp_write(store: &dyn BlobStore, model: &ModelVector) -> Result<()> {
    store.put(GLOBAL_MODEL_KEY, &encode_update(model, 1.0))
}

/// Read, train one local epoch, write back.
pub fn asp_step(
    store: &dyn BlobStore,
    cfg: &JobConfig,
    kind: ModelKind,
    data: &Dataset,
    init: &ModelVector,
    rank: usize,
    local_epoch: usize,
) -> Result<ModelVector> {
    let model = asp_read(store, init)?;
    let next = asp_local_epoch(cfg, kind, data, model, rank, local_epoch)?;
    asp_write(store, &next)?;
    Ok(next)
}

struct AspWorker<'a> {
    inner: Worker<'a>,
    local_epochs: usize,
    respawns: usize,
    steps: usize,
    pending: Option<ModelVector>,
    last: ModelVector,
}

impl<'a> AspWorker<'a> {
    fn start(sh: &'a JobShared, rank: usize) -> Result<Self> {
        Ok(AspWorker {
            inner: Worker::spawn(sh, rank, sh.timeline.worker(rank), false)?,
            local_epochs: 0,
            respawns: 0,
            steps: 0,
            pending: None,
            last: sh.init_model.clone(),
        })
    }

    /// Checkpoints, starts a fresh instance and restores the local epoch counter.
    fn respawn(&mut self) -> Result<()> {
        let (sh, rank) = (self.inner.sh, self.inner.rank);
        let ck = Checkpoint {
            worker_id: rank as u32,
            epoch: self.local_epochs as u32,
            iter: 0,
            model: self.last.clone(),
            state: Vec::new(),
        };
        let bytes = ck.encode()?;
        let w = &self.inner;
        w.clock.measure(Phase::Communication, None, || {
            w.data_store.put(&checkpoint_key(rank), &bytes)
        })?;
        self.inner = Worker::spawn(sh, rank, self.inner.clock.clone(), true)?;
        let w = &self.inner;
        w.clock.set_store_phase(Phase::Loading);
        let restored = w
            .clock
            .measure(Phase::Loading, None, || w.data_store.get(&checkpoint_key(rank)));
        w.clock.set_store_phase(Phase::Communication);
        let restored =
            restored?.ok_or_else(|| Error::CorruptCheckpoint(format!("{} is missing", checkpoint_key(rank))))?;
        let ck = Checkpoint::decode(&restored)?;
        self.local_epochs = ck.epoch as usize;
        self.last = ck.model;
        self.respawns += 1;
        self.steps = 0;
        Ok(())
    }

    /// Lifetime handling at a step boundary; true when the worker respawned.
    fn boundary(&mut self) -> Result<bool> {
        if lifetime_check(&self.inner.sh.cfg, &self.inner.clock, self.inner.rank, self.steps)? {
            self.respawn()?;
            return Ok(true);
        }
        Ok(false)
    }

    fn read_and_train(&mut self) -> Result<ModelVector> {
        let w = &self.inner;
        let sh = w.sh;
        let model = w.clock.measure(Phase::Communication, None, || {
            asp_read(&w.channel_store, &sh.init_model)
        })?;
        let t = self.local_epochs;
        w.compute(w.local.n_rows(), 1, || {
            asp_local_epoch(&sh.cfg, sh.kind, &w.local, model, w.rank, t)
        })
    }

    fn commit(&mut self, model: ModelVector) -> Result<()> {
        let w = &self.inner;
        w.clock
            .measure(Phase::Communication, None, || asp_write(&w.channel_store, &model))?;
        self.local_epochs += 1;
        self.steps += 1;
        self.last = model;
        Ok(())
    }

    fn outcome(self, converged: bool) -> RankOutcome {
        RankOutcome {
            iterations: self.local_epochs,
            respawns: self.respawns,
            epochs_done: self.local_epochs,
            converged,
            model: self.last,
        }
    }
}

/// Evaluates a committed model; true when it meets the threshold.
fn after_commit(sh: &JobShared, commits: usize, time: f64, model: &ModelVector) -> Result<bool> {
    let e = sh.monitor.evaluate(model)?;
    sh.monitor.record(commits, time, e.loss);
    sh.monitor.record_snapshot(commits, model);
    if !e.loss.is_finite() {
        return Err(Error::Divergence { eta: sh.cfg.eta });
    }
    Ok(e.loss <= sh.cfg.threshold)
}

fn initial_check(sh: &JobShared) -> Result<bool> {
    let e = sh.monitor.evaluate_epoch(0, &sh.init_model)?;
    sh.monitor.record(0, 0.0, e.loss);
    Ok(e.loss <= sh.cfg.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Commit,
    Read,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    /// `f64::to_bits` of a non-negative time, which orders like the time itself.
    time: u64,
    kind: EventKind,
    rank: usize,
}

impl Event {
    fn new(time: f64, kind: EventKind, rank: usize) -> Reverse<Event> {
        Reverse(Event {
            time: time.max(0.0).to_bits(),
            kind,
            rank,
        })
    }
}

/// Discrete-event simulation on virtual clocks: reads happen at the reader's clock, a
/// write becomes visible once its transfer completes. Ties go to commits, then to ranks.
pub(crate) fn run_simulated(sh: &JobShared) -> Result<(Vec<RankOutcome>, usize, bool)> {
    let mut workers = (0..sh.cfg.workers)
        .map(|r| AspWorker::start(sh, r))
        .collect::<Result<Vec<_>>>()?;
    if initial_check(sh)? {
        return Ok((workers.into_iter().map(|w| w.outcome(true)).collect(), 0, true));
    }
    let mut queue = BinaryHeap::new();
    for w in &workers {
        queue.push(Event::new(w.inner.clock.now(), EventKind::Read, w.inner.rank));
    }
    let write_bytes = encoded_len(sh.dim);
    let mut commits = 0;
    let mut converged = false;
    while let Some(Reverse(ev)) = queue.pop() {
        let w = &mut workers[ev.rank];
        match ev.kind {
            EventKind::Read => {
                if w.boundary()? {
                    queue.push(Event::new(w.inner.clock.now(), EventKind::Read, ev.rank));
                    continue;
                }
                let model = w.read_and_train()?;
                let at = w.inner.clock.now() + sh.channel.transfer_s(write_bytes);
                w.pending = Some(model);
                queue.push(Event::new(at, EventKind::Commit, ev.rank));
            }
            EventKind::Commit => {
                let model = w.pending.take().expect("commit without a pending model");
                w.commit(model)?;
                commits += 1;
                if after_commit(sh, commits, w.inner.clock.now(), &w.last)? {
                    converged = true;
                    break;
                }
                if w.local_epochs < sh.cfg.max_epochs {
                    queue.push(Event::new(w.inner.clock.now(), EventKind::Read, ev.rank));
                }
            }
        }
    }
    Ok((
        workers.into_iter().map(|w| w.outcome(converged)).collect(),
        commits,
        converged,
    ))
}

/// Real-mode ASP: one thread per worker over the shared store.
pub(crate) fn run_threads(sh: &JobShared) -> Result<(Vec<RankOutcome>, usize, bool)> {
    if initial_check(sh)? {
        return Ok(((0..sh.cfg.workers).map(|_| empty_outcome(sh)).collect(), 0, true));
    }
    let stop = AtomicBool::new(false);
    let commits = AtomicUsize::new(0);
    let converged = AtomicBool::new(false);
    let results = super::run_ranks(sh, |rank| -> Result<RankOutcome> {
        let mut w = AspWorker::start(sh, rank)?;
        while w.local_epochs < sh.cfg.max_epochs && !stop.load(Ordering::SeqCst) {
            if sh.cancel.load(Ordering::Relaxed) {
                return Err(Error::Cancelled);
            }
            if w.boundary()? {
                continue;
            }
            let model = w.read_and_train()?;
            w.commit(model)?;
            let n = commits.fetch_add(1, Ordering::SeqCst) + 1;
            if after_commit(sh, n, w.inner.clock.now(), &w.last)? {
                converged.store(true, Ordering::SeqCst);
                stop.store(true, Ordering::SeqCst);
            }
        }
        Ok(w.outcome(false))
    })?;
    let converged = converged.load(Ordering::SeqCst);
    let results = results
        .into_iter()
        .map(|mut o| {
            o.converged = converged;
            o
        })
        .collect();
    Ok((results, commits.load(Ordering::SeqCst), converged))
}

fn empty_outcome(sh: &JobShared) -> RankOutcome {
    RankOutcome {
        iterations: 0,
        respawns: 0,
        epochs_done: 0,
        converged: true,
        model: sh.init_model.clone(),
    }
}

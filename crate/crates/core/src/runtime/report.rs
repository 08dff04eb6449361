use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::clock::Breakdown;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{evaluate, Evaluation, Metric, ModelKind, ModelVector};

pub const REPORT_SCHEMA: &str = "v1";
pub const TRACE_HEADER: &str = "epoch,time_s,loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub time_s: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub rank: usize,
    /// Communication rounds (BSP) or local epochs committed (ASP).
    pub iterations: usize,
    pub respawns: usize,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub schema: String,
    pub converged: bool,
    pub epochs: usize,
    pub rounds: usize,
    pub final_loss: f64,
    /// Accuracy for classifiers, SSE for k-means.
    pub final_metric: Option<f64>,
    /// Critical-path worker's phases; `total_s` is the job's end-to-end time.
    pub breakdown: Breakdown,
    pub bytes_transferred: u64,
    pub transfers: u64,
    pub dollar_cost_usd: f64,
    pub respawns: usize,
    pub trace: Vec<TracePoint>,
    pub workers: Vec<WorkerSummary>,
    /// ADMM primal residual `max_i ||w_i - z||` per round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub admm_residuals: Vec<f64>,
    pub model: ModelVector,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_snapshots: Vec<ModelVector>,
}

impl JobReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::error::Error::Format(e.to_string()))
    }

    /// Loss trace as CSV with header `epoch,time_s,loss`.
    pub fn trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for p in &self.trace {
            out.push_str(&format!("{},{},{}\n", p.epoch, p.time_s, p.loss));
        }
        out
    }
}

pub(crate) fn metric_value(m: Metric) -> Option<f64> {
    match m {
        Metric::Accuracy(a) => Some(a),
        Metric::Sse(s) => Some(s),
        Metric::None => None,
    }
}

#[derive(Debug, Default)]
struct MonitorState {
    evals: BTreeMap<usize, Evaluation>,
    trace: Vec<TracePoint>,
    residuals: BTreeMap<usize, f64>,
    snapshots: BTreeMap<usize, ModelVector>,
}

/// Job-wide loss bookkeeping. Evaluation runs on the full dataset, outside any worker's
/// time accounting, and is cached per epoch because every BSP worker holds the same model.
#[derive(Debug)]
pub struct Monitor {
    kind: ModelKind,
    data: Arc<Dataset>,
    record_models: bool,
    state: Mutex<MonitorState>,
}

impl Monitor {
    pub fn new(kind: ModelKind, data: Arc<Dataset>, record_models: bool) -> Self {
        Monitor {
            kind,
            data,
            record_models,
            state: Mutex::new(MonitorState::default()),
        }
    }

    fn lock(&self) -> MutexGuard<'_, MonitorState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Evaluation of the model reached after `epoch` epochs, computed once.
    pub fn evaluate_epoch(&self, epoch: usize, model: &ModelVector) -> Result<Evaluation> {
        let mut s = self.lock();
        if let Some(e) = s.evals.get(&epoch) {
            return Ok(*e);
        }
        let e = evaluate(model, &self.data, self.kind)?;
        s.evals.insert(epoch, e);
        if self.record_models {
            s.snapshots.insert(epoch, model.clone());
        }
        Ok(e)
    }

    /// Uncached evaluation, for asynchronous runs where models differ per worker.
    pub fn evaluate(&self, model: &ModelVector) -> Result<Evaluation> {
        evaluate(model, &self.data, self.kind)
    }

    pub fn record(&self, epoch: usize, time_s: f64, loss: f64) {
        self.lock().trace.push(TracePoint { epoch, time_s, loss });
    }

    pub fn record_snapshot(&self, epoch: usize, model: &ModelVector) {
        if self.record_models {
            self.lock().snapshots.insert(epoch, model.clone());
        }
    }

    /// Keeps the largest residual reported for `round`.
    pub fn residual(&self, round: usize, r: f64) {
        let mut s = self.lock();
        let e = s.residuals.entry(round).or_insert(0.0);
        *e = e.max(r);
    }

    pub fn trace(&self) -> Vec<TracePoint> {
        let mut t = self.lock().trace.clone();
        t.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.epoch.cmp(&b.epoch)));
        t
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.lock().residuals.values().copied().collect()
    }

    /// Snapshots in epoch order, excluding the initial model.
    pub fn snapshots(&self) -> Vec<ModelVector> {
        self.lock()
            .snapshots
            .iter()
            .filter(|(e, _)| **e > 0)
            .map(|(_, m)| m.clone())
            .collect()
    }
}

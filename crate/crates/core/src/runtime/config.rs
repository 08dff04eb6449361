use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::collective::Pattern;
use crate::costmodel::{Pricing, StartupTable};
use crate::data::{generate_synthetic, load_libsvm, Dataset, Task};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::optim::{Algorithm, LrSchedule};
use crate::storage::{lookup_profile, ChannelProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Workers are threads over a filesystem store; times are measured.
    RealLocal,
    /// Workers run against an in-memory store on virtual clocks.
    #[default]
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    #[default]
    Bsp,
    Asp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    Lr,
    Svm,
    LeastSquares,
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    /// Generated rows; the task follows from the model.
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Libsvm {
        path: PathBuf,
        d: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 2000,
            d: 10,
            seed: None,
        }
    }
}

/// Slows one worker's compute by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Straggler {
    pub rank: usize,
    pub factor: f64,
}

/// Full description of one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub model: ModelName,
    /// Clusters, for k-means.
    pub k: usize,
    pub data: DataSource,
    pub workers: usize,
    pub algorithm: Algorithm,
    /// Built-in channel profile name.
    pub channel: String,
    /// Replaces the named profile entirely when set.
    pub channel_profile: Option<ChannelProfile>,
    /// Profile of the store the training data is read from.
    pub data_channel: String,
    pub pattern: Pattern,
    pub sync: SyncMode,
    pub eta: f64,
    /// Per-worker mini-batch size.
    pub batch_size: usize,
    /// Local epochs per round (MA-SGD, ADMM).
    pub local_epochs: usize,
    pub rho: f64,
    /// L2 coefficient of the ADMM consensus update.
    pub lambda: f64,
    /// Defaults to constant under BSP and `inv_sqrt` under ASP.
    pub lr_schedule: Option<LrSchedule>,
    pub threshold: f64,
    pub max_epochs: usize,
    pub lifetime_s: f64,
    pub checkpoint_margin_s: f64,
    pub mode: Mode,
    pub seed: u64,
    pub stragglers: Vec<Straggler>,
    /// Single-worker seconds per epoch, for simulated compute. When unset, compute is
    /// charged at a fixed cost per model coordinate per row.
    pub compute_s_per_epoch: Option<f64>,
    /// Function startup by number of concurrent workers.
    pub faas_startup: StartupTable,
    /// Parameter-server seconds per MB of model applied.
    pub ps_update_s_per_mb: f64,
    /// Existing parameter server to use in real mode; one is started otherwise.
    pub ps_address: Option<String>,
    pub wait_timeout_s: f64,
    /// Keep a copy of the model after every epoch or round in the report.
    pub record_models: bool,
    /// Directory for the real-mode store; a temporary one is used otherwise.
    pub store_dir: Option<PathBuf>,
    pub pricing: Pricing,
}

/// Virtual compute cost per model coordinate per row when no `compute_s_per_epoch` is set.
pub const DEFAULT_COMPUTE_S_PER_VALUE: f64 = 1e-8;

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            model: ModelName::Lr,
            k: 10,
            data: DataSource::default(),
            workers: 4,
            algorithm: Algorithm::GaSgd,
            channel: "s3".into(),
            channel_profile: None,
            data_channel: "s3".into(),
            pattern: Pattern::AllReduce,
            sync: SyncMode::Bsp,
            eta: 0.1,
            batch_size: 100,
            local_epochs: 1,
            rho: 1.0,
            lambda: 0.0,
            lr_schedule: None,
            threshold: 0.5,
            max_epochs: 50,
            lifetime_s: 900.0,
            checkpoint_margin_s: 30.0,
            mode: Mode::Simulate,
            seed: 42,
            stragglers: Vec::new(),
            compute_s_per_epoch: None,
            faas_startup: StartupTable::faas_default(),
            ps_update_s_per_mb: 2.3 / 75.0,
            ps_address: None,
            wait_timeout_s: 600.0,
            record_models: false,
            store_dir: None,
            pricing: Pricing::default(),
        }
    }
}

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::config(format!("job.{path}"), message)
}

impl JobConfig {
    pub fn model_kind(&self) -> ModelKind {
        match self.model {
            ModelName::Lr => ModelKind::Lr,
            ModelName::Svm => ModelKind::Svm,
            ModelName::LeastSquares => ModelKind::LeastSquares,
            ModelName::Kmeans => ModelKind::KMeans { k: self.k },
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        self.lr_schedule.unwrap_or(match self.sync {
            SyncMode::Bsp => LrSchedule::Constant,
            SyncMode::Asp => LrSchedule::InvSqrt,
        })
    }

    /// Profile of the communication channel (the parameter-server link for `ps`).
    pub fn channel_profile(&self) -> Result<ChannelProfile> {
        let p = match (&self.channel_profile, self.pattern) {
            (Some(p), _) => p.clone(),
            (None, Pattern::Ps) if self.channel == "s3" => lookup_profile("ps_hybrid")?,
            (None, _) => lookup_profile(&self.channel).map_err(|e| bad("channel", e.to_string()))?,
        };
        p.validate().map_err(|e| bad("channel", e.to_string()))?;
        Ok(p)
    }

    pub fn data_profile(&self) -> Result<ChannelProfile> {
        lookup_profile(&self.data_channel).map_err(|e| bad("data_channel", e.to_string()))
    }

    pub fn straggler_factor(&self, rank: usize) -> f64 {
        self.stragglers
            .iter()
            .filter(|s| s.rank == rank)
            .map(|s| s.factor)
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(bad("workers", "must be >= 1"));
        }
        if !self.threshold.is_finite() {
            return Err(bad("threshold", "must be finite"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(bad("eta", format!("must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(bad("local_epochs", "must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(bad("rho", format!("must be > 0, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if self.max_epochs == 0 {
            return Err(bad("max_epochs", "must be >= 1"));
        }
        if !(self.checkpoint_margin_s >= 0.0) {
            return Err(bad("checkpoint_margin_s", "must be >= 0"));
        }
        if !(self.lifetime_s > self.checkpoint_margin_s) {
            return Err(bad(
                "lifetime_s",
                format!("must exceed the checkpoint margin ({} s)", self.checkpoint_margin_s),
            ));
        }
        if !(self.wait_timeout_s > 0.0) {
            return Err(bad("wait_timeout_s", "must be > 0"));
        }
        if !(self.ps_update_s_per_mb >= 0.0 && self.ps_update_s_per_mb.is_finite()) {
            return Err(bad("ps_update_s_per_mb", "must be finite and >= 0"));
        }
        if let Some(c) = self.compute_s_per_epoch {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(bad("compute_s_per_epoch", "must be finite and >= 0"));
            }
        }
        for s in &self.stragglers {
            if s.rank >= self.workers {
                return Err(bad(
                    "stragglers",
                    format!("rank {} out of range for {} workers", s.rank, self.workers),
                ));
            }
            if !(s.factor > 0.0 && s.factor.is_finite()) {
                return Err(bad("stragglers", format!("factor for rank {} must be > 0", s.rank)));
            }
        }
        let kmeans = self.model == ModelName::Kmeans;
        if kmeans != (self.algorithm == Algorithm::KmeansEm) {
            return Err(bad(
                "algorithm",
                "k-means is trained with kmeans_em, and kmeans_em only trains k-means",
            ));
        }
        if kmeans && self.k == 0 {
            return Err(bad("k", "must be >= 1"));
        }
        match self.data {
            DataSource::Synthetic { n, d, .. } if n == 0 || d == 0 => {
                return Err(bad("data", "synthetic n and d must be >= 1"))
            }
            DataSource::Libsvm { d: 0, .. } => return Err(bad("data", "d must be >= 1")),
            _ => {}
        }
        if self.pattern == Pattern::Ps {
            if self.algorithm != Algorithm::GaSgd {
                return Err(bad("pattern", "the parameter server pattern runs GA-SGD only"));
            }
            if self.sync != SyncMode::Bsp {
                return Err(bad(
                    "pattern",
                    "the parameter server is synchronous; use sync = \"bsp\"",
                ));
            }
            if self.schedule() != LrSchedule::Constant {
                return Err(bad(
                    "lr_schedule",
                    "the parameter server applies a constant learning rate",
                ));
            }
        }
        if self.sync == SyncMode::Asp && !matches!(self.algorithm, Algorithm::GaSgd | Algorithm::MaSgd) {
            return Err(bad("sync", "asynchronous training runs SGD (ga_sgd or ma_sgd) only"));
        }
        self.faas_startup.validate("job.faas_startup")?;
        self.channel_profile()?;
        self.data_profile()?;
        Ok(())
    }

    /// Loads or generates the dataset.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { n, d, seed } => {
                let task = match self.model {
                    ModelName::Lr | ModelName::Svm => Task::Classification,
                    ModelName::LeastSquares => Task::Regression,
                    ModelName::Kmeans => Task::Clustering { k: self.k },
                };
                generate_synthetic(*n, *d, task, seed.unwrap_or(self.seed))
            }
            DataSource::Libsvm { path, d } => load_libsvm(path, *d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        JobConfig::default().validate().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let cfg = JobConfig {
            workers: 0,
            ..JobConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("job.workers"), "{err}");
        let cfg = JobConfig {
            lifetime_s: 10.0,
            checkpoint_margin_s: 10.0,
            ..JobConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("job.lifetime_s"));
        let cfg = JobConfig {
            pattern: Pattern::Ps,
            algorithm: Algorithm::Admm,
            ..JobConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = JobConfig {
            channel: "carrier_pigeon".into(),
            ..JobConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("job.channel"));
    }

    #[test]
    fn ps_pattern_uses_the_hybrid_link() {
        let cfg = JobConfig {
            pattern: Pattern::Ps,
            ..JobConfig::default()
        };
        assert_eq!(cfg.channel_profile().unwrap().name, "ps_hybrid");
    }
}

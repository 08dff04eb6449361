//! Sampling-based estimate of the epochs needed to reach a loss threshold.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, kmeans_assign_stats, ModelKind, ModelVector};
use crate::optim::{
    admm_consensus_from_sum, admm_dual_update, admm_local_solve, epoch_batches, initial_model, kmeans_centroids,
    sgd_step, shuffle_seed, Algorithm, LocalSolver,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSpec {
    pub model: ModelKind,
    pub algorithm: Algorithm,
    pub eta: f64,
    /// Batch size of the full-data job; scaled by `sample_frac` on the sample.
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rho: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub sample_frac: f64,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for EstimateSpec {
    fn default() -> Self {
        EstimateSpec {
            model: ModelKind::Lr,
            algorithm: Algorithm::GaSgd,
            eta: 0.1,
            batch_size: 100,
            local_epochs: 1,
            rho: 1.0,
            lambda: 0.0,
            threshold: 0.5,
            sample_frac: 0.1,
            seed: 0,
            max_epochs: 200,
        }
    }
}

/// Trains one worker on a uniform `sample_frac` sample of `data` and returns the epochs
/// until the sample loss reaches `threshold` (0 if the initial model already does).
///
/// The batch size shrinks with the sample so an epoch still takes as many steps as on
/// the full data; otherwise the sample would see far fewer updates per epoch.
pub fn estimate_epochs(data: &Dataset, spec: &EstimateSpec) -> Result<usize> {
    if spec.batch_size == 0 || spec.local_epochs == 0 {
        return Err(Error::invalid("batch size and local epochs must be >= 1"));
    }
    let sample = if spec.sample_frac < 1.0 {
        data.sample(spec.sample_frac, spec.seed)?
    } else {
        data.clone()
    };
    let batch = ((spec.batch_size as f64 * sample.n_rows() as f64 / data.n_rows() as f64).round() as usize).max(1);
    let mut w = initial_model(spec.model, &sample, spec.seed)?;
    let loss = |w: &ModelVector| evaluate(w, &sample, spec.model).map(|e| e.loss);
    let mut best = loss(&w)?;
    if best <= spec.threshold {
        return Ok(0);
    }

    let mut u = ModelVector::zeros(w.dim());
    let mut epochs = 0;
    while epochs < spec.max_epochs {
        match (spec.algorithm, spec.model) {
            (_, ModelKind::KMeans { k }) => {
                let stats = kmeans_assign_stats(&w, k, &sample.all())?;
                w = kmeans_centroids(&stats, &w)?;
                epochs += 1;
            }
            (Algorithm::Admm, _) => {
                let solver = LocalSolver {
                    rho: spec.rho,
                    epochs: spec.local_epochs,
                    eta: spec.eta,
                    batch_size: batch,
                };
                let local = admm_local_solve(spec.model, &sample, &w, &u, &solver, shuffle_seed(spec.seed, 0, epochs))?;
                let mut sum = local.clone();
                sum.axpy(1.0, &u)?;
                let z = admm_consensus_from_sum(&sum, 1, spec.rho, spec.lambda)?;
                u = admm_dual_update(&u, &local, &z)?;
                w = z;
                epochs += spec.local_epochs;
            }
            _ => {
                for rows in epoch_batches(sample.n_rows(), batch, 1, shuffle_seed(spec.seed, 0, epochs)) {
                    let (_, g) = spec.model.loss_grad(&w, &Batch::indices(&sample, &rows))?;
                    w = sgd_step(&w, &g, spec.eta)?;
                }
                epochs += 1;
            }
        }
        let l = loss(&w)?;
        if !l.is_finite() {
            return Err(Error::Divergence { eta: spec.eta });
        }
        best = best.min(l);
        if l <= spec.threshold {
            return Ok(epochs);
        }
    }
    Err(Error::EstimateFailed {
        cap: spec.max_epochs,
        best_loss: best,
    })
}

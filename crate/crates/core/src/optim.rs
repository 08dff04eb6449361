//! Local update rules and aggregation for GA-SGD, MA-SGD, consensus ADMM and k-means EM.
//!
//! Consensus ADMM here minimizes `sum_i f_i(w_i) + lambda/2 ||z||^2` subject to `w_i = z`,
//! where `f_i` is the summed loss over worker `i`'s rows:
//!
//! - local:  `w_i = argmin f_i(w) + rho/2 ||w - z + u_i||^2` (inexact, by SGD, warm-started at `z`)
//! - global: `z = rho * sum_i (w_i + u_i) / (n * rho + lambda)`
//! - dual:   `u_i += w_i - z`

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::model::{ClusterStats, ModelKind, ModelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GaSgd,
    MaSgd,
    Admm,
    KmeansEm,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::GaSgd => "ga_sgd",
            Algorithm::MaSgd => "ma_sgd",
            Algorithm::Admm => "admm",
            Algorithm::KmeansEm => "kmeans_em",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `eta / sqrt(T + 1)` at epoch `T`.
    InvSqrt,
}

pub fn lr_schedule(base: f64, epoch: usize, mode: LrSchedule) -> f64 {
    match mode {
        LrSchedule::Constant => base,
        LrSchedule::InvSqrt => base / ((epoch + 1) as f64).sqrt(),
    }
}

/// Per-worker optimizer state. Never shared between workers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rho: f64,
    /// ADMM scaled dual `u_i`.
    pub dual: ModelVector,
    /// ADMM consensus `z`.
    pub consensus: ModelVector,
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(
        algorithm: Algorithm,
        eta: f64,
        batch_size: usize,
        local_epochs: usize,
        rho: f64,
        dim: usize,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {eta}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("ADMM rho must be > 0, got {rho}")));
        }
        if batch_size == 0 || local_epochs == 0 {
            return Err(Error::invalid("batch size and local epochs must be >= 1"));
        }
        Ok(OptimizerState {
            algorithm,
            eta,
            batch_size,
            local_epochs,
            rho,
            dual: ModelVector::zeros(dim),
            consensus: ModelVector::zeros(dim),
            epoch: 0,
        })
    }
}

/// `w - eta * grad`
pub fn sgd_step(w: &ModelVector, grad: &ModelVector, eta: f64) -> Result<ModelVector> {
    let mut next = w.clone();
    next.axpy(-eta, grad)?;
    Ok(next)
}

/// Size-weighted mean of vectors. Weights must be non-negative with a positive total.
pub fn weighted_mean(vectors: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate zero vectors"))?;
    check_dim(vectors.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || total <= 0.0 {
        return Err(Error::invalid(format!(
            "aggregation weights must be >= 0 with positive sum, got {weights:?}"
        )));
    }
    let mut acc = ModelVector::zeros(first.dim());
    for (v, &wt) in vectors.iter().zip(weights) {
        acc.axpy(wt, v)?;
    }
    acc.scale(1.0 / total);
    Ok(acc)
}

/// GA-SGD aggregation: gradients weighted by the rows each one was computed over.
pub fn ga_aggregate(grads: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    weighted_mean(grads, weights)
}

/// MA-SGD aggregation: local models weighted by partition size.
pub fn ma_aggregate(models: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    weighted_mean(models, weights)
}

/// Row order for one local epoch: a seeded shuffle cut into batches. The plan is padded
/// with empty batches up to `min_batches` so every worker runs the same number of rounds.
pub fn epoch_batches(n_rows: usize, batch_size: usize, min_batches: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut plan: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    while plan.len() < min_batches {
        plan.push(Vec::new());
    }
    plan
}

/// Deterministic per-(seed, rank, epoch) stream id for batch shuffling.
pub fn shuffle_seed(seed: u64, rank: usize, epoch: usize) -> u64 {
    // splitmix-style mixing so neighbouring ranks/epochs get unrelated permutations
    let mut x =
        seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Settings of the inexact ADMM local solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSolver {
    pub rho: f64,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
}

/// Approximately minimizes `f_i(w) + rho/2 ||w - z + u||^2` with `epochs` passes of
/// mini-batch SGD starting from `z`. `f_i` is the summed loss over `data`; the SGD runs
/// on the objective divided by the row count so `eta` has the same scale as plain SGD.
pub fn admm_local_solve(
    kind: ModelKind,
    data: &Dataset,
    z: &ModelVector,
    u: &ModelVector,
    solver: &LocalSolver,
    seed: u64,
) -> Result<ModelVector> {
    check_dim(z.dim(), u.dim())?;
    check_dim(kind.dim(data.n_features()), z.dim())?;
    if !kind.is_linear() {
        return Err(Error::invalid("ADMM applies to linear models only"));
    }
    let penalty = solver.rho / data.n_rows().max(1) as f64;
    let mut w = z.clone();
    for epoch in 0..solver.epochs {
        for rows in epoch_batches(data.n_rows(), solver.batch_size, 1, shuffle_seed(seed, 0, epoch)) {
            let (_, mut g) = kind.loss_grad(&w, &Batch::indices(data, &rows))?;
            for ((gi, wi), (zi, ui)) in g.iter_mut().zip(w.iter()).zip(z.iter().zip(u.iter())) {
                *gi += penalty * (wi - zi + ui);
            }
            w.axpy(-solver.eta, &g)?;
            if !w.is_finite() {
                return Err(Error::Divergence { eta: solver.eta });
            }
        }
    }
    Ok(w)
}

/// `z` from the already-summed `sum_i (w_i + u_i)` over `n` workers.
pub fn admm_consensus_from_sum(sum: &ModelVector, n: usize, rho: f64, lambda: f64) -> Result<ModelVector> {
    if n == 0 || lambda < 0.0 || rho <= 0.0 {
        return Err(Error::invalid(format!(
            "ADMM update needs n >= 1, rho > 0, lambda >= 0 (n={n}, rho={rho}, lambda={lambda})"
        )));
    }
    let mut z = sum.clone();
    z.scale(rho / (n as f64 * rho + lambda));
    Ok(z)
}

pub fn admm_global_update(ws: &[ModelVector], us: &[ModelVector], rho: f64, lambda: f64) -> Result<ModelVector> {
    check_dim(ws.len(), us.len())?;
    let first = ws
        .first()
        .ok_or_else(|| Error::invalid("ADMM update over zero workers"))?;
    let mut sum = ModelVector::zeros(first.dim());
    for (w, u) in ws.iter().zip(us) {
        sum.axpy(1.0, w)?;
        sum.axpy(1.0, u)?;
    }
    admm_consensus_from_sum(&sum, ws.len(), rho, lambda)
}

/// `u + w - z`
pub fn admm_dual_update(u: &ModelVector, w: &ModelVector, z: &ModelVector) -> Result<ModelVector> {
    check_dim(u.dim(), w.dim())?;
    check_dim(u.dim(), z.dim())?;
    Ok(ModelVector::from(
        u.iter()
            .zip(w.iter())
            .zip(z.iter())
            .map(|((u, w), z)| u + w - z)
            .collect::<Vec<_>>(),
    ))
}

/// New centroids from merged statistics; clusters with no points keep `previous`.
pub fn kmeans_merge(stats: &[ClusterStats], previous: &ModelVector) -> Result<ModelVector> {
    let first = stats
        .first()
        .ok_or_else(|| Error::invalid("kmeans merge over zero stats"))?;
    let mut total = first.clone();
    for s in &stats[1..] {
        total.merge(s)?;
    }
    kmeans_centroids(&total, previous)
}

pub fn kmeans_centroids(total: &ClusterStats, previous: &ModelVector) -> Result<ModelVector> {
    let (k, d) = (total.k, total.d);
    check_dim(k * d, previous.dim())?;
    let mut next = previous.clone();
    for j in 0..k {
        let count = total.counts[j];
        if count > 0 {
            for t in 0..d {
                next[j * d + t] = total.sums[j * d + t] / count as f64;
            }
        }
    }
    Ok(next)
}

/// Starting model: zeros for linear models, `k` distinct seeded rows for k-means.
pub fn initial_model(kind: ModelKind, data: &Dataset, seed: u64) -> Result<ModelVector> {
    match kind {
        ModelKind::KMeans { k } => {
            let n = data.n_rows();
            if k == 0 || k > n {
                return Err(Error::invalid(format!(
                    "k-means needs 1 <= k <= rows, got k={k}, rows={n}"
                )));
            }
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut centroids = Vec::with_capacity(k * data.n_features());
            for &r in &rows[..k] {
                centroids.extend_from_slice(data.row(r));
            }
            Ok(ModelVector::from(centroids))
        }
        _ => Ok(ModelVector::zeros(kind.dim(data.n_features()))),
    }
}

//! Linear models and k-means: losses, gradients, sufficient statistics and evaluation.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{check_dim, Error, Result};

/// Flat parameter vector: linear weights, or `k * d` concatenated centroids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) -> Result<()> {
        check_dim(self.dim(), other.len())?;
        self.0.iter_mut().zip(other).for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn distance(&self, other: &[f64]) -> Result<f64> {
        check_dim(self.dim(), other.len())?;
        Ok(self
            .0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    /// Relative L2 error `||self - reference|| / max(||reference||, 1e-300)`.
    pub fn rel_error(&self, reference: &[f64]) -> Result<f64> {
        let num = self.distance(reference)?;
        let den = dot(reference, reference).sqrt().max(1e-300);
        Ok(if num == 0.0 { 0.0 } else { num / den })
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

impl Deref for ModelVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Logistic regression, labels in {-1, +1}.
    Lr,
    /// Linear SVM with hinge loss, labels in {-1, +1}.
    Svm,
    /// Least squares `1/2 (<w,x> - y)^2`; the ridge problem used to validate ADMM.
    LeastSquares,
    /// k-means trained by EM.
    KMeans { k: usize },
}

impl ModelKind {
    pub fn dim(&self, n_features: usize) -> usize {
        match *self {
            ModelKind::KMeans { k } => k * n_features,
            _ => n_features,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, ModelKind::Lr | ModelKind::Svm)
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, ModelKind::KMeans { .. })
    }

    /// Mean loss and gradient over a batch. Fails for k-means, which has no gradient.
    pub fn loss_grad(&self, w: &ModelVector, batch: &Batch<'_>) -> Result<(f64, ModelVector)> {
        match self {
            ModelKind::Lr => lr_loss_grad(w, batch),
            ModelKind::Svm => svm_loss_grad(w, batch),
            ModelKind::LeastSquares => least_squares_loss_grad(w, batch),
            ModelKind::KMeans { .. } => Err(Error::invalid("k-means has no gradient; use kmeans_assign_stats")),
        }
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn linear_loss_grad(
    w: &ModelVector,
    batch: &Batch<'_>,
    per_row: impl Fn(f64, f64) -> (f64, f64),
) -> Result<(f64, ModelVector)> {
    check_dim(batch.n_features(), w.dim())?;
    let mut grad = ModelVector::zeros(w.dim());
    let n = batch.len();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (x, y) in batch.iter() {
        let (l, coef) = per_row(w.dot(x), y);
        loss += l;
        if coef != 0.0 {
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += coef * xi);
        }
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// Mean logistic loss `log(1 + exp(-y <w,x>))` and its gradient.
pub fn lr_loss_grad(w: &ModelVector, batch: &Batch<'_>) -> Result<(f64, ModelVector)> {
    linear_loss_grad(w, batch, |wx, y| {
        let m = y * wx;
        (softplus(-m), -y * sigmoid(-m))
    })
}

/// Mean hinge loss `max(0, 1 - y <w,x>)`; the subgradient is zero at the kink.
pub fn svm_loss_grad(w: &ModelVector, batch: &Batch<'_>) -> Result<(f64, ModelVector)> {
    linear_loss_grad(w, batch, |wx, y| {
        let m = y * wx;
        if m < 1.0 {
            (1.0 - m, -y)
        } else {
            (0.0, 0.0)
        }
    })
}

/// Mean squared residual `1/2 (<w,x> - y)^2` and its gradient.
pub fn least_squares_loss_grad(w: &ModelVector, batch: &Batch<'_>) -> Result<(f64, ModelVector)> {
    linear_loss_grad(w, batch, |wx, y| {
        let r = wx - y;
        (0.5 * r * r, r)
    })
}

/// Mergeable sufficient statistic of one k-means assignment pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub k: usize,
    pub d: usize,
    /// k x d row-major coordinate sums.
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
    /// Summed squared distance of every point to its assigned centroid.
    pub sse: f64,
}

impl ClusterStats {
    pub fn empty(k: usize, d: usize) -> Self {
        ClusterStats {
            k,
            d,
            sums: vec![0.0; k * d],
            counts: vec![0; k],
            sse: 0.0,
        }
    }

    pub fn rows(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ClusterStats) -> Result<()> {
        check_dim(self.sums.len(), other.sums.len())?;
        check_dim(self.k, other.k)?;
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.sse += other.sse;
        Ok(())
    }

    /// Flattens to `[sums.., counts.., sse]` so the stats can ride a sum-reduction.
    pub fn to_vector(&self) -> ModelVector {
        let mut v = Vec::with_capacity(self.k * self.d + self.k + 1);
        v.extend_from_slice(&self.sums);
        v.extend(self.counts.iter().map(|&c| c as f64));
        v.push(self.sse);
        ModelVector::from(v)
    }

    pub fn from_vector(k: usize, d: usize, v: &[f64]) -> Result<Self> {
        check_dim(k * d + k + 1, v.len())?;
        Ok(ClusterStats {
            k,
            d,
            sums: v[..k * d].to_vec(),
            counts: v[k * d..k * d + k].iter().map(|&c| c.round().max(0.0) as u64).collect(),
            sse: v[k * d + k],
        })
    }
}

/// Assigns each row to its nearest centroid (ties go to the lowest index).
pub fn kmeans_assign_stats(centroids: &ModelVector, k: usize, batch: &Batch<'_>) -> Result<ClusterStats> {
    let d = batch.n_features();
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    check_dim(k * d, centroids.dim())?;
    let mut stats = ClusterStats::empty(k, d);
    for (x, _) in batch.iter() {
        let (best, dist) = nearest(centroids, k, x);
        stats.counts[best] += 1;
        stats.sums[best * d..(best + 1) * d]
            .iter_mut()
            .zip(x)
            .for_each(|(s, xi)| *s += xi);
        stats.sse += dist;
    }
    Ok(stats)
}

fn nearest(centroids: &[f64], k: usize, x: &[f64]) -> (usize, f64) {
    let d = x.len();
    let mut best = (0, f64::INFINITY);
    for j in 0..k {
        let c = &centroids[j * d..(j + 1) * d];
        let dist: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy(f64),
    Sse(f64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean loss; for k-means the mean squared distance to the nearest centroid.
    pub loss: f64,
    pub metric: Metric,
}

pub fn evaluate(w: &ModelVector, dataset: &Dataset, kind: ModelKind) -> Result<Evaluation> {
    evaluate_batch(w, &dataset.all(), kind)
}

pub fn evaluate_batch(w: &ModelVector, batch: &Batch<'_>, kind: ModelKind) -> Result<Evaluation> {
    match kind {
        ModelKind::KMeans { k } => {
            let stats = kmeans_assign_stats(w, k, batch)?;
            let loss = if batch.is_empty() {
                0.0
            } else {
                stats.sse / batch.len() as f64
            };
            Ok(Evaluation {
                loss,
                metric: Metric::Sse(stats.sse),
            })
        }
        _ => {
            let (loss, _) = kind.loss_grad(w, batch)?;
            let metric = if kind.is_classifier() {
                let correct = batch
                    .iter()
                    .filter(|(x, y)| {
                        let s = if w.dot(x) >= 0.0 { 1.0 } else { -1.0 };
                        s == *y
                    })
                    .count();
                Metric::Accuracy(if batch.is_empty() {
                    0.0
                } else {
                    correct as f64 / batch.len() as f64
                })
            } else {
                Metric::None
            };
            Ok(Evaluation { loss, metric })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Task};

    fn ds(rows: &[&[f64]], labels: &[f64]) -> Dataset {
        let d = rows[0].len();
        Dataset::new(rows.concat(), labels.to_vec(), d).unwrap()
    }

    #[test]
    fn lr_at_zero_is_ln2() {
        let data = generate_synthetic(50, 4, Task::Classification, 2).unwrap();
        let (loss, _) = lr_loss_grad(&ModelVector::zeros(4), &data.all()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lr_grad_single_point() {
        let data = ds(&[&[1.0, 0.0]], &[1.0]);
        let (_, g) = lr_loss_grad(&ModelVector::zeros(2), &data.all()).unwrap();
        assert_eq!(&*g, &[-0.5, 0.0]);
    }

    #[test]
    fn lr_is_stable_for_huge_margins() {
        let data = ds(&[&[1.0]], &[1.0]);
        let (loss, g) = lr_loss_grad(&ModelVector::from(vec![-1e4]), &data.all()).unwrap();
        assert!((loss - 1e4).abs() < 1e-9);
        assert!((g[0] + 1.0).abs() < 1e-12);
        let (loss, g) = lr_loss_grad(&ModelVector::from(vec![1e4]), &data.all()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn svm_examples() {
        let data = generate_synthetic(20, 3, Task::Classification, 5).unwrap();
        let (loss, _) = svm_loss_grad(&ModelVector::zeros(3), &data.all()).unwrap();
        assert_eq!(loss, 1.0);

        let one = ds(&[&[2.0]], &[1.0]);
        let (loss, g) = svm_loss_grad(&ModelVector::from(vec![1.0]), &one.all()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(&*g, &[0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let data = ds(&[&[1.0, 2.0]], &[1.0]);
        assert!(matches!(
            lr_loss_grad(&ModelVector::zeros(3), &data.all()),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            kmeans_assign_stats(&ModelVector::zeros(3), 2, &data.all()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kmeans_nearest_assignment() {
        let data = ds(&[&[0.0], &[10.0]], &[0.0, 0.0]);
        let s = kmeans_assign_stats(&ModelVector::from(vec![1.0, 9.0]), 2, &data.all()).unwrap();
        assert_eq!(s.counts, vec![1, 1]);
        assert_eq!(s.sums, vec![0.0, 10.0]);
        assert_eq!(s.sse, 2.0);
    }

    #[test]
    fn kmeans_tie_goes_to_lowest_index() {
        let data = ds(&[&[1.0]], &[0.0]);
        let s = kmeans_assign_stats(&ModelVector::from(vec![0.0, 2.0]), 2, &data.all()).unwrap();
        assert_eq!(s.counts, vec![1, 0]);
    }

    #[test]
    fn cluster_stats_vector_roundtrip() {
        let data = generate_synthetic(30, 2, Task::Clustering { k: 3 }, 9).unwrap();
        let c = ModelVector::from(vec![0.0, 0.0, 5.0, 5.0, -5.0, 5.0]);
        let s = kmeans_assign_stats(&c, 3, &data.all()).unwrap();
        assert_eq!(ClusterStats::from_vector(3, 2, &s.to_vector()).unwrap(), s);
        assert_eq!(s.rows(), 30);
    }

    #[test]
    fn evaluate_examples() {
        let data = generate_synthetic(40, 3, Task::Classification, 3).unwrap();
        let e = evaluate(&ModelVector::zeros(3), &data, ModelKind::Lr).unwrap();
        assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-15);

        let sep = ds(
            &[&[1.0, 0.0], &[2.0, 1.0], &[-1.0, 0.5], &[-3.0, -1.0]],
            &[1.0, 1.0, -1.0, -1.0],
        );
        let e = evaluate(&ModelVector::from(vec![1.0, 0.0]), &sep, ModelKind::Svm).unwrap();
        assert_eq!(e.metric, Metric::Accuracy(1.0));
    }
}

//! Dense datasets, row partitions and the two ways of obtaining data:
//! a seeded synthetic generator and a libsvm text loader.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVector;

/// Immutable dense dataset with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    n_features: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::invalid(format!(
                "feature matrix has {} values, expected {} rows x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(bad) = features.iter().chain(&labels).find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {bad} in dataset")));
        }
        Ok(Self {
            features,
            labels,
            n_features,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// True when every label is exactly -1 or +1.
    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&y| y == 1.0 || y == -1.0)
    }

    /// Size of the raw feature and label payload, in bytes.
    pub fn size_bytes(&self) -> usize {
        8 * (self.features.len() + self.labels.len())
    }

    /// Copies a contiguous run of rows into a new dataset.
    pub fn slice(&self, rows: Range<usize>) -> Dataset {
        let d = self.n_features;
        Dataset {
            features: self.features[rows.start * d..rows.end * d].to_vec(),
            labels: self.labels[rows].to_vec(),
            n_features: d,
        }
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            n_features: self.n_features,
        }
    }

    pub fn all(&self) -> Batch<'_> {
        Batch::range(self, 0..self.n_rows())
    }

    /// Uniform sample without replacement of `ceil(frac * n)` rows (at least one).
    pub fn sample(&self, frac: f64, seed: u64) -> Result<Dataset> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::invalid(format!("sample fraction {frac} not in (0, 1]")));
        }
        let n = self.n_rows();
        let take = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx.sort_unstable();
        Ok(self.select(&idx))
    }
}

/// A set of rows of a dataset: either a contiguous range or an explicit index list.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    data: &'a Dataset,
    rows: Rows<'a>,
}

#[derive(Debug, Clone, Copy)]
enum Rows<'a> {
    Range(usize, usize),
    Indices(&'a [usize]),
}

impl<'a> Batch<'a> {
    pub fn range(data: &'a Dataset, rows: Range<usize>) -> Self {
        assert!(rows.end <= data.n_rows(), "batch range beyond dataset");
        Batch {
            data,
            rows: Rows::Range(rows.start, rows.end),
        }
    }

    pub fn indices(data: &'a Dataset, rows: &'a [usize]) -> Self {
        Batch {
            data,
            rows: Rows::Indices(rows),
        }
    }

    pub fn len(&self) -> usize {
        match self.rows {
            Rows::Range(a, b) => b - a,
            Rows::Indices(ix) => ix.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.data.n_features
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], f64)> + 'a {
        let data = self.data;
        let ids: Box<dyn Iterator<Item = usize> + 'a> = match self.rows {
            Rows::Range(a, b) => Box::new(a..b),
            Rows::Indices(ix) => Box::new(ix.iter().copied()),
        };
        ids.map(move |i| (data.row(i), data.label(i)))
    }
}

/// Row range of the full dataset owned by one worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub id: usize,
    pub owner: usize,
    pub rows: Range<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn batch<'a>(&self, data: &'a Dataset) -> Batch<'a> {
        Batch::range(data, self.rows.clone())
    }
}

/// Splits `n_rows` into `n_parts` contiguous partitions whose sizes differ by at most one.
/// Partition `i` is owned by worker `i`.
pub fn partition(n_rows: usize, n_parts: usize) -> Result<Vec<Partition>> {
    if n_parts == 0 {
        return Err(Error::invalid("cannot partition into zero parts"));
    }
    let base = n_rows / n_parts;
    let extra = n_rows % n_parts;
    let mut start = 0;
    Ok((0..n_parts)
        .map(|id| {
            let len = base + usize::from(id < extra);
            let p = Partition {
                id,
                owner: id,
                rows: start..start + len,
            };
            start += len;
            p
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    /// Points around a hidden hyperplane, labels in {-1, +1} with 10% flipped.
    Classification,
    /// Points drawn from `k` well-separated unit-variance Gaussians; labels hold the cluster id.
    Clustering { k: usize },
    /// Linear targets with small Gaussian noise.
    Regression,
}

/// The generating parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Hyperplane(ModelVector),
    Centers { k: usize, centers: ModelVector },
    Linear(ModelVector),
}

const LABEL_NOISE: f64 = 0.1;
const REGRESSION_NOISE: f64 = 0.1;
const CENTER_SPREAD: f64 = 10.0;
const MIN_CENTER_GAP: f64 = 8.0;

pub fn generate_synthetic(n: usize, d: usize, task: Task, seed: u64) -> Result<Dataset> {
    generate_with_truth(n, d, task, seed).map(|(ds, _)| ds)
}

pub fn generate_with_truth(n: usize, d: usize, task: Task, seed: u64) -> Result<(Dataset, GroundTruth)> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs n >= 1 and d >= 1, got n={n}, d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);

    let truth = match task {
        Task::Classification => {
            let mut w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            w.iter_mut().for_each(|v| *v *= 2.0 / norm);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let margin: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                let mut y = if margin >= 0.0 { 1.0 } else { -1.0 };
                if rng.random::<f64>() < LABEL_NOISE {
                    y = -y;
                }
                features.extend(x);
                labels.push(y);
            }
            GroundTruth::Hyperplane(ModelVector::from(w))
        }
        Task::Clustering { k } => {
            if k == 0 {
                return Err(Error::invalid("clustering needs k >= 1"));
            }
            let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mut attempts = 0;
            while centers.len() < k {
                let c: Vec<f64> = (0..d)
                    .map(|_| rng.random_range(-CENTER_SPREAD..CENTER_SPREAD))
                    .collect();
                let far = centers
                    .iter()
                    .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_CENTER_GAP);
                attempts += 1;
                // give up on the gap after many rejections (tiny d, large k)
                if far || attempts > 10_000 {
                    centers.push(c);
                }
            }
            for i in 0..n {
                let j = i % k;
                features.extend(centers[j].iter().map(|c| c + normal(&mut rng)));
                labels.push(j as f64);
            }
            GroundTruth::Centers {
                k,
                centers: ModelVector::from(centers.concat()),
            }
        }
        Task::Regression => {
            let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + REGRESSION_NOISE * normal(&mut rng);
                features.extend(x);
                labels.push(y);
            }
            GroundTruth::Linear(ModelVector::from(w))
        }
    };
    Ok((Dataset::new(features, labels, d)?, truth))
}

/// Reads a libsvm/svmlight text file into a dense dataset with `d` features.
pub fn load_libsvm(path: impl AsRef<Path>, d: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_libsvm(&text, d)
}

/// Parses libsvm text: `label idx:value idx:value ...`, 1-based indices.
/// Labels given as 0/1 are mapped to -1/+1; anything after `#` is ignored.
pub fn parse_libsvm(text: &str, d: usize) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::invalid("libsvm feature count must be >= 1"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad label {label_tok:?}"),
        })?;
        let mut row = vec![0.0; d];
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected index:value, got {tok:?}"),
            })?;
            let index: usize = idx.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad feature index {idx:?}"),
            })?;
            let value: f64 = val.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad feature value {val:?}"),
            })?;
            if index == 0 {
                return Err(Error::Parse {
                    line,
                    message: "feature indices are 1-based".into(),
                });
            }
            if index > d {
                return Err(Error::Range { line, index, dim: d });
            }
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value {val:?}"),
                });
            }
            row[index - 1] = value;
        }
        features.extend(row);
        labels.push(label);
    }
    if labels.iter().all(|&y| y == 0.0 || y == 1.0) {
        labels.iter_mut().for_each(|y| *y = if *y == 0.0 { -1.0 } else { 1.0 });
    }
    Dataset::new(features, labels, d)
}

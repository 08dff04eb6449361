//! Storage-mediated collectives.
//!
//! Workers never talk to each other directly: every exchange is a `put` followed by some
//! other worker polling `list` and issuing a `get`. Rank 0 is the leader for
//! [`allreduce`]; in [`scatterreduce`] rank `r` aggregates slice `r` of the vector.
//!
//! The allreduce leader keeps its own input in memory and never writes it to the store,
//! so one round costs exactly `3w - 2` remote transfers.

mod blob;
mod key;

use std::collections::BTreeSet;
use std::ops::Range;

pub use self::blob::{decode_update, decode_update_prefix, encode_update, encoded_len, HEADER_BYTES};
pub use self::key::{make_key, parse_key, BlobKey, KeyKind};

use crate::error::{check_dim, Error, Result};
use crate::model::ModelVector;
use crate::storage::{BlobStore, WaitOptions, Waited};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Sum,
    /// `sum_i weight_i * v_i / sum_i weight_i`.
    WeightedMean,
}

/// Which collective a job uses for a synchronous round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[serde(rename = "allreduce")]
    AllReduce,
    #[serde(rename = "scatterreduce")]
    ScatterReduce,
    Ps,
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "allreduce" => Ok(Pattern::AllReduce),
            "scatterreduce" => Ok(Pattern::ScatterReduce),
            "ps" => Ok(Pattern::Ps),
            other => Err(Error::invalid(format!(
                "unknown pattern {other:?}; expected allreduce, scatterreduce or ps"
            ))),
        }
    }
}

/// A round's identity, used for garbage collection of the previous round's keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Round {
    pub epoch: u64,
    pub iter: u64,
}

/// Everything one worker needs for one collective call.
pub struct CollectiveContext<'a> {
    pub store: &'a dyn BlobStore,
    pub n_workers: usize,
    pub rank: usize,
    pub epoch: u64,
    pub iter: u64,
    pub op: ReduceOp,
    pub wait: WaitOptions,
    /// Previous round of the same job; its keys are deleted once this round proves
    /// every worker is past it.
    pub previous: Option<Round>,
}

impl<'a> CollectiveContext<'a> {
    pub fn new(
        store: &'a dyn BlobStore,
        n_workers: usize,
        rank: usize,
        epoch: u64,
        iter: u64,
        op: ReduceOp,
    ) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::invalid("n_workers must be >= 1"));
        }
        if rank >= n_workers {
            return Err(Error::invalid(format!(
                "rank {rank} out of range for {n_workers} workers"
            )));
        }
        Ok(CollectiveContext {
            store,
            n_workers,
            rank,
            epoch,
            iter,
            op,
            wait: WaitOptions::default(),
            previous: None,
        })
    }

    pub fn round(&self) -> Round {
        Round {
            epoch: self.epoch,
            iter: self.iter,
        }
    }

    fn merged_key(&self) -> String {
        BlobKey::Merged {
            epoch: self.epoch,
            iter: self.iter,
        }
        .to_string()
    }

    /// Waits for `count` keys under `prefix` accepted by `filter`, mapping a timeout to a
    /// straggler error naming the ranks (`rank_of`) that never showed up.
    fn await_keys(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        expected: impl Iterator<Item = usize>,
        rank_of: impl Fn(&BlobKey) -> usize,
    ) -> Result<Vec<(usize, String)>> {
        match self.store.wait_for(prefix, filter, count, &self.wait)? {
            Waited::Ready(keys) => {
                let mut ranked = keys
                    .into_iter()
                    .map(|k| Ok((rank_of(&parse_key(&k)?), k)))
                    .collect::<Result<Vec<_>>>()?;
                ranked.sort();
                Ok(ranked)
            }
            Waited::TimedOut(keys) => {
                let present: BTreeSet<usize> = keys
                    .iter()
                    .filter_map(|k| parse_key(k).ok())
                    .map(|k| rank_of(&k))
                    .collect();
                Err(Error::StragglerTimeout {
                    what: prefix.to_string(),
                    missing: expected.filter(|r| !present.contains(r)).collect(),
                    waited_s: self.wait.timeout.as_secs_f64(),
                })
            }
        }
    }

    fn fetch(&self, key: &str) -> Result<(ModelVector, f64)> {
        let bytes = self
            .store
            .get(key)?
            .ok_or_else(|| Error::Channel(format!("key {key} vanished after it was listed")))?;
        decode_update(&bytes)
    }
}

/// Reduces `(rank, weight, values)` parts in rank order so every code path sums in the
/// same sequence. Returns the reduction and the total weight.
fn reduce(op: ReduceOp, mut parts: Vec<(usize, f64, &[f64])>, dim: usize) -> Result<(ModelVector, f64)> {
    parts.sort_by_key(|p| p.0);
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (_, weight, values) in &parts {
        check_dim(dim, values.len())?;
        total += weight;
        match op {
            ReduceOp::Sum => acc.iter_mut().zip(values.iter()).for_each(|(a, v)| *a += v),
            ReduceOp::WeightedMean => acc.iter_mut().zip(values.iter()).for_each(|(a, v)| *a += weight * v),
        }
    }
    if op == ReduceOp::WeightedMean {
        if !(total > 0.0) {
            return Err(Error::invalid(format!(
                "weighted mean needs positive total weight, got {total}"
            )));
        }
        acc.iter_mut().for_each(|a| *a /= total);
    }
    Ok((ModelVector::from(acc), total))
}

/// Reduction of a single input, matching what [`reduce`] returns for one part.
fn reduce_one(op: ReduceOp, v: &[f64], weight: f64) -> Result<ModelVector> {
    Ok(reduce(op, vec![(0, weight, v)], v.len())?.0)
}

/// Leader-based allreduce. Every rank returns the same vector.
pub fn allreduce(ctx: &CollectiveContext<'_>, v: &ModelVector, weight: f64) -> Result<ModelVector> {
    let w = ctx.n_workers;
    if w == 1 {
        return reduce_one(ctx.op, v, weight);
    }
    let (e, i) = (ctx.epoch, ctx.iter);
    let merged = ctx.merged_key();
    if ctx.rank == 0 {
        let prefix = key::local_prefix(e, i);
        let keys = ctx.await_keys(&prefix, &|_| true, w - 1, 1..w, |k| match k {
            BlobKey::Local { src, .. } => *src,
            _ => usize::MAX,
        })?;
        let fetched = keys
            .iter()
            .map(|(r, k)| ctx.fetch(k).map(|(v, wt)| (*r, v, wt)))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = vec![(0, weight, &v[..])];
        parts.extend(fetched.iter().map(|(r, v, wt)| (*r, *wt, &v[..])));
        let (out, total) = reduce(ctx.op, parts, v.dim())?;
        ctx.store.put(&merged, &encode_update(&out, total))?;
        if let Some(prev) = ctx.previous {
            ctx.store.delete(&key::local_prefix(prev.epoch, prev.iter))?;
            ctx.store.delete(
                &BlobKey::Merged {
                    epoch: prev.epoch,
                    iter: prev.iter,
                }
                .to_string(),
            )?;
        }
        Ok(out)
    } else {
        let mine = BlobKey::Local {
            epoch: e,
            iter: i,
            src: ctx.rank,
        }
        .to_string();
        ctx.store.put(&mine, &encode_update(v, weight))?;
        let want = merged.clone();
        ctx.await_keys(&merged, &move |k| k == want, 1, std::iter::once(0), |_| 0)?;
        let (out, _) = ctx.fetch(&merged)?;
        check_dim(v.dim(), out.dim())?;
        Ok(out)
    }
}

/// Contiguous slice `j` of a `dim`-vector split `w` ways: `ceil(dim / w)` elements,
/// with the tail slices short or empty.
pub fn chunk_range(dim: usize, w: usize, j: usize) -> Range<usize> {
    let size = dim.div_ceil(w);
    let start = (j * size).min(dim);
    let end = ((j + 1) * size).min(dim);
    start..end
}

/// Scatter-reduce followed by an all-gather: rank `r` reduces slice `r` for everyone.
pub fn scatterreduce(ctx: &CollectiveContext<'_>, v: &ModelVector, weight: f64) -> Result<ModelVector> {
    let w = ctx.n_workers;
    if w == 1 {
        return reduce_one(ctx.op, v, weight);
    }
    let (e, i, me) = (ctx.epoch, ctx.iter, ctx.rank);
    let dim = v.dim();
    for j in (0..w).filter(|&j| j != me) {
        let key = BlobKey::Chunk {
            epoch: e,
            iter: i,
            src: me,
            dst: j,
        }
        .to_string();
        ctx.store
            .put(&key, &encode_update(&v[chunk_range(dim, w, j)], weight))?;
    }

    let mine = chunk_range(dim, w, me);
    let chunks = ctx.await_keys(
        &key::chunk_prefix(e, i),
        &|k| matches!(parse_key(k), Ok(BlobKey::Chunk { dst, .. }) if dst == me),
        w - 1,
        (0..w).filter(|&r| r != me),
        |k| match k {
            BlobKey::Chunk { src, .. } => *src,
            _ => usize::MAX,
        },
    )?;
    let fetched = chunks
        .iter()
        .map(|(r, k)| ctx.fetch(k).map(|(v, wt)| (*r, v, wt)))
        .collect::<Result<Vec<_>>>()?;
    let mut parts = vec![(me, weight, &v[mine.clone()])];
    parts.extend(fetched.iter().map(|(r, v, wt)| (*r, *wt, &v[..])));
    let (reduced, total) = reduce(ctx.op, parts, mine.len())?;
    let reduced_key = BlobKey::Reduced {
        epoch: e,
        iter: i,
        dst: me,
    }
    .to_string();
    ctx.store.put(&reduced_key, &encode_update(&reduced, total))?;

    let others = ctx.await_keys(
        &key::reduced_prefix(e, i),
        &|k| matches!(parse_key(k), Ok(BlobKey::Reduced { dst, .. }) if dst != me),
        w - 1,
        (0..w).filter(|&r| r != me),
        |k| match k {
            BlobKey::Reduced { dst, .. } => *dst,
            _ => usize::MAX,
        },
    )?;
    let mut out = vec![0.0; dim];
    out[mine.clone()].copy_from_slice(&reduced);
    for (j, k) in &others {
        let (slice, _) = ctx.fetch(k)?;
        let range = chunk_range(dim, w, *j);
        check_dim(range.len(), slice.dim())?;
        out[range].copy_from_slice(&slice);
    }

    // Seeing every foreign chunk of this round means all peers finished the previous one,
    // so the keys this rank wrote back then are no longer needed.
    if let Some(prev) = ctx.previous {
        ctx.store.delete(&format!("c/{}/{}/{me}/", prev.epoch, prev.iter))?;
        ctx.store.delete(
            &BlobKey::Reduced {
                epoch: prev.epoch,
                iter: prev.iter,
                dst: me,
            }
            .to_string(),
        )?;
    }
    Ok(ModelVector::from(out))
}

/// One synchronous round through the chosen storage collective.
pub fn bsp_round(ctx: &CollectiveContext<'_>, pattern: Pattern, v: &ModelVector, weight: f64) -> Result<ModelVector> {
    match pattern {
        Pattern::AllReduce => allreduce(ctx, v, weight),
        Pattern::ScatterReduce => scatterreduce(ctx, v, weight),
        Pattern::Ps => Err(Error::invalid("the ps pattern does not go through the blob store")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{InstrumentedStore, MemStore, StoreTrace};
    use std::sync::Arc;
    use std::thread;
    use std::time::Duration;

    fn run(w: usize, pattern: Pattern, op: ReduceOp, inputs: Vec<Vec<f64>>) -> (Vec<ModelVector>, Arc<StoreTrace>) {
        let shared = Arc::new(MemStore::new());
        let trace = StoreTrace::new();
        let outs = thread::scope(|s| {
            let handles: Vec<_> = inputs
                .into_iter()
                .enumerate()
                .map(|(r, v)| {
                    let store = InstrumentedStore::new(shared.clone(), r, trace.clone());
                    s.spawn(move || {
                        let ctx = CollectiveContext::new(&store, w, r, 0, 0, op).unwrap();
                        bsp_round(&ctx, pattern, &ModelVector::from(v), 1.0).unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        (outs, trace)
    }

    #[test]
    fn allreduce_sums() {
        let (outs, trace) = run(
            3,
            Pattern::AllReduce,
            ReduceOp::Sum,
            vec![vec![1., 2.], vec![3., 4.], vec![5., 6.]],
        );
        for o in outs {
            assert_eq!(o.into_inner(), vec![9., 12.]);
        }
        assert_eq!(trace.transfers(), 7);
    }

    #[test]
    fn scatterreduce_sums() {
        let (outs, trace) = run(
            2,
            Pattern::ScatterReduce,
            ReduceOp::Sum,
            vec![vec![1., 2., 3., 4.], vec![10., 20., 30., 40.]],
        );
        for o in outs {
            assert_eq!(o.into_inner(), vec![11., 22., 33., 44.]);
        }
        assert_eq!(trace.transfers_by(0), 4);
        assert_eq!(trace.transfers_by(1), 4);
    }

    #[test]
    fn single_worker_is_identity_without_transfers() {
        for pattern in [Pattern::AllReduce, Pattern::ScatterReduce] {
            let (outs, trace) = run(1, pattern, ReduceOp::Sum, vec![vec![1.5, -2.0]]);
            assert_eq!(outs[0].clone().into_inner(), vec![1.5, -2.0]);
            assert_eq!(trace.transfers(), 0);
        }
    }

    #[test]
    fn more_workers_than_elements() {
        let inputs: Vec<Vec<f64>> = (0..5).map(|r| vec![r as f64, 1.0]).collect();
        let (outs, _) = run(5, Pattern::ScatterReduce, ReduceOp::Sum, inputs);
        for o in outs {
            assert_eq!(o.into_inner(), vec![10.0, 5.0]);
        }
    }

    #[test]
    fn weighted_mean_uses_weights() {
        let store = MemStore::new();
        let (out, total) = reduce(
            ReduceOp::WeightedMean,
            vec![(1, 3.0, &[0.0][..]), (0, 1.0, &[4.0][..])],
            1,
        )
        .unwrap();
        assert_eq!(out.into_inner(), vec![1.0]);
        assert_eq!(total, 4.0);
        let ctx = CollectiveContext::new(&store, 1, 0, 0, 0, ReduceOp::WeightedMean).unwrap();
        assert_eq!(
            allreduce(&ctx, &ModelVector::from(vec![2.0]), 5.0)
                .unwrap()
                .into_inner(),
            vec![2.0]
        );
    }

    #[test]
    fn leader_timeout_names_missing_ranks() {
        let store = MemStore::new();
        store.put("u/0/0/2", &encode_update(&[1.0], 1.0)).unwrap();
        let mut ctx = CollectiveContext::new(&store, 4, 0, 0, 0, ReduceOp::Sum).unwrap();
        ctx.wait.timeout = Duration::from_millis(30);
        ctx.wait.poll_interval = Duration::from_millis(5);
        match allreduce(&ctx, &ModelVector::from(vec![0.0]), 1.0) {
            Err(Error::StragglerTimeout { missing, .. }) => assert_eq!(missing, vec![1, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn previous_round_is_collected() {
        let shared = Arc::new(MemStore::new());
        thread::scope(|s| {
            for r in 0..3usize {
                let store = shared.clone();
                s.spawn(move || {
                    let mut prev = None;
                    for iter in 0..3 {
                        let mut ctx = CollectiveContext::new(&store, 3, r, 0, iter, ReduceOp::Sum).unwrap();
                        ctx.previous = prev;
                        let out = allreduce(&ctx, &ModelVector::from(vec![1.0]), 1.0).unwrap();
                        assert_eq!(out.into_inner(), vec![3.0]);
                        prev = Some(ctx.round());
                    }
                });
            }
        });
        assert!(shared.list("m/0/0").unwrap().is_empty());
        assert!(shared.list("u/0/0/").unwrap().is_empty());
        assert_eq!(shared.list("m/0/2").unwrap(), vec!["m/0/2".to_string()]);
    }

    #[test]
    fn chunk_ranges_tile_the_vector() {
        for dim in 0..20 {
            for w in 1..8 {
                let mut next = 0;
                for j in 0..w {
                    let r = chunk_range(dim, w, j);
                    assert_eq!(r.start, next);
                    assert!(r.len() <= dim.div_ceil(w));
                    next = r.end;
                }
                assert_eq!(next, dim);
            }
        }
    }
}

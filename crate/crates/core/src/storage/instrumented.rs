use std::sync::{Arc, Mutex};

use super::{BlobStore, WaitOptions, Waited};
use crate::clock::WorkerClock;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOp {
    Put,
    Get,
    List,
    Delete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub seq: usize,
    pub rank: usize,
    pub op: StoreOp,
    pub key: String,
    pub bytes: usize,
    /// Worker's clock when the event was recorded, if a clock was attached.
    pub time: Option<f64>,
}

/// Ordered log of store operations shared by all workers of a job.
#[derive(Debug, Default)]
pub struct StoreTrace {
    events: Mutex<Vec<TraceEvent>>,
}

impl StoreTrace {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn record(&self, rank: usize, op: StoreOp, key: &str, bytes: usize, time: Option<f64>) {
        let mut ev = self.events.lock().unwrap_or_else(|e| e.into_inner());
        let seq = ev.len();
        ev.push(TraceEvent {
            seq,
            rank,
            op,
            key: key.to_string(),
            bytes,
            time,
        });
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    /// Remote transfers: puts plus successful gets.
    pub fn transfers(&self) -> usize {
        self.events().iter().filter(|e| is_transfer(e.op)).count()
    }

    pub fn transfers_by(&self, rank: usize) -> usize {
        self.events()
            .iter()
            .filter(|e| e.rank == rank && is_transfer(e.op))
            .count()
    }

    pub fn bytes_transferred(&self) -> usize {
        self.events()
            .iter()
            .filter(|e| is_transfer(e.op))
            .map(|e| e.bytes)
            .sum()
    }

    pub fn bytes_read_by(&self, rank: usize) -> usize {
        self.events()
            .iter()
            .filter(|e| e.rank == rank && e.op == StoreOp::Get)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn largest_put(&self) -> usize {
        self.events()
            .iter()
            .filter(|e| e.op == StoreOp::Put)
            .map(|e| e.bytes)
            .max()
            .unwrap_or(0)
    }
}

fn is_transfer(op: StoreOp) -> bool {
    matches!(op, StoreOp::Put | StoreOp::Get)
}

/// Wraps a worker's store and logs each operation into a shared [`StoreTrace`].
/// Puts are logged before they happen and gets after, so the log order never shows a
/// read ahead of the write it observed.
pub struct InstrumentedStore<S> {
    inner: S,
    rank: usize,
    trace: Arc<StoreTrace>,
    clock: Option<Arc<WorkerClock>>,
}

impl<S: BlobStore> InstrumentedStore<S> {
    pub fn new(inner: S, rank: usize, trace: Arc<StoreTrace>) -> Self {
        InstrumentedStore {
            inner,
            rank,
            trace,
            clock: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<WorkerClock>) -> Self {
        self.clock = Some(clock);
        self
    }

    fn now(&self) -> Option<f64> {
        self.clock.as_ref().map(|c| c.now())
    }
}

impl<S: BlobStore> BlobStore for InstrumentedStore<S> {
    fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        self.trace.record(self.rank, StoreOp::Put, key, value.len(), self.now());
        self.inner.put(key, value)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        let v = self.inner.get(key)?;
        if let Some(bytes) = &v {
            self.trace.record(self.rank, StoreOp::Get, key, bytes.len(), self.now());
        }
        Ok(v)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let keys = self.inner.list(prefix)?;
        self.trace.record(self.rank, StoreOp::List, prefix, 0, self.now());
        Ok(keys)
    }

    fn delete(&self, prefix: &str) -> Result<usize> {
        self.trace.record(self.rank, StoreOp::Delete, prefix, 0, self.now());
        self.inner.delete(prefix)
    }

    fn wait_for(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        opts: &WaitOptions,
    ) -> Result<Waited> {
        let w = self.inner.wait_for(prefix, filter, count, opts)?;
        self.trace.record(self.rank, StoreOp::List, prefix, 0, self.now());
        Ok(w)
    }
}

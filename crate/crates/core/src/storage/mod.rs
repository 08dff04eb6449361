//! Blob stores that stand in for the shared storage services workers talk through.
//!
//! All workers share one [`BlobStore`]. Writes are atomic, and `list` returns every key
//! whose `put` finished before the listing began, which is what the polling protocols
//! in [`crate::collective`] rely on.

mod fs;
mod instrumented;
mod memory;
mod profile;
mod timed;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

pub use self::fs::FsStore;
pub use self::instrumented::{InstrumentedStore, StoreOp, StoreTrace, TraceEvent};
pub use self::memory::MemStore;
pub use self::profile::{builtin_profiles, lookup_profile, ChannelProfile, BYTES_PER_MB};
pub use self::timed::{with_profile, TimedStore};

use crate::error::{Error, Result};

pub const MAX_KEY_BYTES: usize = 512;

/// Result of waiting for a set of keys to show up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Waited {
    Ready(Vec<String>),
    /// The deadline passed; holds the matching keys that did exist.
    TimedOut(Vec<String>),
}

/// How long and how often to poll while waiting.
#[derive(Debug, Clone)]
pub struct WaitOptions {
    pub timeout: Duration,
    pub poll_interval: Duration,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for WaitOptions {
    fn default() -> Self {
        WaitOptions {
            timeout: Duration::from_secs(600),
            poll_interval: Duration::from_millis(10),
            cancel: None,
        }
    }
}

impl WaitOptions {
    pub fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
    }
}

pub trait BlobStore: Send + Sync {
    fn put(&self, key: &str, value: &[u8]) -> Result<()>;

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>>;

    /// Keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>>;

    /// Removes every key starting with `prefix`; returns how many were removed.
    fn delete(&self, prefix: &str) -> Result<usize>;

    /// Blocks until at least `count` keys under `prefix` satisfy `filter`.
    /// The default implementation polls `list`.
    fn wait_for(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        opts: &WaitOptions,
    ) -> Result<Waited> {
        let start = Instant::now();
        loop {
            let keys: Vec<String> = self.list(prefix)?.into_iter().filter(|k| filter(k)).collect();
            if keys.len() >= count {
                return Ok(Waited::Ready(keys));
            }
            if opts.cancelled() {
                return Err(Error::Cancelled);
            }
            if start.elapsed() >= opts.timeout {
                return Ok(Waited::TimedOut(keys));
            }
            thread::sleep(opts.poll_interval);
        }
    }
}

impl<S: BlobStore + ?Sized> BlobStore for Arc<S> {
    fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        (**self).put(key, value)
    }
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        (**self).get(key)
    }
    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        (**self).list(prefix)
    }
    fn delete(&self, prefix: &str) -> Result<usize> {
        (**self).delete(prefix)
    }
    fn wait_for(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        opts: &WaitOptions,
    ) -> Result<Waited> {
        (**self).wait_for(prefix, filter, count, opts)
    }
}

pub fn validate_key(key: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::InvalidKey {
            key: key.into(),
            reason: "empty key".into(),
        });
    }
    if key.len() > MAX_KEY_BYTES {
        return Err(Error::InvalidKey {
            key: key.into(),
            reason: format!("longer than {MAX_KEY_BYTES} bytes"),
        });
    }
    Ok(())
}

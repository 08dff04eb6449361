use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{validate_key, BlobStore, WaitOptions, Waited};
use crate::error::{Error, Result};

/// In-memory store. Waiters are woken on every put instead of sleeping between polls.
#[derive(Debug, Default)]
pub struct MemStore {
    map: Mutex<BTreeMap<String, Arc<Vec<u8>>>>,
    changed: Condvar,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Arc<Vec<u8>>>> {
        self.map.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }
}

fn matching(map: &BTreeMap<String, Arc<Vec<u8>>>, prefix: &str, filter: &dyn Fn(&str) -> bool) -> Vec<String> {
    map.range(prefix.to_string()..)
        .take_while(|(k, _)| k.starts_with(prefix))
        .filter(|(k, _)| filter(k))
        .map(|(k, _)| k.clone())
        .collect()
}

// Upper bound on a single condvar sleep so cancellation is noticed promptly.
const WAKE_SLICE: Duration = Duration::from_millis(50);

impl BlobStore for MemStore {
    fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        validate_key(key)?;
        self.lock().insert(key.to_string(), Arc::new(value.to_vec()));
        self.changed.notify_all();
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        Ok(self.lock().get(key).map(|v| v.as_ref().clone()))
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        Ok(matching(&self.lock(), prefix, &|_| true))
    }

    fn delete(&self, prefix: &str) -> Result<usize> {
        let mut map = self.lock();
        let doomed = matching(&map, prefix, &|_| true);
        for k in &doomed {
            map.remove(k);
        }
        Ok(doomed.len())
    }

    fn wait_for(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        opts: &WaitOptions,
    ) -> Result<Waited> {
        let deadline = Instant::now() + opts.timeout;
        let mut map = self.lock();
        loop {
            let keys = matching(&map, prefix, filter);
            if keys.len() >= count {
                return Ok(Waited::Ready(keys));
            }
            if opts.cancelled() {
                return Err(Error::Cancelled);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Waited::TimedOut(keys));
            }
            let slice = (deadline - now).min(WAKE_SLICE);
            map = self
                .changed
                .wait_timeout(map, slice)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

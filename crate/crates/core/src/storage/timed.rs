use std::sync::Arc;

use super::{BlobStore, ChannelProfile, WaitOptions, Waited};
use crate::clock::{VirtualClock, WorkerClock};
use crate::error::{Error, Result};

/// A worker's view of a shared store under a channel persona.
///
/// The profile's item limit always applies. When the worker clock is virtual, each op
/// also charges it: `latency + bytes / bandwidth` for puts and gets, `latency` for a list
/// or a completed wait. Deletes are free. Values are never altered.
pub struct TimedStore {
    inner: Arc<dyn BlobStore>,
    profile: ChannelProfile,
    clock: Arc<WorkerClock>,
    timeline: Arc<VirtualClock>,
}

pub fn with_profile(
    inner: Arc<dyn BlobStore>,
    profile: ChannelProfile,
    clock: Arc<WorkerClock>,
    timeline: Arc<VirtualClock>,
) -> TimedStore {
    TimedStore {
        inner,
        profile,
        clock,
        timeline,
    }
}

impl TimedStore {
    pub fn profile(&self) -> &ChannelProfile {
        &self.profile
    }

    pub fn clock(&self) -> &Arc<WorkerClock> {
        &self.clock
    }

    fn charge(&self, secs: f64) {
        if self.clock.is_virtual() {
            self.clock.charge(self.clock.store_phase(), secs);
        }
    }
}

impl BlobStore for TimedStore {
    fn put(&self, key: &str, value: &[u8]) -> Result<()> {
        if let Some(limit) = self.profile.max_item_bytes {
            if value.len() > limit {
                return Err(Error::PayloadTooLarge {
                    size: value.len(),
                    limit,
                });
            }
        }
        self.charge(self.profile.transfer_s(value.len()));
        // stamp before the key becomes visible so no waiter can observe it unstamped
        self.timeline.stamp(key, self.clock.now());
        self.inner.put(key, value)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>> {
        let value = self.inner.get(key)?;
        match &value {
            Some(bytes) => {
                if self.clock.is_virtual() {
                    if let Some(t) = self.timeline.stamp_of(key) {
                        self.clock.advance_to(self.clock.store_phase(), t);
                    }
                }
                self.charge(self.profile.transfer_s(bytes.len()));
            }
            None => self.charge(self.profile.latency_s),
        }
        Ok(value)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        self.charge(self.profile.latency_s);
        self.inner.list(prefix)
    }

    fn delete(&self, prefix: &str) -> Result<usize> {
        self.timeline.forget_prefix(prefix);
        self.inner.delete(prefix)
    }

    /// In virtual mode the wait itself is free; the worker jumps to the moment the last
    /// awaited key was written and pays for the one listing that saw it. A wait whose
    /// virtual length exceeds `opts.timeout` reports the keys stamped within the deadline.
    fn wait_for(
        &self,
        prefix: &str,
        filter: &dyn Fn(&str) -> bool,
        count: usize,
        opts: &WaitOptions,
    ) -> Result<Waited> {
        let entered = self.clock.now();
        let waited = self.inner.wait_for(prefix, filter, count, opts)?;
        if !self.clock.is_virtual() {
            return Ok(waited);
        }
        let keys = match waited {
            Waited::Ready(keys) => keys,
            timed_out => return Ok(timed_out),
        };
        let deadline = entered + opts.timeout.as_secs_f64();
        let latest = self.timeline.latest(&keys);
        if latest > deadline {
            let on_time = keys
                .into_iter()
                .filter(|k| self.timeline.stamp_of(k).unwrap_or(0.0) <= deadline)
                .collect();
            self.clock.advance_to(self.clock.store_phase(), deadline);
            return Ok(Waited::TimedOut(on_time));
        }
        self.clock.advance_to(self.clock.store_phase(), latest);
        self.charge(self.profile.latency_s);
        Ok(Waited::Ready(keys))
    }
}

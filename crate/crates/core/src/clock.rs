//! Per-worker clocks and phase accounting.
//!
//! In simulate mode every worker carries a virtual clock that only moves when it is
//! charged. Blobs written through a timed store are stamped with the writer's virtual
//! time, and a worker that waits for a blob jumps forward to that stamp. This keeps
//! barrier semantics (nobody leaves a round before its last input exists) and makes
//! virtual times independent of how the host schedules the worker threads.
//!
//! In real mode the same accounting records measured wall-clock durations.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Startup,
    Loading,
    Compute,
    Communication,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Startup, Phase::Loading, Phase::Compute, Phase::Communication];

    fn index(self) -> usize {
        self as usize
    }
}

/// Seconds spent per phase. `total` is kept alongside so it can be compared with the sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub startup_s: f64,
    pub loading_s: f64,
    pub compute_s: f64,
    pub communication_s: f64,
    pub total_s: f64,
}

impl Breakdown {
    pub fn phase_sum(&self) -> f64 {
        self.startup_s + self.loading_s + self.compute_s + self.communication_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Real,
}

#[derive(Debug)]
struct ClockState {
    now: f64,
    phases: [f64; 4],
    instance_start: f64,
    store_phase: Phase,
}

/// One worker's clock. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct WorkerClock {
    rank: usize,
    mode: ClockMode,
    state: Mutex<ClockState>,
}

impl WorkerClock {
    pub fn new(rank: usize, mode: ClockMode) -> Self {
        WorkerClock {
            rank,
            mode,
            state: Mutex::new(ClockState {
                now: 0.0,
                phases: [0.0; 4],
                instance_start: 0.0,
                store_phase: Phase::Communication,
            }),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn is_virtual(&self) -> bool {
        self.mode == ClockMode::Virtual
    }

    pub fn now(&self) -> f64 {
        self.lock().now
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ClockState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Adds `secs` to both the clock and the phase bucket. Negative charges are ignored.
    pub fn charge(&self, phase: Phase, secs: f64) {
        if secs > 0.0 {
            let mut s = self.lock();
            s.now += secs;
            s.phases[phase.index()] += secs;
        }
    }

    /// Moves the clock forward to `t` (never backwards), billing the gap to `phase`.
    pub fn advance_to(&self, phase: Phase, t: f64) {
        let mut s = self.lock();
        if t > s.now {
            let gap = t - s.now;
            s.now = t;
            s.phases[phase.index()] += gap;
        }
    }

    /// Phase that timed-store operations are billed to (communication unless loading data).
    pub fn store_phase(&self) -> Phase {
        self.lock().store_phase
    }

    pub fn set_store_phase(&self, phase: Phase) {
        self.lock().store_phase = phase;
    }

    /// Runs `f`, billing `phase` with either the measured wall time (real mode) or
    /// `modeled` seconds (virtual mode; `None` means `f` charges the clock itself).
    pub fn measure<T>(&self, phase: Phase, modeled: Option<f64>, f: impl FnOnce() -> T) -> T {
        match self.mode {
            ClockMode::Real => {
                let start = Instant::now();
                let out = f();
                self.charge(phase, start.elapsed().as_secs_f64());
                out
            }
            ClockMode::Virtual => {
                let out = f();
                if let Some(secs) = modeled {
                    self.charge(phase, secs);
                }
                out
            }
        }
    }

    /// Marks the start of a (re)spawned worker instance for lifetime tracking.
    pub fn start_instance(&self) {
        let mut s = self.lock();
        s.instance_start = s.now;
    }

    pub fn instance_elapsed(&self) -> f64 {
        let s = self.lock();
        s.now - s.instance_start
    }

    pub fn breakdown(&self) -> Breakdown {
        let s = self.lock();
        Breakdown {
            startup_s: s.phases[Phase::Startup.index()],
            loading_s: s.phases[Phase::Loading.index()],
            compute_s: s.phases[Phase::Compute.index()],
            communication_s: s.phases[Phase::Communication.index()],
            total_s: s.now,
        }
    }
}

/// Shared simulation timeline: the per-worker clocks plus the virtual time at which
/// each stored key became visible.
#[derive(Debug)]
pub struct VirtualClock {
    workers: Vec<Arc<WorkerClock>>,
    stamps: Mutex<HashMap<String, f64>>,
}

impl VirtualClock {
    pub fn new(n_workers: usize, mode: ClockMode) -> Arc<Self> {
        Arc::new(VirtualClock {
            workers: (0..n_workers).map(|r| Arc::new(WorkerClock::new(r, mode))).collect(),
            stamps: Mutex::new(HashMap::new()),
        })
    }

    pub fn worker(&self, rank: usize) -> Arc<WorkerClock> {
        Arc::clone(&self.workers[rank])
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn stamp(&self, key: &str, t: f64) {
        self.stamps
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.to_string(), t);
    }

    pub fn stamp_of(&self, key: &str) -> Option<f64> {
        self.stamps.lock().unwrap_or_else(|e| e.into_inner()).get(key).copied()
    }

    /// Latest stamp among `keys` (unknown keys count as time zero).
    pub fn latest(&self, keys: &[String]) -> f64 {
        let stamps = self.stamps.lock().unwrap_or_else(|e| e.into_inner());
        keys.iter().filter_map(|k| stamps.get(k)).fold(0.0, |a, &b| a.max(b))
    }

    pub fn forget_prefix(&self, prefix: &str) {
        self.stamps
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .retain(|k, _| !k.starts_with(prefix));
    }
}

//! Single parameter server for the hybrid design: FaaS workers push gradients to a VM
//! that owns the model, then pull the updated model back.
//!
//! The server is synchronous per round. A PUSH for `(epoch, iter)` blocks until all
//! `expected` pushes of that round have arrived and the update
//! `w <- w - eta * mean(grad)` has been applied; only then is it acknowledged.
//! [`PsCore`] holds that logic and is shared by the TCP server and by the in-process
//! link used in simulate mode.

mod frame;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

pub use self::frame::{read_frame, write_frame, Frame, Opcode, FIXED_BYTES, MAX_FRAME_BYTES};

use crate::clock::{Phase, WorkerClock};
use crate::collective::{decode_update, encode_update, encoded_len};
use crate::error::{Error, Result};
use crate::model::ModelVector;
use crate::storage::ChannelProfile;

#[derive(Debug, Default)]
struct PendingRound {
    pushes: Vec<(f64, Vec<f64>)>,
    latest_arrival: f64,
    applied_at: Option<f64>,
    acked: usize,
}

#[derive(Debug)]
struct State {
    model: ModelVector,
    version: u32,
    rounds: BTreeMap<(u32, u32), PendingRound>,
    /// Virtual time at which the server finished its last update.
    busy_until: f64,
}

/// Model state and round bookkeeping of the parameter server.
#[derive(Debug)]
pub struct PsCore {
    dim: usize,
    eta: f64,
    expected: usize,
    update_s: f64,
    timeout: Duration,
    cancel: Arc<AtomicBool>,
    state: Mutex<State>,
    applied: Condvar,
}

impl PsCore {
    pub fn new(dim: usize, eta: f64, expected_pushes: usize) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {eta}")));
        }
        if expected_pushes == 0 {
            return Err(Error::invalid("expected pushes per round must be >= 1"));
        }
        Ok(PsCore {
            dim,
            eta,
            expected: expected_pushes,
            update_s: 0.0,
            timeout: Duration::from_secs(600),
            cancel: Arc::new(AtomicBool::new(false)),
            state: Mutex::new(State {
                model: ModelVector::zeros(dim),
                version: 0,
                rounds: BTreeMap::new(),
                busy_until: 0.0,
            }),
            applied: Condvar::new(),
        })
    }

    /// Virtual seconds the server spends applying one update.
    pub fn with_update_cost(mut self, secs: f64) -> Self {
        self.update_s = secs.max(0.0);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_cancel(mut self, cancel: Arc<AtomicBool>) -> Self {
        self.cancel = cancel;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Current model and its version (number of updates applied so far).
    pub fn pull(&self) -> (ModelVector, u32) {
        let s = self.lock();
        (s.model.clone(), s.version)
    }

    /// Registers one push that reached the server at virtual time `arrival` and blocks
    /// until the round's update is applied. Returns the virtual time it was applied.
    pub fn push(&self, epoch: u32, iter: u32, grad: &[f64], weight: f64, arrival: f64) -> Result<f64> {
        if grad.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: grad.len(),
            });
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!(
                "push weight must be finite and >= 0, got {weight}"
            )));
        }
        let key = (epoch, iter);
        let mut s = self.lock();
        let round = s.rounds.entry(key).or_default();
        if round.applied_at.is_some() || round.pushes.len() >= self.expected {
            return Err(Error::invalid(format!(
                "round ({epoch}, {iter}) already has {} pushes",
                self.expected
            )));
        }
        round.pushes.push((weight, grad.to_vec()));
        round.latest_arrival = round.latest_arrival.max(arrival);
        if round.pushes.len() == self.expected {
            self.apply(&mut s, key);
            self.applied.notify_all();
        }

        let start = Instant::now();
        loop {
            let round = s.rounds.get_mut(&key).expect("round stays until fully acked");
            if let Some(t) = round.applied_at {
                round.acked += 1;
                if round.acked == self.expected {
                    s.rounds.remove(&key);
                }
                return Ok(t);
            }
            if self.cancel.load(Ordering::Relaxed) {
                return Err(Error::Cancelled);
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::StragglerTimeout {
                    what: format!("parameter server round ({epoch}, {iter})"),
                    missing: Vec::new(),
                    waited_s: self.timeout.as_secs_f64(),
                });
            }
            s = self
                .applied
                .wait_timeout(s, Duration::from_millis(50))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn apply(&self, s: &mut State, key: (u32, u32)) {
        let round = s.rounds.get_mut(&key).expect("round exists");
        // arrival order depends on scheduling; summing in a canonical order does not
        round.pushes.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let total: f64 = round.pushes.iter().map(|p| p.0).sum();
        let start = round.latest_arrival.max(s.busy_until);
        if total > 0.0 {
            let mut mean = vec![0.0; self.dim];
            for (wt, g) in &round.pushes {
                mean.iter_mut().zip(g).for_each(|(m, x)| *m += wt * x);
            }
            for (w, m) in s.model.iter_mut().zip(&mean) {
                *w -= self.eta * (m / total);
            }
        }
        s.version += 1;
        s.busy_until = start + self.update_s;
        let done = s.busy_until;
        s.rounds.get_mut(&key).expect("round exists").applied_at = Some(done);
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::Relaxed);
        self.applied.notify_all();
    }
}

/// A running TCP parameter server. Dropping it stops accepting new connections.
pub struct PsServer {
    addr: SocketAddr,
    core: Arc<PsCore>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

/// Starts a server holding a zero model of `dim` elements, listening on `bind`
/// (use port 0 for an ephemeral port). Each connection gets its own thread.
pub fn ps_serve(dim: usize, eta: f64, expected_pushes: usize, bind: impl ToSocketAddrs) -> Result<PsServer> {
    PsServer::start(Arc::new(PsCore::new(dim, eta, expected_pushes)?), bind)
}

impl PsServer {
    pub fn start(core: Arc<PsCore>, bind: impl ToSocketAddrs) -> Result<PsServer> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let core = core.clone();
            let stop = stop.clone();
            thread::Builder::new().name("ps-accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let core = core.clone();
                    let _ = thread::Builder::new()
                        .name("ps-conn".into())
                        .spawn(move || serve_connection(&core, conn));
                }
            })?
        };
        Ok(PsServer {
            addr,
            core,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn core(&self) -> &Arc<PsCore> {
        &self.core
    }

    /// Blocks the calling thread for as long as the server runs.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(h) = self.acceptor.take() {
            self.stop.store(true, Ordering::Relaxed);
            self.core.cancel();
            // unblock accept()
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for PsServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(core: &PsCore, conn: TcpStream) {
    let _ = conn.set_nodelay(true);
    let Ok(write_half) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn);
    let mut writer = BufWriter::new(write_half);
    // a malformed frame or a dead peer ends the connection
    while let Ok(Some(frame)) = read_frame(&mut reader) {
        let reply = handle(core, frame);
        if write_frame(&mut writer, &reply).is_err() {
            break;
        }
    }
}

fn handle(core: &PsCore, frame: Frame) -> Frame {
    match frame.op {
        Opcode::Push => {
            let (grad, weight) = match decode_update(&frame.payload) {
                Ok(u) => u,
                Err(e) => return Frame::error(&e.to_string()),
            };
            match core.push(frame.epoch, frame.iter, &grad, weight, 0.0) {
                Ok(_) => Frame::new(Opcode::Ack, frame.epoch, frame.iter, Vec::new()),
                Err(Error::DimensionMismatch { .. }) => Frame::error("dim mismatch"),
                Err(e) => Frame::error(&e.to_string()),
            }
        }
        Opcode::Pull => {
            let (model, version) = core.pull();
            Frame::new(Opcode::Model, frame.epoch, version, encode_update(&model, 1.0))
        }
        other => Frame::error(&format!("unexpected opcode {other:?}")),
    }
}

/// What a worker needs from a parameter server, over TCP or in process.
pub trait PsLink: Send {
    /// Sends one gradient and returns once the server applied the round.
    fn push(&mut self, grad: &ModelVector, weight: f64, epoch: u32, iter: u32) -> Result<()>;

    /// Current model and its version.
    fn pull(&mut self) -> Result<(ModelVector, u32)>;
}

/// Blocking single-connection client.
pub struct PsClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn channel_err(e: impl std::fmt::Display) -> Error {
    Error::Channel(e.to_string())
}

impl PsClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<PsClient> {
        let stream = TcpStream::connect(addr).map_err(channel_err)?;
        stream.set_nodelay(true).map_err(channel_err)?;
        let write_half = stream.try_clone().map_err(channel_err)?;
        Ok(PsClient {
            reader: BufReader::new(stream),
            writer: BufWriter::new(write_half),
        })
    }

    fn call(&mut self, frame: &Frame) -> Result<Frame> {
        write_frame(&mut self.writer, frame).map_err(channel_err)?;
        let reply = read_frame(&mut self.reader)
            .map_err(channel_err)?
            .ok_or_else(|| Error::Channel("connection closed by server".into()))?;
        if reply.op == Opcode::Err {
            return Err(Error::Server(reply.message()));
        }
        Ok(reply)
    }

    /// Pushes with weight 1.
    pub fn push_grad(&mut self, grad: &ModelVector, epoch: u32, iter: u32) -> Result<()> {
        self.push(grad, 1.0, epoch, iter)
    }

    pub fn pull_model(&mut self) -> Result<ModelVector> {
        self.pull().map(|(m, _)| m)
    }
}

impl PsLink for PsClient {
    fn push(&mut self, grad: &ModelVector, weight: f64, epoch: u32, iter: u32) -> Result<()> {
        let reply = self.call(&Frame::new(Opcode::Push, epoch, iter, encode_update(grad, weight)))?;
        match reply.op {
            Opcode::Ack => Ok(()),
            other => Err(Error::Channel(format!("expected ACK, got {other:?}"))),
        }
    }

    fn pull(&mut self) -> Result<(ModelVector, u32)> {
        let reply = self.call(&Frame::new(Opcode::Pull, 0, 0, Vec::new()))?;
        if reply.op != Opcode::Model {
            return Err(Error::Channel(format!("expected MODEL, got {:?}", reply.op)));
        }
        let (model, _) = decode_update(&reply.payload)?;
        Ok((model, reply.iter))
    }
}

/// In-process link for simulate mode. Charges the worker's virtual clock for each frame
/// under `profile` and makes a push wait until the server applied the round.
pub struct SimulatedPs {
    core: Arc<PsCore>,
    profile: ChannelProfile,
    clock: Arc<WorkerClock>,
}

impl SimulatedPs {
    pub fn new(core: Arc<PsCore>, profile: ChannelProfile, clock: Arc<WorkerClock>) -> Self {
        SimulatedPs { core, profile, clock }
    }

    fn frame_bytes(&self) -> usize {
        4 + FIXED_BYTES + encoded_len(self.core.dim())
    }
}

impl PsLink for SimulatedPs {
    fn push(&mut self, grad: &ModelVector, weight: f64, epoch: u32, iter: u32) -> Result<()> {
        self.clock
            .charge(Phase::Communication, self.profile.transfer_s(self.frame_bytes()));
        let applied = self.core.push(epoch, iter, grad, weight, self.clock.now())?;
        self.clock.advance_to(Phase::Communication, applied);
        Ok(())
    }

    fn pull(&mut self) -> Result<(ModelVector, u32)> {
        self.clock
            .charge(Phase::Communication, self.profile.transfer_s(self.frame_bytes()));
        Ok(self.core.pull())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{ClockMode, VirtualClock};

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::from(v.to_vec())
    }

    #[test]
    fn core_mean_then_step() {
        let core = Arc::new(PsCore::new(1, 0.5, 2).unwrap());
        thread::scope(|s| {
            for g in [2.0, 4.0] {
                let core = core.clone();
                s.spawn(move || core.push(0, 0, &[g], 1.0, 0.0).unwrap());
            }
        });
        assert_eq!(core.pull(), (mv(&[-1.5]), 1));
    }

    #[test]
    fn core_rejects_wrong_dim_and_extra_pushes() {
        let core = PsCore::new(2, 0.1, 1).unwrap();
        assert!(matches!(
            core.push(0, 0, &[1.0], 1.0, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        core.push(0, 0, &[1.0, 1.0], 1.0, 0.0).unwrap();
        assert_eq!(core.pull().1, 1);
    }

    #[test]
    fn tcp_push_pull() {
        let server = ps_serve(1, 0.5, 1, "127.0.0.1:0").unwrap();
        let mut c = PsClient::connect(server.local_addr()).unwrap();
        assert_eq!(c.pull_model().unwrap(), mv(&[0.0]));
        c.push_grad(&mv(&[2.0]), 0, 0).unwrap();
        assert_eq!(c.pull().unwrap(), (mv(&[-1.0]), 1));
        match c.push_grad(&mv(&[1.0, 2.0]), 0, 1) {
            Err(Error::Server(msg)) => assert_eq!(msg, "dim mismatch"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_frame_closes_connection() {
        use std::io::{Read, Write};
        let server = ps_serve(1, 0.5, 1, "127.0.0.1:0").unwrap();
        let mut raw = TcpStream::connect(server.local_addr()).unwrap();
        raw.write_all(&[9, 0, 0, 0, 42, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(raw.read_to_end(&mut buf).unwrap(), 0);
    }

    #[test]
    fn simulated_push_waits_for_slowest_and_update() {
        let timeline = VirtualClock::new(2, ClockMode::Virtual);
        let core = Arc::new(PsCore::new(1, 1.0, 2).unwrap().with_update_cost(0.5));
        let profile = ChannelProfile::new("link", 1.0, 0.0);
        thread::scope(|s| {
            for r in 0..2 {
                let clock = timeline.worker(r);
                clock.charge(Phase::Compute, if r == 0 { 1.0 } else { 3.0 });
                let mut link = SimulatedPs::new(core.clone(), profile.clone(), clock);
                s.spawn(move || link.push(&mv(&[1.0]), 1.0, 0, 0).unwrap());
            }
        });
        let push_s = profile.transfer_s(4 + FIXED_BYTES + encoded_len(1));
        for r in 0..2 {
            assert!((timeline.worker(r).now() - (3.0 + push_s + 0.5)).abs() < 1e-12);
        }
    }
}

//! Serverless-style distributed training, simulated at desk scale.
//!
//! Workers exchange updates only through a shared [`storage::BlobStore`] (or a
//! parameter server), run under a lifetime limit, and account their time per phase so
//! runs can be compared against the analytical [`costmodel`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod collective;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod ps;
pub mod runtime;
pub mod storage;

pub use crate::clock::{Breakdown, ClockMode, Phase, VirtualClock, WorkerClock};
pub use crate::collective::{Pattern, ReduceOp};
pub use crate::data::{Batch, Dataset, Partition, Task};
pub use crate::error::{Error, Result};
pub use crate::model::{ClusterStats, ModelKind, ModelVector};
pub use crate::optim::{Algorithm, LrSchedule, OptimizerState};
pub use crate::runtime::{run_job, run_job_traced, run_job_with_data, JobConfig, JobReport, Mode, SyncMode};
pub use crate::storage::{BlobStore, ChannelProfile, FsStore, MemStore};

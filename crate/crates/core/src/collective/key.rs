//! Store key grammar shared by all workers.
//!
//! ```text
//! local    u/{epoch}/{iter}/{src}
//! merged   m/{epoch}/{iter}
//! chunk    c/{epoch}/{iter}/{src}/{dst}
//! reduced  r/{epoch}/{iter}/{dst}
//! global   g/model
//! ckpt     ckpt/{worker}
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyKind {
    Local,
    Merged,
    Chunk,
    Reduced,
    Global,
    Checkpoint,
}

impl FromStr for KeyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "local" | "u" => KeyKind::Local,
            "merged" | "m" => KeyKind::Merged,
            "chunk" | "c" => KeyKind::Chunk,
            "reduced" | "r" => KeyKind::Reduced,
            "global" | "g" => KeyKind::Global,
            "ckpt" => KeyKind::Checkpoint,
            other => {
                return Err(Error::InvalidKey {
                    key: other.into(),
                    reason: "unknown kind".into(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlobKey {
    Local {
        epoch: u64,
        iter: u64,
        src: usize,
    },
    Merged {
        epoch: u64,
        iter: u64,
    },
    Chunk {
        epoch: u64,
        iter: u64,
        src: usize,
        dst: usize,
    },
    Reduced {
        epoch: u64,
        iter: u64,
        dst: usize,
    },
    Global,
    Checkpoint {
        worker: usize,
    },
}

impl BlobKey {
    pub fn kind(&self) -> KeyKind {
        match self {
            BlobKey::Local { .. } => KeyKind::Local,
            BlobKey::Merged { .. } => KeyKind::Merged,
            BlobKey::Chunk { .. } => KeyKind::Chunk,
            BlobKey::Reduced { .. } => KeyKind::Reduced,
            BlobKey::Global => KeyKind::Global,
            BlobKey::Checkpoint { .. } => KeyKind::Checkpoint,
        }
    }

    /// `(epoch, iter)` for round-scoped keys.
    pub fn round(&self) -> Option<(u64, u64)> {
        match *self {
            BlobKey::Local { epoch, iter, .. }
            | BlobKey::Merged { epoch, iter }
            | BlobKey::Chunk { epoch, iter, .. }
            | BlobKey::Reduced { epoch, iter, .. } => Some((epoch, iter)),
            BlobKey::Global | BlobKey::Checkpoint { .. } => None,
        }
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlobKey::Local { epoch, iter, src } => write!(f, "u/{epoch}/{iter}/{src}"),
            BlobKey::Merged { epoch, iter } => write!(f, "m/{epoch}/{iter}"),
            BlobKey::Chunk { epoch, iter, src, dst } => write!(f, "c/{epoch}/{iter}/{src}/{dst}"),
            BlobKey::Reduced { epoch, iter, dst } => write!(f, "r/{epoch}/{iter}/{dst}"),
            BlobKey::Global => f.write_str("g/model"),
            BlobKey::Checkpoint { worker } => write!(f, "ckpt/{worker}"),
        }
    }
}

fn malformed(key: &str, reason: &str) -> Error {
    Error::InvalidKey {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Canonical decimal: digits only, no leading zeros.
fn number<T: FromStr>(key: &str, s: &str) -> Result<T> {
    let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if !canonical {
        return Err(malformed(key, &format!("bad number {s:?}")));
    }
    s.parse()
        .map_err(|_| malformed(key, &format!("number {s:?} out of range")))
}

impl FromStr for BlobKey {
    type Err = Error;

    fn from_str(key: &str) -> Result<Self> {
        let parts: Vec<&str> = key.split('/').collect();
        let arity = |n: usize| {
            if parts.len() == n {
                Ok(())
            } else {
                Err(malformed(key, &format!("expected {n} segments, found {}", parts.len())))
            }
        };
        match parts[0] {
            "u" => {
                arity(4)?;
                Ok(BlobKey::Local {
                    epoch: number(key, parts[1])?,
                    iter: number(key, parts[2])?,
                    src: number(key, parts[3])?,
                })
            }
            "m" => {
                arity(3)?;
                Ok(BlobKey::Merged {
                    epoch: number(key, parts[1])?,
                    iter: number(key, parts[2])?,
                })
            }
            "c" => {
                arity(5)?;
                Ok(BlobKey::Chunk {
                    epoch: number(key, parts[1])?,
                    iter: number(key, parts[2])?,
                    src: number(key, parts[3])?,
                    dst: number(key, parts[4])?,
                })
            }
            "r" => {
                arity(4)?;
                Ok(BlobKey::Reduced {
                    epoch: number(key, parts[1])?,
                    iter: number(key, parts[2])?,
                    dst: number(key, parts[3])?,
                })
            }
            "g" => {
                if key == "g/model" {
                    Ok(BlobKey::Global)
                } else {
                    Err(malformed(key, "the only global key is g/model"))
                }
            }
            "ckpt" => {
                arity(2)?;
                Ok(BlobKey::Checkpoint {
                    worker: number(key, parts[1])?,
                })
            }
            _ => Err(malformed(key, "unknown kind")),
        }
    }
}

/// Builds a key from its parts; `src`/`dst` are required exactly where the grammar uses
/// them (`src` doubles as the worker id for checkpoints).
pub fn make_key(kind: KeyKind, epoch: u64, iter: u64, src: Option<usize>, dst: Option<usize>) -> Result<String> {
    let need = |v: Option<usize>, what: &str| v.ok_or_else(|| Error::invalid(format!("{kind:?} key needs {what}")));
    let key = match kind {
        KeyKind::Local => BlobKey::Local {
            epoch,
            iter,
            src: need(src, "src")?,
        },
        KeyKind::Merged => BlobKey::Merged { epoch, iter },
        KeyKind::Chunk => BlobKey::Chunk {
            epoch,
            iter,
            src: need(src, "src")?,
            dst: need(dst, "dst")?,
        },
        KeyKind::Reduced => BlobKey::Reduced {
            epoch,
            iter,
            dst: need(dst, "dst")?,
        },
        KeyKind::Global => BlobKey::Global,
        KeyKind::Checkpoint => BlobKey::Checkpoint {
            worker: need(src, "worker")?,
        },
    };
    Ok(key.to_string())
}

pub fn parse_key(key: &str) -> Result<BlobKey> {
    key.parse()
}

pub(crate) fn local_prefix(epoch: u64, iter: u64) -> String {
    format!("u/{epoch}/{iter}/")
}

pub(crate) fn chunk_prefix(epoch: u64, iter: u64) -> String {
    format!("c/{epoch}/{iter}/")
}

pub(crate) fn reduced_prefix(epoch: u64, iter: u64) -> String {
    format!("r/{epoch}/{iter}/")
}

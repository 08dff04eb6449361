//! Worker checkpoint, little-endian:
//!
//! ```text
//! "LMCK"  magic
//! 0x01    version
//! u32     worker id
//! u32     epoch
//! u32     iter
//! ..      model as an UpdateBlob
//! u8      number of optimizer-state blobs
//! ..      that many UpdateBlobs (ADMM: u_i then z)
//! ```

use crate::collective::{decode_update_prefix, encode_update};
use crate::error::{Error, Result};
use crate::model::ModelVector;

pub const MAGIC: &[u8; 4] = b"LMCK";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub worker_id: u32,
    pub epoch: u32,
    pub iter: u32,
    pub model: ModelVector,
    pub state: Vec<ModelVector>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let count = u8::try_from(self.state.len())
            .map_err(|_| Error::invalid(format!("{} optimizer-state blobs exceed 255", self.state.len())))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.worker_id.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.iter.to_le_bytes());
        out.extend_from_slice(&encode_update(&self.model, 1.0));
        out.push(count);
        for s in &self.state {
            out.extend_from_slice(&encode_update(s, 1.0));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if bytes.len() < 17 {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(format!("bad magic {:02x?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unsupported version {:#04x}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let (worker_id, epoch, iter) = (u32_at(5), u32_at(9), u32_at(13));
        let mut rest = &bytes[17..];
        let blob = |rest: &mut &[u8]| -> Result<ModelVector> {
            let (v, _, used) = decode_update_prefix(rest).map_err(|e| corrupt(e.to_string()))?;
            *rest = &rest[used..];
            Ok(v)
        };
        let model = blob(&mut rest)?;
        let (&count, tail) = rest
            .split_first()
            .ok_or_else(|| corrupt("missing state count".into()))?;
        rest = tail;
        let state = (0..count).map(|_| blob(&mut rest)).collect::<Result<Vec<_>>>()?;
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            worker_id,
            epoch,
            iter,
            model,
            state,
        })
    }
}

//! Parameter-server wire frames, little-endian:
//!
//! ```text
//! u32 length   bytes after this field (1 + 4 + 4 + payload)
//! u8  opcode   1 PUSH, 2 PULL, 3 MODEL, 4 ACK, 5 ERR
//! u32 epoch
//! u32 iter     (MODEL: model version)
//! ..  payload  UpdateBlob for PUSH/MODEL, UTF-8 text for ERR, empty otherwise
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Bytes of opcode + epoch + iter.
pub const FIXED_BYTES: usize = 9;
/// Upper bound on a frame body, to reject garbage lengths before allocating.
pub const MAX_FRAME_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Push = 1,
    Pull = 2,
    Model = 3,
    Ack = 4,
    Err = 5,
}

impl TryFrom<u8> for Opcode {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Opcode::Push,
            2 => Opcode::Pull,
            3 => Opcode::Model,
            4 => Opcode::Ack,
            5 => Opcode::Err,
            other => return Err(Error::Format(format!("unknown opcode {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: Opcode,
    pub epoch: u32,
    pub iter: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: Opcode, epoch: u32, iter: u32, payload: Vec<u8>) -> Self {
        Frame {
            op,
            epoch,
            iter,
            payload,
        }
    }

    pub fn error(message: &str) -> Self {
        Frame::new(Opcode::Err, 0, 0, message.as_bytes().to_vec())
    }

    pub fn encoded_len(&self) -> usize {
        4 + FIXED_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&((FIXED_BYTES + self.payload.len()) as u32).to_le_bytes());
        out.push(self.op as u8);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.iter.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes a buffer holding exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < 4 {
            return Err(Error::Format("frame shorter than its length field".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if len != bytes.len() - 4 {
            return Err(Error::Format(format!(
                "frame length {len} but {} bytes follow",
                bytes.len() - 4
            )));
        }
        Frame::decode_body(&bytes[4..])
    }

    fn decode_body(body: &[u8]) -> Result<Frame> {
        if body.len() < FIXED_BYTES {
            return Err(Error::Format(format!(
                "frame body of {} bytes is too short",
                body.len()
            )));
        }
        Ok(Frame {
            op: Opcode::try_from(body[0])?,
            epoch: u32::from_le_bytes(body[1..5].try_into().expect("4 bytes")),
            iter: u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")),
            payload: body[FIXED_BYTES..].to_vec(),
        })
    }

    pub fn message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

/// Reads one frame. `Ok(None)` means the peer closed the connection between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if !(FIXED_BYTES..=MAX_FRAME_BYTES).contains(&len) {
        return Err(Error::Format(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::decode_body(&body).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let f = Frame::new(Opcode::Push, 7, 258, vec![0xAA, 0xBB]);
        assert_eq!(f.encode(), vec![11, 0, 0, 0, 1, 7, 0, 0, 0, 2, 1, 0, 0, 0xAA, 0xBB]);
        assert_eq!(Frame::new(Opcode::Pull, 0, 0, vec![]).encode().len(), 13);
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::decode(&[9, 0, 0, 0, 9, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(Frame::decode(&[10, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(Frame::decode(&[1, 0]).is_err());
        let mut cursor = io::Cursor::new(vec![3u8, 0, 0, 0, 1, 0, 0]);
        assert!(read_frame(&mut cursor).is_err());
        let mut empty = io::Cursor::new(Vec::<u8>::new());
        assert_eq!(read_frame(&mut empty).unwrap(), None);
    }

    fn any_op() -> impl Strategy<Value = Opcode> {
        prop_oneof![
            Just(Opcode::Push),
            Just(Opcode::Pull),
            Just(Opcode::Model),
            Just(Opcode::Ack),
            Just(Opcode::Err)
        ]
    }

    proptest! {
        #[test]
        fn codec_roundtrip(op in any_op(), epoch in any::<u32>(), iter in any::<u32>(),
                           payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let f = Frame::new(op, epoch, iter, payload);
            let bytes = f.encode();
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f.clone());
            let mut cursor = io::Cursor::new(bytes);
            prop_assert_eq!(read_frame(&mut cursor).unwrap(), Some(f));
        }
    }
}

//! `UpdateBlob` wire format, little-endian throughout:
//!
//! ```text
//! offset 0   magic   "LMBL"
//! offset 4   version 0x01
//! offset 5   dtype   0x01 (float64)
//! offset 6   count   u64, number of float64s that follow (weight + vector)
//! offset 14  payload count x f64, payload[0] is the weight
//! ```

use crate::error::{Error, Result};
use crate::model::ModelVector;

pub const MAGIC: &[u8; 4] = b"LMBL";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;
pub const HEADER_BYTES: usize = 14;

pub fn encoded_len(dim: usize) -> usize {
    HEADER_BYTES + 8 * (dim + 1)
}

pub fn encode_update(v: &[f64], weight: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(v.len()));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.extend_from_slice(&((v.len() + 1) as u64).to_le_bytes());
    out.extend_from_slice(&weight.to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes one blob from the front of `bytes`, returning the bytes consumed.
pub fn decode_update_prefix(bytes: &[u8]) -> Result<(ModelVector, f64, usize)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "update blob truncated: {} header bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad update magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported update version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported update dtype {:#04x}", bytes[5])));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    if count == 0 {
        return Err(Error::Format("update blob has no weight element".into()));
    }
    let payload = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("element count {count} too large")))?;
    let end = HEADER_BYTES
        .checked_add(payload)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "update blob truncated: {count} elements declared, {} bytes present",
                bytes.len()
            ))
        })?;
    let mut values = bytes[HEADER_BYTES..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let weight = values.next().expect("count >= 1");
    Ok((ModelVector::from(values.collect::<Vec<_>>()), weight, end))
}

/// Decodes a blob that must span exactly `bytes`.
pub fn decode_update(bytes: &[u8]) -> Result<(ModelVector, f64)> {
    let (v, w, used) = decode_update_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after update blob",
            bytes.len() - used
        )));
    }
    Ok((v, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_vector_is_weight_only() {
        let b = encode_update(&[], 3.5);
        assert_eq!(b.len(), 14 + 8);
        assert_eq!(&b[..6], b"LMBL\x01\x01");
        assert_eq!(decode_update(&b).unwrap(), (ModelVector::zeros(0), 3.5));
    }

    #[test]
    fn seeded_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let v: Vec<f64> = (0..1000).map(|_| rng.random_range(-1e6..1e6)).collect();
        let b = encode_update(&v, 17.0);
        assert_eq!(b.len(), encoded_len(1000));
        let (back, w) = decode_update(&b).unwrap();
        assert_eq!(back.into_inner(), v);
        assert_eq!(w, 17.0);
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let good = encode_update(&[1.0, 2.0], 1.0);
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_update(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_update(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(matches!(decode_update(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_update(&good[..good.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_update(&good[..10]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_update(&long), Err(Error::Format(_))));
        let mut huge = good;
        huge[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_update(&huge), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_bits(v in proptest::collection::vec(any::<u64>(), 0..64), w in any::<u64>()) {
            let floats: Vec<f64> = v.iter().map(|b| f64::from_bits(*b)).collect();
            let (back, wt) = decode_update(&encode_update(&floats, f64::from_bits(w))).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v);
            prop_assert_eq!(wt.to_bits(), w);
        }
    }
}

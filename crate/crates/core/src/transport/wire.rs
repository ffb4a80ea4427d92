//! TCP wire format, little-endian throughout:
//!
//! ```text
//! tag: u32 | source: u32 | length in elements: u64 | length x f64 payload
//! ```

use std::io::{Read, Write};

use super::TransportError;

pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub tag: u32,
    pub source: u32,
    pub len: u64,
}

impl Header {
    pub fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.tag.to_le_bytes());
        out[4..8].copy_from_slice(&self.source.to_le_bytes());
        out[8..16].copy_from_slice(&self.len.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Self {
        Header {
            tag: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            source: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            len: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }
}

pub fn encode(tag: u32, source: u32, payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload.len());
    let header = Header {
        tag,
        source,
        len: payload.len() as u64,
    };
    out.extend_from_slice(&header.to_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_message(w: &mut impl Write, tag: u32, source: u32, payload: &[f64]) -> std::io::Result<()> {
    w.write_all(&encode(tag, source, payload))?;
    w.flush()
}

// Refuse absurd lengths before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_message(r: &mut impl Read) -> Result<(Header, Vec<f64>), TransportError> {
    let mut hb = [0u8; HEADER_LEN];
    r.read_exact(&mut hb)?;
    let header = Header::from_bytes(&hb);
    if header.len > MAX_ELEMENTS {
        return Err(TransportError::Protocol(format!(
            "payload length {} too large",
            header.len
        )));
    }
    let mut body = vec![0u8; header.len as usize * 8];
    r.read_exact(&mut body)?;
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(7, 2, &[1.0]);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..16], &[7, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..], &1.0f64.to_le_bytes());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(tag: u32, source: u32, bits in proptest::collection::vec(any::<u64>(), 0..64)) {
            let payload: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let bytes = encode(tag, source, &payload);
            let (h, p) = read_message(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(h, Header { tag, source, len: payload.len() as u64 });
            let back: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back, bits);
        }
    }
}

//! `LC01` chunk files.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"LC01"`               |
//! | 4      | 4    | u32 sequence count `n`        |
//! | 8      | 4    | u32 sequence length `L`       |
//! | 12     | 2·n·L| token ids, u16, row-major     |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHUNK_MAGIC: &[u8; 4] = b"LC01";
pub const HEADER_BYTES: usize = 12;

/// Sequences of one chunk, stored as a dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkData {
    pub seq_len: usize,
    pub tokens: Vec<u16>,
}

impl ChunkData {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.tokens.len() / self.seq_len
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u16]> {
        self.tokens.chunks_exact(self.seq_len)
    }

    pub fn push(&mut self, seq: &[u16]) {
        assert_eq!(seq.len(), self.seq_len, "sequence length mismatch");
        self.tokens.extend_from_slice(seq);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.tokens.len() * 2);
        out.extend_from_slice(CHUNK_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let expected = header.expected_file_len();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "length mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let tokens = bytes[HEADER_BYTES..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok(Self {
            seq_len: header.seq_len,
            tokens,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub sequences: usize,
    pub seq_len: usize,
}

impl ChunkHeader {
    pub fn expected_file_len(&self) -> usize {
        HEADER_BYTES + self.sequences * self.seq_len * 2
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<ChunkHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("length mismatch: file shorter than header".into()));
    }
    if &bytes[..4] != CHUNK_MAGIC {
        return Err(Error::Format("bad chunk magic".into()));
    }
    let sequences = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let seq_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok(ChunkHeader { sequences, seq_len })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_layout() {
        let mut c = ChunkData::new(2);
        c.push(&[1, 258]);
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"LC01");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..], &[1, 0, 2, 1]);
        assert_eq!(ChunkData::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn truncated_is_length_mismatch() {
        let mut c = ChunkData::new(3);
        c.push(&[1, 2, 3]);
        let b = c.to_bytes();
        let err = ChunkData::from_bytes(&b[..b.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"));
    }
}

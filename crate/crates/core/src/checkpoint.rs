//! Versioned binary checkpoint envelope shared by the world model and the MLPs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "WMCKPT\0\x01"
//! version      u32
//! kind         u32      1 = DBM, 2 = MLP
//! n_dims       u32
//! dims         u32 * n_dims       layer sizes, bottom to top
//! flags        u32      DBM: bit 0 frozen; MLP: input kind
//! schema_hash  32 bytes SHA-256 of the visible schema
//! parent_hash  32 bytes MLP: SHA-256 of the world-model checkpoint (zero if none)
//! n_blocks     u32
//! blocks       (u64 length, f64 * length) * n_blocks, row-major
//! ```

use sha2::{Digest, Sha256};

use crate::error::{Result, WmError};

pub const MAGIC: [u8; 8] = *b"WMCKPT\0\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Dbm = 1,
    Mlp = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub kind: Kind,
    pub dims: Vec<u32>,
    pub flags: u32,
    pub schema_hash: [u8; 32],
    pub parent_hash: [u8; 32],
    pub blocks: Vec<Vec<f64>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decode a hex digest; the empty string maps to all zeros.
pub fn hash_bytes(hex_digest: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    if hex_digest.is_empty() {
        return Ok(out);
    }
    let v = hex::decode(hex_digest).map_err(|e| WmError::Checkpoint(format!("bad hash: {e}")))?;
    if v.len() != 32 {
        return Err(WmError::Checkpoint(format!("hash has {} bytes", v.len())));
    }
    out.copy_from_slice(&v);
    Ok(out)
}

pub fn hash_hex(bytes: &[u8; 32]) -> String {
    if bytes.iter().all(|&b| b == 0) {
        String::new()
    } else {
        hex::encode(bytes)
    }
}

impl Envelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.blocks.iter().map(|b| 8 + 8 * b.len()).sum();
        let mut out = Vec::with_capacity(96 + 4 * self.dims.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.schema_hash);
        out.extend_from_slice(&self.parent_hash);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            for x in b {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(WmError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WmError::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u32()? {
            1 => Kind::Dbm,
            2 => Kind::Mlp,
            k => return Err(WmError::Checkpoint(format!("unknown kind {k}"))),
        };
        let n_dims = r.u32()? as usize;
        let dims = (0..n_dims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let flags = r.u32()?;
        let mut schema_hash = [0u8; 32];
        schema_hash.copy_from_slice(r.take(32)?);
        let mut parent_hash = [0u8; 32];
        parent_hash.copy_from_slice(r.take(32)?);
        let n_blocks = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let len = r.u64()? as usize;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| WmError::Checkpoint("overflow".into()))?,
            )?;
            let block: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if block.iter().any(|x| !x.is_finite()) {
                return Err(WmError::Checkpoint("non-finite parameter".into()));
            }
            blocks.push(block);
        }
        if r.pos != bytes.len() {
            return Err(WmError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            dims,
            flags,
            schema_hash,
            parent_hash,
            blocks,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| WmError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

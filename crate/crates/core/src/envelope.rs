//! Binary envelope shared by the reference cache and trainer checkpoints.
//!
//! Layout, all little-endian:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic                                     |
//! | 8                | `n` as u64                                |
//! | 8                | `d` as u64                                |
//! | 4·n·d            | first matrix, f32, row-major              |
//! | 4·n·d            | second matrix, f32, row-major             |
//! | 24               | three f64 parameters                      |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: u64 = 24;
pub const PARAMS_LEN: u64 = 24;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Envelope {
    pub n: usize,
    pub d: usize,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
    pub params: [f64; 3],
}

/// Total file size for an `n × d` envelope.
pub fn encoded_len(n: usize, d: usize) -> u64 {
    HEADER_LEN + 2 * 4 * (n as u64) * (d as u64) + PARAMS_LEN
}

pub(crate) fn encode(magic: &[u8; 8], env: &Envelope) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(env.n, env.d) as usize);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(env.n as u64).to_le_bytes());
    buf.extend_from_slice(&(env.d as u64).to_le_bytes());
    for v in env.first.iter().chain(&env.second) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in env.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated while reading {what}: need {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Envelope> {
    let mut cur = Cursor { bytes, pos: 0 };
    let found = cur.take(8, "magic")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            reason: format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            ),
        });
    }
    let n_raw = cur.u64("n")?;
    let d_raw = cur.u64("d")?;
    let body = n_raw
        .checked_mul(d_raw)
        .and_then(|nd| nd.checked_mul(8))
        .filter(|&len| len <= bytes.len() as u64)
        .ok_or_else(|| Error::Format {
            offset: 8,
            reason: format!(
                "dimensions {n_raw}x{d_raw} do not fit in a {}-byte file",
                bytes.len()
            ),
        })?;
    if n_raw == 0 || d_raw == 0 {
        return Err(Error::Format {
            offset: 8,
            reason: format!("empty dimensions {n_raw}x{d_raw}"),
        });
    }
    let (n, d) = (n_raw as usize, d_raw as usize);
    let mut floats = |what: &str| -> Result<Vec<f32>> {
        let raw = cur.take((body / 2) as usize, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };
    let first = floats("first matrix")?;
    let second = floats("second matrix")?;
    let mut params = [0.0; 3];
    for p in params.iter_mut() {
        let b = cur.take(8, "parameter block")?;
        *p = f64::from_le_bytes(b.try_into().expect("8 bytes"));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(Envelope {
        n,
        d,
        first,
        second,
        params,
    })
}

pub(crate) fn write_file(path: &Path, magic: &[u8; 8], env: &Envelope) -> Result<()> {
    let bytes = encode(magic, env);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path, magic: &[u8; 8]) -> Result<Envelope> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

//! Cache dump file.
//!
//! Layout (little-endian):
//! - magic `PQKC`, version: u32
//! - d, M, nbits: u32
//! - n_q, recent_len: u64
//! - key code cells then value code cells, `n_q * M` each (u8 when
//!   nbits <= 8, u16 otherwise)
//! - recent keys then recent values, `recent_len * d` f32 each

use std::io::{Read, Write};
use std::path::Path;

use super::CodebookPair;
use crate::error::{Error, Result};
use crate::pq::{read_u32, CodeCells, CodesMatrix};

const MAGIC: &[u8; 4] = b"PQKC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheDump {
    pub d: usize,
    pub codes_k: CodesMatrix,
    pub codes_v: CodesMatrix,
    pub recent_keys: Vec<f32>,
    pub recent_values: Vec<f32>,
}

impl CacheDump {
    pub fn n_quantized(&self) -> usize {
        self.codes_k.n_tokens()
    }

    pub fn recent_len(&self) -> usize {
        self.recent_keys.len().checked_div(self.d).unwrap_or(0)
    }

    pub fn n_total(&self) -> usize {
        self.n_quantized() + self.recent_len()
    }

    pub fn check_against(&self, codebooks: &CodebookPair) -> Result<()> {
        let cfg = codebooks.keys.config();
        if self.d != cfg.d {
            return Err(Error::CodebookMismatch(format!(
                "dump has d = {}, codebooks d = {}",
                self.d, cfg.d
            )));
        }
        for c in [&self.codes_k, &self.codes_v] {
            if c.m() != cfg.m || c.nbits() != cfg.nbits {
                return Err(Error::CodebookMismatch(format!(
                    "dump codes (M={}, nbits={}) vs codebooks (M={}, nbits={})",
                    c.m(),
                    c.nbits(),
                    cfg.m,
                    cfg.nbits
                )));
            }
            c.validate()?;
        }
        if self.codes_k.n_tokens() != self.codes_v.n_tokens()
            || self.recent_keys.len() != self.recent_values.len()
            || !self.recent_keys.len().is_multiple_of(self.d)
        {
            return Err(Error::Format("inconsistent dump shapes".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            FORMAT_VERSION,
            self.d as u32,
            self.codes_k.m() as u32,
            self.codes_k.nbits(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.n_quantized() as u64).to_le_bytes())?;
        w.write_all(&(self.recent_len() as u64).to_le_bytes())?;
        for codes in [&self.codes_k, &self.codes_v] {
            match codes.cells() {
                CodeCells::U8(v) => w.write_all(v)?,
                CodeCells::U16(v) => {
                    let bytes: Vec<u8> = v.iter().flat_map(|c| c.to_le_bytes()).collect();
                    w.write_all(&bytes)?;
                }
            }
        }
        for rows in [&self.recent_keys, &self.recent_values] {
            let bytes: Vec<u8> = rows.iter().flat_map(|x| x.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Parses a dump. Out-of-range codes are rejected.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a cache dump (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let d = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let nbits = read_u32(&mut r)?;
        if d == 0 || m == 0 || !(1..=16).contains(&nbits) {
            return Err(Error::Format(format!("bad dump geometry d={d} M={m} nbits={nbits}")));
        }
        let n_q = read_u64(&mut r)? as usize;
        let recent_len = read_u64(&mut r)? as usize;

        let read_codes = |r: &mut R| -> Result<CodesMatrix> {
            let cells = if nbits <= 8 {
                let mut v = vec![0u8; n_q * m];
                r.read_exact(&mut v)?;
                CodeCells::U8(v)
            } else {
                let mut b = vec![0u8; n_q * m * 2];
                r.read_exact(&mut b)?;
                CodeCells::U16(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
            };
            CodesMatrix::from_cells(m, nbits, cells)
        };
        let codes_k = read_codes(&mut r)?;
        let codes_v = read_codes(&mut r)?;

        let read_rows = |r: &mut R| -> Result<Vec<f32>> {
            let mut b = vec![0u8; recent_len * d * 4];
            r.read_exact(&mut b)?;
            let rows: Vec<f32> = b
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
            Ok(rows)
        };
        let recent_keys = read_rows(&mut r)?;
        let recent_values = read_rows(&mut r)?;
        Ok(Self {
            d,
            codes_k,
            codes_v,
            recent_keys,
            recent_values,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

//! Little-endian index file.
//!
//! ```text
//! "POEM" | u32 version | u32 d, D, K, J, n_items
//! rotation  d*d f32, row-major
//! coarse    J*d f32
//! pq        D*K*(d/D) f32
//! items     n_items * (u32 coarse code, D u8 PQ codes)
//! vocab     n_items * (u16 byte length, UTF-8 id)
//! ```

use std::fs;
use std::path::Path;

use super::{validate_ids, EmbeddingIndex};
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::quantizer::{CoarseCodebook, PQCodebook, MAX_PQ_CENTROIDS};

const MAGIC: &[u8; 4] = b"POEM";
pub const FORMAT_VERSION: u32 = 1;

impl EmbeddingIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim;
        let shape = self.shape();
        let n = self.len();
        let mut out = Vec::with_capacity(
            28 + 4 * (d * d + shape.coarse_cells * d + shape.pq_centroids * d) + n * (4 + shape.subspaces + 8),
        );
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            d as u32,
            shape.subspaces as u32,
            shape.pq_centroids as u32,
            shape.coarse_cells as u32,
            n as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let floats = self
            .rotation
            .iter()
            .chain(self.coarse.centroids.as_slice())
            .copied()
            .chain(self.pq.to_flat());
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let dd = shape.subspaces;
        for (ord, &c) in self.coarse_codes.iter().enumerate() {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&self.pq_codes[ord * dd..(ord + 1) * dd]);
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let dd = r.u32()? as usize;
        let k = r.u32()? as usize;
        let j = r.u32()? as usize;
        let n = r.u32()? as usize;
        if d == 0 || dd == 0 || !d.is_multiple_of(dd) {
            return Err(corrupt(8, format!("dimension {d} not divisible into {dd} subspaces")));
        }
        if k == 0 || k > MAX_PQ_CENTROIDS {
            return Err(corrupt(16, format!("K = {k} outside [1, {MAX_PQ_CENTROIDS}]")));
        }
        if j == 0 {
            return Err(corrupt(20, "J = 0"));
        }
        if n == 0 {
            return Err(corrupt(24, "index holds no items"));
        }

        let floats = [d.checked_mul(d), j.checked_mul(d), k.checked_mul(d)]
            .into_iter()
            .try_fold(0usize, |acc, x| x.and_then(|x| acc.checked_add(x)));
        let fixed = floats
            .and_then(|f| f.checked_mul(4))
            .and_then(|f| n.checked_mul(4 + dd).and_then(|items| f.checked_add(items)))
            .and_then(|f| n.checked_mul(2).and_then(|vocab| f.checked_add(vocab)));
        match fixed {
            Some(need) if need <= r.remaining() => {}
            _ => return Err(corrupt(bytes.len(), "file shorter than its header requires")),
        }

        let rotation = r.f32s(d * d)?;
        let coarse = Matrix::from_vec(j, d, r.f32s(j * d)?)?;
        let pq_flat = r.f32s(k * d)?;

        let mut coarse_codes = Vec::with_capacity(n);
        let mut pq_codes = Vec::with_capacity(n * dd);
        for _ in 0..n {
            let at = r.pos;
            let c = r.u32()?;
            if c as usize >= j {
                return Err(corrupt(at, format!("coarse code {c} with J = {j}")));
            }
            coarse_codes.push(c);
            let at = r.pos;
            let codes = r.take(dd)?;
            if let Some(p) = codes.iter().position(|&c| c as usize >= k) {
                return Err(corrupt(at + p, format!("PQ code {} with K = {k}", codes[p])));
            }
            pq_codes.extend_from_slice(codes);
        }

        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| corrupt(at, "item id is not UTF-8"))?;
            ids.push(id.to_owned());
        }
        let vocab_end = r.pos;
        if r.remaining() != 0 {
            return Err(corrupt(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        validate_ids(&ids).map_err(|e| corrupt(vocab_end, e.to_string()))?;

        let coarse = CoarseCodebook::new(coarse).map_err(|e| corrupt(28, e.to_string()))?;
        let pq = PQCodebook::from_flat(dd, k, d / dd, &pq_flat).map_err(|e| corrupt(28, e.to_string()))?;
        EmbeddingIndex::assemble(rotation, coarse, pq, coarse_codes, pq_codes, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Corruption {
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt(
                self.bytes.len(),
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.take(count * 4)?;
        let out: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(p) = out.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(start + 4 * p, "non-finite float"));
        }
        Ok(out)
    }
}

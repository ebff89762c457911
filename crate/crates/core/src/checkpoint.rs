//! `URMM` matrix checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "URMM" | version u32
//! U       : rows u64 | cols u64 | rows*cols f32
//! V_dis   : same
//! P_trans : same
//! [extension, present iff bytes remain before the CRC]
//!   flags u32 (bit 0 head_norm, bit 1 generator present)
//!   gain  : 1 x H matrix
//!   [generator]
//!     item_embed | objective_embed | heads   (matrix layout as above)
//!     feature_dim u32 | max_history u32 | n_tags u32 | n_tags * (len u32 | utf8)
//! crc32 u32 of every preceding byte
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scoring::DecomposedMapping;
use crate::trainer::generator::ToyFeatureGenerator;

pub const MAGIC: &[u8; 4] = b"URMM";
pub const VERSION: u32 = 1;

const FLAG_HEAD_NORM: u32 = 1;
const FLAG_GENERATOR: u32 = 2;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub u: Matrix<f32>,
    pub v_dis: Matrix<f32>,
    pub p_trans: Matrix<f32>,
    pub head_norm: bool,
    pub gain: Option<Vec<f32>>,
    pub generator: Option<ToyFeatureGenerator<f32>>,
}

impl Checkpoint {
    pub fn from_parts(mapping: &DecomposedMapping<f32>, generator: Option<&ToyFeatureGenerator<f32>>) -> Self {
        Checkpoint {
            u: mapping.u.clone(),
            v_dis: mapping.v_dis.clone(),
            p_trans: mapping.p_trans.clone(),
            head_norm: mapping.head_norm,
            gain: Some(mapping.gain.clone()),
            generator: generator.cloned(),
        }
    }

    /// Attach the catalog's text features to obtain a usable mapping.
    pub fn mapping(&self, text: Arc<Matrix<f32>>) -> Result<DecomposedMapping<f32>> {
        let mut m = DecomposedMapping::new(
            self.u.clone(),
            self.v_dis.clone(),
            self.p_trans.clone(),
            text,
            self.head_norm,
        )?;
        if let Some(g) = &self.gain {
            m.gain = g.clone();
            m.validate()?;
        }
        Ok(m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_matrix(&mut buf, &self.u);
        put_matrix(&mut buf, &self.v_dis);
        put_matrix(&mut buf, &self.p_trans);
        if self.head_norm || self.gain.is_some() || self.generator.is_some() {
            let mut flags = 0;
            if self.head_norm {
                flags |= FLAG_HEAD_NORM;
            }
            if self.generator.is_some() {
                flags |= FLAG_GENERATOR;
            }
            buf.extend_from_slice(&flags.to_le_bytes());
            let gain = self.gain.clone().unwrap_or_else(|| vec![1.0; self.u.cols()]);
            put_matrix(&mut buf, &Matrix::from_vec(1, gain.len(), gain).expect("gain row"));
            if let Some(g) = &self.generator {
                put_matrix(&mut buf, &g.item_embed);
                put_matrix(&mut buf, &g.objective_embed);
                put_matrix(&mut buf, &g.heads);
                buf.extend_from_slice(&(g.feature_dim as u32).to_le_bytes());
                buf.extend_from_slice(&(g.max_history as u32).to_le_bytes());
                buf.extend_from_slice(&(g.tags.len() as u32).to_le_bytes());
                for t in &g.tags {
                    buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
                    buf.extend_from_slice(t.as_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let payload = verify_crc(bytes, MAGIC)?;
        let mut r = Reader::new(&payload[4..]);
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let u = r.matrix()?;
        let v_dis = r.matrix()?;
        let p_trans = r.matrix()?;
        let mut ck = Checkpoint {
            u,
            v_dis,
            p_trans,
            head_norm: false,
            gain: None,
            generator: None,
        };
        if !r.is_empty() {
            let flags = r.u32()?;
            ck.head_norm = flags & FLAG_HEAD_NORM != 0;
            ck.gain = Some(r.matrix()?.into_vec());
            if flags & FLAG_GENERATOR != 0 {
                let item_embed = r.matrix()?;
                let objective_embed = r.matrix()?;
                let heads = r.matrix()?;
                let feature_dim = r.u32()? as usize;
                let max_history = r.u32()? as usize;
                let n_tags = r.u32()? as usize;
                let mut tags = Vec::with_capacity(n_tags.min(1024));
                for _ in 0..n_tags {
                    let len = r.u32()? as usize;
                    let raw = r.take(len)?;
                    tags.push(
                        String::from_utf8(raw.to_vec())
                            .map_err(|_| Error::Corrupt("objective tag is not UTF-8".into()))?,
                    );
                }
                ck.generator = Some(ToyFeatureGenerator {
                    item_embed,
                    objective_embed,
                    tags,
                    heads,
                    feature_dim,
                    max_history,
                });
            }
        }
        if !r.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix<f32>) {
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Check magic and trailing CRC; returns the payload (without the CRC).
pub(crate) fn verify_crc<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    Ok(payload)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Corrupt(format!(
                "truncated: wanted {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix<f32>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("matrix size overflows".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

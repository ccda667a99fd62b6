//! Per-expert feature file.
//!
//! Layout, all little-endian: magic `STFX`, then u32 version, row count,
//! pooled width, layer count and pool size. Each row is four u32 tags
//! (sample, layer, slot, expert kind index) followed by `width` f32 values.
//! The pooled vector is the mean over frames (one value per feature row)
//! followed by the mean over feature rows (one value per frame).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STFX";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub sample: u32,
    pub layer: u32,
    pub slot: u32,
    pub kind: u32,
    pub values: Vec<f32>,
}

/// Pools row `b` of a `(batch, rows, frames)` expert output to `rows + frames` values.
pub fn pool(x: &Tensor, b: usize) -> Vec<f32> {
    let (d, t) = (x.dim(1), x.dim(2));
    let m = &x.data()[b * d * t..(b + 1) * d * t];
    let over_frames = (0..d).map(|i| m[i * t..(i + 1) * t].iter().sum::<f64>() / t as f64);
    let over_rows = (0..t).map(|j| (0..d).map(|i| m[i * t + j]).sum::<f64>() / d as f64);
    over_frames.chain(over_rows).map(|v| v as f32).collect()
}

pub fn encode(rows: &[FeatureRow], layers: u32, slots: u32) -> Result<Vec<u8>> {
    let width = rows.first().map_or(0, |r| r.values.len());
    if rows.iter().any(|r| r.values.len() != width) {
        return Err(Error::Invalid("feature rows differ in width".into()));
    }
    let fits = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")));
    let mut out = Vec::with_capacity(HEADER_BYTES + rows.len() * (16 + 4 * width));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, fits(rows.len())?, fits(width)?, layers, slots] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in rows {
        for v in [r.sample, r.layer, r.slot, r.kind] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns `(width, layers, slots, rows)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, u32, u32, Vec<FeatureRow>)> {
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a feature file".into()));
    }
    if u32_at(4) != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {}", u32_at(4))));
    }
    let (n, width) = (u32_at(8) as usize, u32_at(12) as usize);
    let row_bytes = 16 + 4 * width;
    if bytes.len() != HEADER_BYTES + n * row_bytes {
        return Err(Error::Format(format!(
            "feature file holds {} bytes, expected {}",
            bytes.len(),
            HEADER_BYTES + n * row_bytes
        )));
    }
    let rows = (0..n)
        .map(|r| {
            let at = HEADER_BYTES + r * row_bytes;
            FeatureRow {
                sample: u32_at(at),
                layer: u32_at(at + 4),
                slot: u32_at(at + 8),
                kind: u32_at(at + 12),
                values: (0..width)
                    .map(|i| f32::from_le_bytes(bytes[at + 16 + 4 * i..at + 20 + 4 * i].try_into().expect("4 bytes")))
                    .collect(),
            }
        })
        .collect();
    Ok((width, u32_at(16), u32_at(20), rows))
}

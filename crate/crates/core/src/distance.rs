//! Per-stream cosine distances and query × gallery distance matrices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, EmbeddingSet, Stream, EPS_ZERO};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 6] = b"TSDWDM";

/// Distance reported when either side is the zero vector.
pub const NEUTRAL_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Face,
    HeadLimb,
    Global,
    Fused,
}

impl From<Stream> for StreamTag {
    fn from(s: Stream) -> Self {
        match s {
            Stream::Face => StreamTag::Face,
            Stream::HeadLimb => StreamTag::HeadLimb,
            Stream::Global => StreamTag::Global,
        }
    }
}

/// `1 - cos(a, b)` clamped to `[0, 2]`; 1.0 when either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_distance_unchecked(a, b))
}

pub(crate) fn cosine_distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < EPS_ZERO || nb < EPS_ZERO {
        return NEUTRAL_DISTANCE;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Cosine distance together with its gradient with respect to both inputs.
/// The gradient is zero on the neutral and clamped regions.
pub(crate) fn cosine_distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < EPS_ZERO || nb < EPS_ZERO {
        return (NEUTRAL_DISTANCE, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let raw = 1.0 - cos;
    if !(0.0..=2.0).contains(&raw) {
        return (raw.clamp(0.0, 2.0), vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    // d(cos)/da = b/(|a||b|) - cos * a/|a|^2
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let gb = b
        .iter()
        .zip(a)
        .map(|(y, x)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    (raw, ga, gb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub stream_tag: StreamTag,
}

impl DistanceMatrix {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>, stream_tag: StreamTag) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 2.0) {
            return Err(Error::Value(format!("distance {v} outside [0, 2]")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            stream_tag,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
            stream_tag: self.stream_tag,
        }
    }

    /// Writes the `TSDWDM` dump: magic, q u32, g u32, then f32 row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(14 + 4 * self.values.len());
        buf.extend_from_slice(MATRIX_MAGIC);
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
            .map_err(|e| Error::Format(format!("matrix write failed: {e}")))
    }

    pub fn read_from<R: Read>(r: &mut R, stream_tag: StreamTag) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("matrix read failed: {e}")))?;
        if bytes.len() < 14 || &bytes[..6] != MATRIX_MAGIC {
            return Err(Error::Format("missing TSDWDM header".into()));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != rows * cols * 4 {
            return Err(Error::Format(format!(
                "matrix body has {} bytes, expected {}",
                body.len(),
                rows * cols * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_vec(rows, cols, values, stream_tag)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, stream_tag: StreamTag) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), stream_tag)
    }
}

pub(crate) fn check_same_dims(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<()> {
    if query.dims != gallery.dims {
        return Err(Error::Dimension(format!(
            "query dims {:?} differ from gallery dims {:?}",
            query.dims, gallery.dims
        )));
    }
    Ok(())
}

pub fn stream_distance_matrix(query: &EmbeddingSet, gallery: &EmbeddingSet, stream: Stream) -> Result<DistanceMatrix> {
    check_same_dims(query, gallery)?;
    let values: Vec<f64> = query
        .records
        .par_iter()
        .flat_map_iter(|q| {
            gallery
                .records
                .iter()
                .map(move |g| cosine_distance_unchecked(q.stream(stream), g.stream(stream)))
        })
        .collect();
    Ok(DistanceMatrix {
        rows: query.len(),
        cols: gallery.len(),
        values,
        stream_tag: stream.into(),
    })
}

/// Convex combination of the three per-stream matrices with fixed weights.
pub fn weighted_matrix(matrices: [&DistanceMatrix; 3], weights: [f64; 3]) -> Result<DistanceMatrix> {
    let shape = matrices[0].shape();
    if matrices.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dimension("stream matrices differ in shape".into()));
    }
    let values = (0..shape.0 * shape.1)
        .map(|k| {
            (0..3)
                .map(|s| weights[s] * matrices[s].values[k])
                .sum::<f64>()
                .clamp(0.0, 2.0)
        })
        .collect();
    Ok(DistanceMatrix {
        rows: shape.0,
        cols: shape.1,
        values,
        stream_tag: StreamTag::Fused,
    })
}

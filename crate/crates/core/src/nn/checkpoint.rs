//! Parameter blobs: raw little-endian `f64` values in a fixed visiting order,
//! described by a JSON manifest that records every network's layer shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, LayerShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub name: String,
    pub layers: Vec<LayerShape>,
}

impl NetManifest {
    pub fn of(name: &str, net: &DenseNet) -> Self {
        Self {
            name: name.to_owned(),
            layers: net.shapes(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }
}

pub fn encode_blob<'a>(segments: impl IntoIterator<Item = &'a [f64]>) -> Vec<u8> {
    let mut out = Vec::new();
    for seg in segments {
        for v in seg {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format(format!(
            "parameter blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_blob<'a>(path: &Path, segments: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    fs::write(path, encode_blob(segments)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes)
}

/// Sequential reader over a decoded blob.
pub struct BlobReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        Self { values, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.values.len() {
            return Err(Error::Format(format!(
                "parameter blob too short: need {} more values at offset {}, have {}",
                n,
                self.pos,
                self.values.len() - self.pos
            )));
        }
        let out = &self.values[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Builds a network with the manifest's shapes and fills it from the blob.
    pub fn read_net(&mut self, manifest: &NetManifest) -> Result<DenseNet> {
        let mut net = DenseNet::from_shapes(&manifest.layers)?;
        for seg in net.segments_mut() {
            let n = seg.len();
            seg.copy_from_slice(self.take(n)?);
        }
        if net.segments().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "network {} has non-finite parameters",
                manifest.name
            )));
        }
        Ok(net)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::Format(format!(
                "parameter blob has {} unused values",
                self.values.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn net_round_trip_through_blob() {
        let net = DenseNet::mlp(5, 3, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let manifest = NetManifest::of("n", &net);
        assert_eq!(manifest.param_count(), net.param_count());
        let values = decode_blob(&encode_blob(net.segments())).unwrap();
        let mut reader = BlobReader::new(&values);
        assert_eq!(reader.read_net(&manifest).unwrap(), net);
        reader.finish().unwrap();
    }

    #[test]
    fn short_blob_rejected() {
        let net = DenseNet::mlp(5, 3, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let manifest = NetManifest::of("n", &net);
        let values = vec![0.0; net.param_count() - 1];
        assert!(BlobReader::new(&values).read_net(&manifest).is_err());
        assert!(decode_blob(&[0u8; 7]).is_err());
    }
}

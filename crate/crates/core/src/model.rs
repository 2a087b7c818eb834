//! Trained model checkpoints: a JSON manifest next to a raw `f64` blob.
//!
//! The blob holds the seven networks in [`NetId::ALL`] order, then the
//! adapter matrices when present. Scalars such as thresholds and projection
//! seeds live in the manifest; projections are rebuilt from their seeds.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dwt::{DwtConfig, DwtParams, NetId, PairNet, RandomProjection, Thresholds};
use crate::embedding::{EmbeddingSet, Stream, StreamDims};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_blob, write_blob, BlobReader, NetManifest};
use crate::train::{Adapters, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionManifest {
    pub seed: u64,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub dims: StreamDims,
    pub nets: Vec<NetManifest>,
    /// One entry per network, `None` when the encoding feeds the net directly.
    pub projections: Vec<Option<ProjectionManifest>>,
    pub thresholds_raw: [f64; 6],
    pub branch_temperature: f64,
    pub adapters: bool,
    pub param_count: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

/// Decision module plus optional stream adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub params: DwtParams,
    pub adapters: Option<Adapters>,
}

impl FusionModel {
    pub fn new(params: DwtParams) -> Self {
        Self { params, adapters: None }
    }

    /// Passes a set through the adapters, if any.
    pub fn prepare<'a>(&self, set: &'a EmbeddingSet) -> Result<Cow<'a, EmbeddingSet>> {
        match &self.adapters {
            Some(a) => Ok(Cow::Owned(a.apply_set(set)?)),
            None => Ok(Cow::Borrowed(set)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count() + self.adapters.as_ref().map_or(0, Adapters::param_count)
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (parameters).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &FusionModel,
    seed: u64,
    epoch: usize,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let params = &model.params;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        seed,
        epoch,
        dims: params.dims,
        nets: NetId::ALL
            .iter()
            .map(|&id| NetManifest::of(id.name(), &params.net(id).net))
            .collect(),
        projections: NetId::ALL
            .iter()
            .map(|&id| {
                params.net(id).projection.as_ref().map(|p| ProjectionManifest {
                    seed: p.seed,
                    in_dim: p.in_dim,
                    out_dim: p.out_dim,
                })
            })
            .collect(),
        thresholds_raw: params.thresholds.raw,
        branch_temperature: params.branch_temperature,
        adapters: model.adapters.is_some(),
        param_count: model.param_count(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        train: train.cloned(),
    };
    let mut segments: Vec<&[f64]> = NetId::ALL
        .iter()
        .flat_map(|&id| params.net(id).net.segments())
        .collect();
    if let Some(a) = &model.adapters {
        segments.extend(a.segments());
    }
    write_blob(&blob, segments)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointManifest, FusionModel)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    if m.nets.len() != NetId::ALL.len() || m.projections.len() != NetId::ALL.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} networks and {} projections, expected {}",
            m.nets.len(),
            m.projections.len(),
            NetId::ALL.len()
        )));
    }
    let values = read_blob(&path.with_file_name(&m.blob))?;
    let mut reader = BlobReader::new(&values);
    let mut nets = Vec::with_capacity(NetId::ALL.len());
    for ((&id, nm), pm) in NetId::ALL.iter().zip(&m.nets).zip(&m.projections) {
        if nm.name != id.name() {
            return Err(Error::Format(format!(
                "expected network {}, found {}",
                id.name(),
                nm.name
            )));
        }
        let net = reader.read_net(nm)?;
        let projection = pm.as_ref().map(|p| RandomProjection::new(p.seed, p.in_dim, p.out_dim));
        let pair = PairNet { net, projection };
        let expected = id.encoding_dim(&m.dims);
        if pair.encoding_dim() != expected || pair.net.output_dim() != id.output_dim() {
            return Err(Error::Dimension(format!(
                "network {} takes {} inputs and emits {}, dims {:?} require {} and {}",
                id.name(),
                pair.encoding_dim(),
                pair.net.output_dim(),
                m.dims,
                expected,
                id.output_dim()
            )));
        }
        nets.push(pair);
    }
    let adapters = if m.adapters {
        let mut a = Adapters::identity(m.dims);
        for (s, seg) in Stream::ALL.iter().zip(a.segments_mut()) {
            let n = m.dims.get(*s);
            seg.copy_from_slice(reader.take(n * n)?);
        }
        Some(a)
    } else {
        None
    };
    reader.finish()?;

    let mut nets = nets.into_iter();
    let mut next = || nets.next().expect("seven networks");
    let params = DwtParams {
        confidence_f: next(),
        confidence_lg1: next(),
        confidence_lg2: next(),
        gating_fg: next(),
        gating_fl: next(),
        gating_all: next(),
        gating_lg: next(),
        thresholds: Thresholds { raw: m.thresholds_raw },
        branch_temperature: m.branch_temperature,
        dims: m.dims,
    };
    params.check_temperature()?;
    let model = FusionModel { params, adapters };
    if model.param_count() != m.param_count {
        return Err(Error::Format(format!(
            "manifest declares {} parameters, shapes give {}",
            m.param_count,
            model.param_count()
        )));
    }
    Ok((m, model))
}

/// A fresh untrained model, mostly for tests and smoke runs.
pub fn untrained(dims: StreamDims, cfg: &DwtConfig, seed: u64) -> Result<FusionModel> {
    Ok(FusionModel::new(DwtParams::init(dims, cfg, seed)?))
}

//! Fusion-stage training on PK batches: batch-hard triplet loss over
//! soft-mode fused distances, optimized with Adam on a milestone schedule.
//!
//! Optional per-stream linear adapters stand in for stream fine-tuning. They
//! stay frozen for the first `freeze_epochs`; afterwards each batch first
//! updates a clothes classifier, then the adapters and decision module
//! against triplet plus clothes-adversarial loss.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwt::{decide_hard, soft_pair_forward, Branch, DwtConfig, DwtGrads, DwtParams, PairInputGrads};
use crate::embedding::{l2_norm, EmbeddingRecord, EmbeddingSet, Stream, StreamDims, EPS_ZERO};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet_masked, cal_loss, label_smoothed_ce, CalConfig, TripletConfig};
use crate::nn::{AdamConfig, AdamState, LrSchedule};

/// Pairs whose backward passes are accumulated together before the ordered
/// reduction. Fixed so that results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PkSamplerConfig {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for PkSamplerConfig {
    fn default() -> Self {
        Self { p: 4, k: 8, seed: 0 }
    }
}

impl PkSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "PK sampling needs P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Record indices per identity, for identities with at least two samples.
fn eligible_identities(set: &EmbeddingSet) -> Vec<(u32, Vec<usize>)> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        groups.entry(r.person_id).or_default().push(i);
    }
    groups.into_iter().filter(|(_, v)| v.len() >= 2).collect()
}

fn draw_k<R: Rng + ?Sized>(members: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if members.len() >= k {
        return sample_indices(rng, members.len(), k)
            .into_iter()
            .map(|i| members[i])
            .collect();
    }
    let mut out = members.to_vec();
    while out.len() < k {
        out.push(members[rng.random_range(0..members.len())]);
    }
    out
}

fn check_eligible(n: usize, p: usize) -> Result<()> {
    if n < p {
        return Err(Error::Sampling(format!(
            "{n} identities have at least two samples, a batch needs P={p}"
        )));
    }
    Ok(())
}

/// One PK batch: `P` distinct identities, `K` indices each, grouped by
/// identity. Identities with fewer than `K` samples contribute all of them
/// plus draws with replacement.
pub fn sample_batch<R: Rng + ?Sized>(set: &EmbeddingSet, cfg: &PkSamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    cfg.validate()?;
    let groups = eligible_identities(set);
    check_eligible(groups.len(), cfg.p)?;
    Ok(sample_indices(rng, groups.len(), cfg.p)
        .into_iter()
        .flat_map(|g| draw_k(&groups[g].1, cfg.k, rng))
        .collect())
}

/// All batches of one epoch: eligible identities shuffled and cut into
/// groups of `P`, the incomplete tail dropped.
pub fn epoch_batches<R: Rng + ?Sized>(
    set: &EmbeddingSet,
    cfg: &PkSamplerConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut groups = eligible_identities(set);
    check_eligible(groups.len(), cfg.p)?;
    groups.shuffle(rng);
    Ok(groups
        .chunks_exact(cfg.p)
        .map(|chunk| chunk.iter().flat_map(|(_, m)| draw_k(m, cfg.k, rng)).collect())
        .collect())
}

/// Which same-identity samples may serve as the hardest positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositivePolicy {
    #[default]
    AnyOutfit,
    /// Only samples wearing different clothes, matching cloth-changing
    /// retrieval. Anchors without such a sample are skipped.
    CrossClothes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub triplet: TripletConfig,
    pub positives: PositivePolicy,
    pub adapter_enabled: bool,
    pub cal: CalConfig,
    pub cal_weight: f64,
    pub label_smoothing: f64,
    pub sampler: PkSamplerConfig,
    pub dwt: DwtConfig,
    /// Train records used for the per-epoch branch-occupancy probe.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            freeze_epochs: 10,
            schedule: LrSchedule::default(),
            weight_decay: 5e-4,
            triplet: TripletConfig::default(),
            positives: PositivePolicy::AnyOutfit,
            adapter_enabled: false,
            cal: CalConfig::default(),
            cal_weight: 1.0,
            label_smoothing: 0.1,
            sampler: PkSamplerConfig::default(),
            dwt: DwtConfig::default(),
            probe_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_epochs > self.epochs {
            return Err(Error::Config(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            )));
        }
        self.schedule.validate()?;
        self.sampler.validate()?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.triplet.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                self.triplet.margin
            )));
        }
        if !(self.dwt.branch_temperature > 0.0) {
            return Err(Error::Config(format!(
                "branch_temperature must be positive, got {}",
                self.dwt.branch_temperature
            )));
        }
        if !(self.cal.temperature > 0.0) {
            return Err(Error::Config(format!(
                "CAL temperature must be positive, got {}",
                self.cal.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Per-stream linear maps `x ↦ A x / |A x|`, identity-initialized, no bias.
/// Absent (zero) faces pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub dims: StreamDims,
    /// Row-major `d × d` matrices indexed by [`Stream::index`].
    pub maps: [Vec<f64>; 3],
}

impl Adapters {
    pub fn identity(dims: StreamDims) -> Self {
        let eye = |d: usize| {
            let mut m = vec![0.0; d * d];
            (0..d).for_each(|i| m[i * d + i] = 1.0);
            m
        };
        Self {
            dims,
            maps: Stream::ALL.map(|s| eye(dims.get(s))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }

    pub fn segments(&self) -> Vec<&[f64]> {
        self.maps.iter().map(Vec::as_slice).collect()
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        self.maps.iter_mut().map(Vec::as_mut_slice).collect()
    }

    /// Adapted vector and the norm of `A x` before normalization.
    fn map(&self, stream: Stream, x: &[f64]) -> (Vec<f64>, f64) {
        let d = x.len();
        let z: Vec<f64> = self.maps[stream.index()]
            .chunks_exact(d)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let n = l2_norm(&z);
        if n < EPS_ZERO {
            return (vec![0.0; d], n);
        }
        (z.into_iter().map(|v| v / n).collect(), n)
    }

    pub fn apply(&self, r: &EmbeddingRecord) -> EmbeddingRecord {
        let face = if r.face_present() {
            self.map(Stream::Face, &r.face).0
        } else {
            r.face.clone()
        };
        EmbeddingRecord::new(
            r.image_id.clone(),
            r.person_id,
            r.camera_id,
            r.clothes_id,
            face,
            self.map(Stream::HeadLimb, &r.head_limb).0,
            self.map(Stream::Global, &r.global_feat).0,
        )
    }

    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dims != self.dims {
            return Err(Error::Dimension(format!(
                "adapters built for {:?}, set has {:?}",
                self.dims, set.dims
            )));
        }
        let records = set.records.par_iter().map(|r| self.apply(r)).collect();
        EmbeddingSet::new(records, set.dims, set.role)
    }

    /// Accumulates `dL/dA` given `dL/dy` for `y = A x / |A x|`.
    fn backward(&self, x: &[f64], y: &[f64], norm: f64, dy: &[f64], acc: &mut [f64]) {
        if norm < EPS_ZERO {
            return;
        }
        let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        let d = x.len();
        for (row, (yi, dyi)) in acc.chunks_exact_mut(d).zip(y.iter().zip(dy)) {
            let dz = (dyi - yi * proj) / norm;
            row.iter_mut().zip(x).for_each(|(a, xj)| *a += dz * xj);
        }
    }
}

/// Fraction of probe pairs landing in each leaf, in [`Branch::ALL`] order.
/// Serialized as an object keyed by branch label.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BranchOccupancy(pub [f64; 7]);

impl Serialize for BranchOccupancy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(7))?;
        for (b, v) in Branch::ALL.iter().zip(&self.0) {
            m.serialize_entry(b.label(), v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for BranchOccupancy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = [0.0; 7];
        for (slot, b) in out.iter_mut().zip(Branch::ALL) {
            *slot = *map
                .get(b.label())
                .ok_or_else(|| serde::de::Error::missing_field(b.label()))?;
        }
        Ok(Self(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub branch_occupancy: BranchOccupancy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DwtParams,
    pub adapters: Option<Adapters>,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

/// Clothes classifier used by the adversarial stage.
struct ClothesHead {
    /// Train clothes id → class index.
    class_of: BTreeMap<u32, usize>,
    owner: Vec<u32>,
    centroids: Vec<Vec<f64>>,
    adam: AdamState,
}

impl ClothesHead {
    /// Centroids start at the normalized class means of the global stream.
    fn new(set: &EmbeddingSet) -> Self {
        let mut class_of = BTreeMap::new();
        for r in &set.records {
            let next = class_of.len();
            class_of.entry(r.clothes_id).or_insert(next);
        }
        let d = set.dims.global;
        let mut owner = vec![0; class_of.len()];
        let mut centroids = vec![vec![0.0; d]; class_of.len()];
        for r in &set.records {
            let c = class_of[&r.clothes_id];
            owner[c] = r.person_id;
            centroids[c].iter_mut().zip(&r.global_feat).for_each(|(a, b)| *a += b);
        }
        for c in &mut centroids {
            let n = l2_norm(c).max(EPS_ZERO);
            c.iter_mut().for_each(|v| *v /= n);
        }
        let adam = AdamState::new(class_of.len() * d, AdamConfig::default());
        Self {
            class_of,
            owner,
            centroids,
            adam,
        }
    }

    /// One classifier step on fixed features; returns the mean CE loss.
    fn step(&mut self, feats: &[Vec<f64>], classes: &[usize], cfg: &TrainConfig, lr: f64) -> Result<f64> {
        let tau = cfg.cal.temperature;
        let n = feats.len() as f64;
        let mut grads = vec![vec![0.0; self.centroids[0].len()]; self.centroids.len()];
        let mut loss = 0.0;
        for (f, &c) in feats.iter().zip(classes) {
            let logits: Vec<f64> = self
                .centroids
                .iter()
                .map(|phi| phi.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let (l, g) = label_smoothed_ce(&logits, c, cfg.label_smoothing)?;
            loss += l / n;
            for (gc, gl) in grads.iter_mut().zip(&g) {
                gc.iter_mut().zip(f).for_each(|(a, x)| *a += gl * x / (tau * n));
            }
        }
        self.adam.step(
            self.centroids.iter_mut().map(Vec::as_mut_slice),
            grads.iter().map(Vec::as_slice),
            lr,
            cfg.weight_decay,
        )?;
        Ok(loss)
    }
}

/// Batch inputs after adapters, with what the adapter backward pass needs.
struct AdaptedBatch {
    records: Vec<EmbeddingRecord>,
    norms: Vec<[f64; 3]>,
}

fn adapt_batch(set: &EmbeddingSet, idx: &[usize], adapters: Option<&Adapters>) -> AdaptedBatch {
    let Some(a) = adapters else {
        return AdaptedBatch {
            records: idx.iter().map(|&i| set.records[i].clone()).collect(),
            norms: vec![[1.0; 3]; idx.len()],
        };
    };
    let mut norms = Vec::with_capacity(idx.len());
    let records = idx
        .iter()
        .map(|&i| {
            let r = &set.records[i];
            let (face, nf) = if r.face_present() {
                a.map(Stream::Face, &r.face)
            } else {
                (r.face.clone(), 0.0)
            };
            let (limb, nl) = a.map(Stream::HeadLimb, &r.head_limb);
            let (global, ng) = a.map(Stream::Global, &r.global_feat);
            norms.push([nf, nl, ng]);
            EmbeddingRecord::new(
                r.image_id.clone(),
                r.person_id,
                r.camera_id,
                r.clothes_id,
                face,
                limb,
                global,
            )
        })
        .collect();
    AdaptedBatch { records, norms }
}

struct BatchGrads {
    loss: f64,
    dwt: DwtGrads,
    /// `dL/dy` per sample and stream, present when adapters train.
    inputs: Option<Vec<[Vec<f64>; 3]>>,
}

fn triplet_batch(
    params: &DwtParams,
    batch: &AdaptedBatch,
    cfg: &TrainConfig,
    want_inputs: bool,
    (epoch, batch_no, idx): (usize, usize, &[usize]),
) -> Result<BatchGrads> {
    let n = batch.records.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let views: Vec<_> = batch.records.iter().map(EmbeddingRecord::view).collect();
    let traces = pairs
        .par_iter()
        .map(|&(i, j)| soft_pair_forward(params, &views[i], &views[j]))
        .collect::<Result<Vec<_>>>()?;

    let mut dist = vec![0.0; n * n];
    for (&(i, j), t) in pairs.iter().zip(&traces) {
        let d = t.fused();
        if !d.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: batch_no,
                pair: Some((idx[i], idx[j])),
            });
        }
        dist[i * n + j] = d;
        dist[j * n + i] = d;
    }
    let person_ids: Vec<u32> = batch.records.iter().map(|r| r.person_id).collect();
    let mask: Option<Vec<bool>> = (cfg.positives == PositivePolicy::CrossClothes).then(|| {
        let r = &batch.records;
        (0..n * n).map(|k| r[k / n].clothes_id != r[k % n].clothes_id).collect()
    });
    let out = batch_hard_triplet_masked(&dist, &person_ids, mask.as_deref(), &cfg.triplet)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_no,
            pair: None,
        });
    }

    let active: Vec<(usize, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(p, &(i, j))| (p, out.grad[i * n + j] + out.grad[j * n + i]))
        .filter(|&(_, g)| g != 0.0)
        .collect();
    type Partial = (DwtGrads, Vec<(usize, Option<PairInputGrads>)>);
    let partials = active
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<Partial> {
            let mut g = DwtGrads::zeros_like(params);
            let mut inputs = Vec::with_capacity(chunk.len());
            for &(p, gf) in chunk {
                let (i, j) = pairs[p];
                let ig = traces[p].backward(params, &views[i], &views[j], gf, &mut g, want_inputs)?;
                inputs.push((p, ig));
            }
            Ok((g, inputs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut dwt = DwtGrads::zeros_like(params);
    let mut sample_grads = want_inputs.then(|| {
        batch
            .records
            .iter()
            .map(|r| Stream::ALL.map(|s| vec![0.0; r.stream(s).len()]))
            .collect::<Vec<_>>()
    });
    for (g, inputs) in partials {
        dwt.add_assign(&g);
        let Some(acc) = sample_grads.as_mut() else { continue };
        for (p, ig) in inputs {
            let (i, j) = pairs[p];
            let ig = ig.expect("input gradients requested");
            for s in 0..3 {
                acc[i][s].iter_mut().zip(&ig.query[s]).for_each(|(a, b)| *a += b);
                acc[j][s].iter_mut().zip(&ig.gallery[s]).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(BatchGrads {
        loss: out.loss,
        dwt,
        inputs: sample_grads,
    })
}

/// Hard-mode branch fractions over all pairs of the first `probe_size`
/// train records.
pub fn branch_occupancy(params: &DwtParams, records: &[EmbeddingRecord]) -> Result<BranchOccupancy> {
    let n = records.len();
    let counts = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut c = [0usize; 7];
            for j in i + 1..n {
                c[decide_hard(params, &records[i], &records[j])?.1.index()] += 1;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = (n * n.saturating_sub(1) / 2).max(1) as f64;
    let mut occ = [0.0; 7];
    for c in counts {
        occ.iter_mut().zip(c).for_each(|(o, k)| *o += k as f64);
    }
    Ok(BranchOccupancy(occ.map(|o| o / total)))
}

pub fn train_fusion(train: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_fusion_logged(train, cfg, |_| Ok(()))
}

/// Like [`train_fusion`], calling `on_epoch` after every epoch.
pub fn train_fusion_logged(
    train: &EmbeddingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = DwtParams::init(train.dims, &cfg.dwt, cfg.seed)?;
    let mut adapters = cfg.adapter_enabled.then(|| Adapters::identity(train.dims));
    let mut dwt_adam = AdamState::new(params.param_count(), AdamConfig::default());
    let mut adapter_adam = adapters
        .as_ref()
        .map(|a| AdamState::new(a.param_count(), AdamConfig::default()));
    let mut head = adapters.is_some().then(|| ClothesHead::new(train));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let probe_len = cfg.probe_size.min(train.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let adapting = adapters.is_some() && epoch >= cfg.freeze_epochs;
        let batches = epoch_batches(train, &cfg.sampler, &mut rng)?;
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = adapt_batch(train, idx, adapters.as_ref());
            let mut grads = triplet_batch(&params, &batch, cfg, adapting, (epoch + 1, b, idx))?;
            let mut loss = grads.loss;
            if adapting {
                let (a, head) = (adapters.as_mut().unwrap(), head.as_mut().unwrap());
                let feats: Vec<Vec<f64>> = batch.records.iter().map(|r| r.global_feat.clone()).collect();
                let classes: Vec<usize> = batch.records.iter().map(|r| head.class_of[&r.clothes_id]).collect();
                let pids: Vec<u32> = batch.records.iter().map(|r| r.person_id).collect();
                head.step(&feats, &classes, cfg, lr)?;
                let cal = cal_loss(&feats, &classes, &pids, &head.centroids, &head.owner, &cfg.cal)?;
                loss += cfg.cal_weight * cal.loss;
                let inputs = grads.inputs.as_mut().expect("input gradients requested");
                for (g, gf) in inputs.iter_mut().zip(&cal.grad_features) {
                    let slot = &mut g[Stream::Global.index()];
                    slot.iter_mut().zip(gf).for_each(|(s, v)| *s += cfg.cal_weight * v);
                }
                let mut a_grads: [Vec<f64>; 3] = a.maps.clone().map(|m| vec![0.0; m.len()]);
                for (pos, (&k, g)) in idx.iter().zip(inputs.iter()).enumerate() {
                    let (orig, adapted, norms) = (&train.records[k], &batch.records[pos], batch.norms[pos]);
                    for s in Stream::ALL {
                        let si = s.index();
                        a.backward(orig.stream(s), adapted.stream(s), norms[si], &g[si], &mut a_grads[si]);
                    }
                }
                adapter_adam.as_mut().unwrap().step(
                    a.segments_mut(),
                    a_grads.iter().map(Vec::as_slice),
                    lr,
                    cfg.weight_decay,
                )?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    pair: None,
                });
            }
            dwt_adam.step(params.segments_mut(), grads.dwt.segments(), lr, cfg.weight_decay)?;
            loss_sum += loss;
        }
        let probe: Vec<EmbeddingRecord> = match &adapters {
            Some(a) => train.records[..probe_len].iter().map(|r| a.apply(r)).collect(),
            None => train.records[..probe_len].to_vec(),
        };
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            branch_occupancy: branch_occupancy(&params, &probe)?,
        };
        on_epoch(&log)?;
        history.push(log);
    }
    Ok(TrainOutcome {
        params,
        adapters,
        history,
    })
}

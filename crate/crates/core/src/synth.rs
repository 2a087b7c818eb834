//! Seeded synthetic tri-stream benchmark, plus brute-force oracles.
//!
//! Each identity owns a unit prototype per stream. Every image adds
//! per-coordinate Gaussian noise and re-normalizes; every outfit shifts the
//! global prototype, so the global stream degrades across clothing changes.
//! Faces go missing independently with probability `face_absence_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dwt::{DwtParams, NetId, WeightVector};
use crate::embedding::{EmbeddingRecord, EmbeddingSet, SetRole, StreamDims};
use crate::error::{Error, Result};
use crate::nn::{Activation, LrSchedule};
use crate::train::{PositivePolicy, TrainConfig};

/// Seed offset of the generator that decides face absence.
const FACE_ABSENCE_STREAM: u64 = 0x00FA_CE0F_F5E7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub outfits_per_identity: usize,
    pub images_per_outfit: usize,
    pub dims: StreamDims,
    pub face_absence_prob: f64,
    pub sigma_face: f64,
    pub sigma_head_limb: f64,
    pub sigma_global: f64,
    pub clothing_shift_scale: f64,
    /// Fraction of identities assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 100,
            outfits_per_identity: 3,
            images_per_outfit: 4,
            dims: StreamDims::uniform(32),
            face_absence_prob: 0.5,
            sigma_face: 0.1,
            sigma_head_limb: 0.3,
            sigma_global: 0.2,
            clothing_shift_scale: 0.6,
            train_fraction: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.face_absence_prob) {
            return bad(format!("face_absence_prob {} outside [0, 1]", self.face_absence_prob));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction {} outside [0, 1]", self.train_fraction));
        }
        for (name, s) in [
            ("sigma_face", self.sigma_face),
            ("sigma_head_limb", self.sigma_head_limb),
            ("sigma_global", self.sigma_global),
            ("clothing_shift_scale", self.clothing_shift_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {s}"));
            }
        }
        if [self.dims.face, self.dims.head_limb, self.dims.global].contains(&0) {
            return bad("stream dims must be positive".into());
        }
        if self.outfits_per_identity == 0 {
            return bad("outfits_per_identity must be positive".into());
        }
        if self.images_per_outfit < 2 {
            return bad("images_per_outfit must be at least 2 (one gallery image plus queries)".into());
        }
        let (train, eval) = self.split_sizes();
        if train < 2 || eval < 2 {
            return bad(format!(
                "split of {} identities gives {train} train / {eval} eval; both need at least 2",
                self.n_identities
            ));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let train = (self.n_identities as f64 * self.train_fraction).round() as usize;
        let train = train.min(self.n_identities);
        (train, self.n_identities - train)
    }
}

/// Training recipe for the synthetic benchmark: 16-unit networks at step size
/// 1e-3, mining positives across clothes only.
pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        schedule: LrSchedule {
            base_lr: 1e-3,
            ..LrSchedule::default()
        },
        positives: PositivePolicy::CrossClothes,
        seed,
        ..TrainConfig::default()
    };
    cfg.dwt.hidden = 16;
    cfg.sampler.seed = seed;
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: EmbeddingSet,
    pub query: EmbeddingSet,
    pub gallery: EmbeddingSet,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit-normalizes and rounds to f32 so the vector survives the file format
/// exactly.
fn unit_f32(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| ((x / n) as f32) as f64).collect()
}

fn perturb(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    let noise = gaussian(rng, center.len());
    unit_f32(center.iter().zip(noise).map(|(c, z)| c + sigma * z).collect())
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut face_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ FACE_ABSENCE_STREAM);
    let dims = cfg.dims;
    let (n_train, _) = cfg.split_sizes();
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());

    for pid in 0..cfg.n_identities {
        let p_face = unit_f32(gaussian(&mut rng, dims.face));
        let p_limb = unit_f32(gaussian(&mut rng, dims.head_limb));
        let p_global = unit_f32(gaussian(&mut rng, dims.global));
        for outfit in 0..cfg.outfits_per_identity {
            let p_outfit = perturb(&mut rng, &p_global, cfg.clothing_shift_scale);
            let clothes_id = (pid * cfg.outfits_per_identity + outfit) as u32;
            for img in 0..cfg.images_per_outfit {
                let mut face = perturb(&mut rng, &p_face, cfg.sigma_face);
                let head_limb = perturb(&mut rng, &p_limb, cfg.sigma_head_limb);
                let global = perturb(&mut rng, &p_outfit, cfg.sigma_global);
                if face_rng.random::<f64>() < cfg.face_absence_prob {
                    face.iter_mut().for_each(|x| *x = 0.0);
                }
                let image_id = format!("p{pid:04}_o{outfit}_i{img}");
                let is_train = pid < n_train;
                let camera = match (is_train, img, outfit) {
                    (true, _, _) => (img % 3) as u16,
                    (false, 0, _) => 0,
                    (false, _, 0) => 1,
                    (false, _, _) => 2,
                };
                let record = EmbeddingRecord::new(image_id, pid as u32, camera, clothes_id, face, head_limb, global);
                match (is_train, img) {
                    (true, _) => train.push(record),
                    (false, 0) => gallery.push(record),
                    (false, _) => query.push(record),
                }
            }
        }
    }
    Ok(SynthSplits {
        train: EmbeddingSet::new(train, dims, SetRole::Train)?,
        query: EmbeddingSet::new(query, dims, SetRole::Query)?,
        gallery: EmbeddingSet::new(gallery, dims, SetRole::Gallery)?,
    })
}

// ---------------------------------------------------------------------------
// Oracles. Written without reusing the production decision or ranking code.

fn oracle_mlp(params: &DwtParams, id: NetId, input: Vec<f64>) -> Vec<f64> {
    let pair = params.net(id);
    let mut x = match &pair.projection {
        Some(p) => p.apply(&input),
        None => input,
    };
    for layer in &pair.net.layers {
        let mut y = vec![0.0; layer.out_dim];
        for o in 0..layer.out_dim {
            let mut dot = 0.0;
            for i in 0..layer.in_dim {
                dot += layer.weights[o * layer.in_dim + i] * x[i];
            }
            let acc = dot + layer.bias[o];
            y[o] = match layer.activation {
                Activation::Relu => acc.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
                Activation::Identity => acc,
            };
        }
        x = y;
    }
    x
}

fn oracle_encoding(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * a.len());
    for i in 0..a.len() {
        out.push(a[i] * b[i]);
    }
    for i in 0..a.len() {
        out.push((a[i] - b[i]).abs());
    }
    out
}

fn oracle_confidence(params: &DwtParams, id: NetId, input: Vec<f64>) -> f64 {
    let logit = oracle_mlp(params, id, input)[0];
    1.0 / (1.0 + (-logit).exp())
}

fn oracle_gate(params: &DwtParams, id: NetId, input: Vec<f64>) -> Vec<f64> {
    let logits = oracle_mlp(params, id, input);
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line transliteration of the hard three-layer decision.
pub fn oracle_dwt(params: &DwtParams, q: &EmbeddingRecord, g: &EmbeddingRecord) -> WeightVector {
    let ef = oracle_encoding(&q.face, &g.face);
    let el = oracle_encoding(&q.head_limb, &g.head_limb);
    let eg = oracle_encoding(&q.global_feat, &g.global_feat);
    let lg: Vec<f64> = el.iter().chain(&eg).copied().collect();
    let flg: Vec<f64> = ef.iter().chain(&el).chain(&eg).copied().collect();
    let fg: Vec<f64> = ef.iter().chain(&eg).copied().collect();
    let fl: Vec<f64> = ef.iter().chain(&el).copied().collect();

    let raw = params.thresholds.raw;
    let alpha_f = sigmoid(raw[0]);
    let beta_f = alpha_f * sigmoid(raw[1]);
    let alpha_1 = sigmoid(raw[2]);
    let beta_1 = alpha_1 * sigmoid(raw[3]);
    let alpha_2 = sigmoid(raw[4]);
    let beta_2 = alpha_2 * sigmoid(raw[5]);

    let c_f = if q.face_present() && g.face_present() {
        oracle_confidence(params, NetId::ConfidenceFace, ef.clone())
    } else {
        0.0
    };
    if c_f > alpha_f {
        return WeightVector::new(1.0, 0.0, 0.0);
    }
    if c_f >= beta_f {
        let c_1 = oracle_confidence(params, NetId::ConfidenceLg1, lg.clone());
        if c_1 > alpha_1 {
            let w = oracle_gate(params, NetId::GatingFg, fg);
            return WeightVector::new(w[0], 0.0, w[1]);
        }
        if c_1 < beta_1 {
            let w = oracle_gate(params, NetId::GatingFl, fl);
            return WeightVector::new(w[0], w[1], 0.0);
        }
        let w = oracle_gate(params, NetId::GatingAll, flg);
        return WeightVector::new(w[0], w[1], w[2]);
    }
    let c_2 = oracle_confidence(params, NetId::ConfidenceLg2, lg.clone());
    if c_2 > alpha_2 {
        return WeightVector::new(0.0, 0.0, 1.0);
    }
    if c_2 < beta_2 {
        return WeightVector::new(0.0, 1.0, 0.0);
    }
    let w = oracle_gate(params, NetId::GatingLg, lg);
    WeightVector::new(0.0, w[0], w[1])
}

/// 1-based position of item `i` in the ascending (distance, index) order.
fn oracle_position(distances: &[f64], i: usize) -> usize {
    1 + (0..distances.len())
        .filter(|&j| distances[j] < distances[i] || (distances[j] == distances[i] && j < i))
        .count()
}

/// Quadratic-time average precision; 0 when nothing is relevant.
pub fn oracle_map(distances: &[f64], relevance: &[bool]) -> f64 {
    let relevant: Vec<usize> = (0..distances.len()).filter(|&i| relevance[i]).collect();
    if relevant.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &relevant {
        let pos = oracle_position(distances, i);
        let above = relevant
            .iter()
            .filter(|&&j| oracle_position(distances, j) <= pos)
            .count();
        total += above as f64 / pos as f64;
    }
    total / relevant.len() as f64
}

/// 1-based position of the best-ranked relevant item.
pub fn oracle_first_hit(distances: &[f64], relevance: &[bool]) -> Option<usize> {
    (0..distances.len())
        .filter(|&i| relevance[i])
        .map(|i| oracle_position(distances, i))
        .min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_identities: 8,
            dims: StreamDims::uniform(4),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn map_examples() {
        assert!((oracle_map(&[0.1, 0.2, 0.3], &[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(oracle_map(&[0.1, 0.2, 0.3, 0.4], &[false, false, false, true]), 0.25);
        assert_eq!(oracle_map(&[0.3, 0.1, 0.2], &[true; 3]), 1.0);
        assert_eq!(oracle_first_hit(&[0.3, 0.1, 0.2], &[true, false, false]), Some(3));
    }

    #[test]
    fn splits_are_identity_disjoint() {
        let s = generate(&small()).unwrap();
        let train: Vec<u32> = s.train.records.iter().map(|r| r.person_id).collect();
        assert!(s.query.records.iter().all(|r| !train.contains(&r.person_id)));
        assert!(s.gallery.records.iter().all(|r| !train.contains(&r.person_id)));
        assert_eq!(s.train.len(), 4 * 3 * 4);
        assert_eq!(s.gallery.len(), 4 * 3);
        assert_eq!(s.query.len(), 4 * 3 * 3);
    }

    #[test]
    fn face_probability_boundaries() {
        let none = generate(&SynthConfig {
            face_absence_prob: 0.0,
            ..small()
        })
        .unwrap();
        assert!(none.train.records.iter().all(|r| r.face_present()));
        let all = generate(&SynthConfig {
            face_absence_prob: 1.0,
            ..small()
        })
        .unwrap();
        assert!(all.query.records.iter().all(|r| r.face.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn face_probability_touches_only_faces() {
        let a = generate(&SynthConfig {
            face_absence_prob: 0.2,
            ..small()
        })
        .unwrap();
        let b = generate(&SynthConfig {
            face_absence_prob: 0.7,
            ..small()
        })
        .unwrap();
        for (x, y) in a.train.records.iter().zip(&b.train.records) {
            assert_eq!(
                (&x.head_limb, &x.global_feat, &x.image_id),
                (&y.head_limb, &y.global_feat, &y.image_id)
            );
            if x.face_present() && y.face_present() {
                assert_eq!(x.face, y.face);
            }
        }
    }

    #[test]
    fn too_few_identities() {
        let cfg = SynthConfig {
            n_identities: 3,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}

//! Training objectives with analytic gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorReduction {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub reduction: AnchorReduction,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            reduction: AnchorReduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    /// `dL/dD` for the row-major `n × n` distance matrix.
    pub grad: Vec<f64>,
    /// Per-anchor `(hardest positive, hardest negative)` indices; `None` for
    /// anchors left without an admissible positive by a mask.
    pub hard_pairs: Vec<Option<(usize, usize)>>,
}

/// Batch-hard triplet loss over a square within-batch distance matrix.
///
/// Per anchor: hardest positive = farthest same-identity sample (the anchor
/// itself excluded), hardest negative = closest other-identity sample, ties
/// to the lowest index; hinge `max(d_ap − d_an + m, 0)`.
pub fn batch_hard_triplet(distances: &[f64], person_ids: &[u32], cfg: &TripletConfig) -> Result<TripletOutput> {
    batch_hard_triplet_masked(distances, person_ids, None, cfg)
}

/// [`batch_hard_triplet`] with an optional row-major `n × n` mask of
/// admissible positives. Anchors with no admissible positive are skipped and
/// the mean runs over the remaining anchors.
pub fn batch_hard_triplet_masked(
    distances: &[f64],
    person_ids: &[u32],
    positive_mask: Option<&[bool]>,
    cfg: &TripletConfig,
) -> Result<TripletOutput> {
    let n = person_ids.len();
    if distances.len() != n * n || positive_mask.is_some_and(|m| m.len() != n * n) {
        return Err(Error::Dimension(format!(
            "{} distances for a batch of {n}",
            distances.len()
        )));
    }
    if cfg.margin < 0.0 {
        return Err(Error::Config(format!(
            "margin must be non-negative, got {}",
            cfg.margin
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in person_ids {
        *counts.entry(p).or_default() += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Sampling(format!(
            "identity {id} has a single sample in the batch"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Sampling("batch holds a single identity, no negatives".into()));
    }

    let d = |i: usize, j: usize| distances[i * n + j];
    let admissible = |i: usize, j: usize| positive_mask.is_none_or(|m| m[i * n + j]);
    let mut hinges = Vec::with_capacity(n);
    let mut hard_pairs = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if person_ids[j] == person_ids[a] {
                if admissible(a, j) && pos.is_none_or(|p| d(a, j) > d(a, p)) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|k| d(a, j) < d(a, k)) {
                neg = Some(j);
            }
        }
        let pair = pos.map(|p| (p, neg.expect("checked above")));
        hard_pairs.push(pair);
        hinges.push(pair.map(|(p, k)| d(a, p) - d(a, k) + cfg.margin));
    }

    let mut grad = vec![0.0; n * n];
    let active = hinges.iter().flatten().count();
    if active == 0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad,
            hard_pairs,
        });
    }
    let loss = match cfg.reduction {
        AnchorReduction::Mean => {
            let scale = 1.0 / active as f64;
            for (a, h) in hinges.iter().enumerate() {
                if let (Some(h), Some((p, k))) = (h, hard_pairs[a]) {
                    if *h > 0.0 {
                        grad[a * n + p] += scale;
                        grad[a * n + k] -= scale;
                    }
                }
            }
            hinges.iter().flatten().map(|h| h.max(0.0)).sum::<f64>() * scale
        }
        AnchorReduction::Max => {
            let mut best: Option<(usize, f64)> = None;
            for (a, h) in hinges.iter().enumerate() {
                if let Some(h) = *h {
                    if best.is_none_or(|(_, b)| h > b) {
                        best = Some((a, h));
                    }
                }
            }
            let (a, h) = best.expect("at least one active anchor");
            if h > 0.0 {
                let (p, k) = hard_pairs[a].expect("active anchor");
                grad[a * n + p] += 1.0;
                grad[a * n + k] -= 1.0;
            }
            h.max(0.0)
        }
    };
    Ok(TripletOutput { loss, grad, hard_pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalConfig {
    pub temperature: f64,
}

impl Default for CalConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0 / 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalOutput {
    pub loss: f64,
    pub grad_features: Vec<Vec<f64>>,
    pub grad_centroids: Vec<Vec<f64>>,
    /// Samples whose identity owns no other clothes class.
    pub skipped: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Clothes-based adversarial loss.
///
/// `class_owner[c]` is the identity wearing clothes class `c`. For sample `i`
/// the positive classes are the other outfits of its identity and the
/// negatives all outfits of other identities. Each positive class is scored
/// against the full negative set with weight `1/K`; the result is averaged
/// over samples that have at least one positive class.
pub fn cal_loss(
    features: &[Vec<f64>],
    clothes_classes: &[usize],
    person_ids: &[u32],
    centroids: &[Vec<f64>],
    class_owner: &[u32],
    cfg: &CalConfig,
) -> Result<CalOutput> {
    let n = features.len();
    if clothes_classes.len() != n || person_ids.len() != n {
        return Err(Error::Dimension("features and labels differ in length".into()));
    }
    if centroids.len() != class_owner.len() {
        return Err(Error::Dimension(format!(
            "{} centroids for {} clothes classes",
            centroids.len(),
            class_owner.len()
        )));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let dim = centroids.first().map(Vec::len).unwrap_or(0);
    if centroids.iter().any(|c| c.len() != dim) || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("feature and centroid widths differ".into()));
    }
    if let Some(&c) = clothes_classes.iter().find(|&&c| c >= centroids.len()) {
        return Err(Error::Index(format!("clothes class {c} has no centroid")));
    }

    let tau = cfg.temperature;
    let mut grad_features = vec![vec![0.0; dim]; n];
    let mut grad_centroids = vec![vec![0.0; dim]; centroids.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;

    let mut per_sample: Vec<(usize, Vec<f64>)> = Vec::new();
    for i in 0..n {
        let pid = person_ids[i];
        let positives: Vec<usize> = (0..centroids.len())
            .filter(|&c| class_owner[c] == pid && c != clothes_classes[i])
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let negatives: Vec<usize> = (0..centroids.len()).filter(|&c| class_owner[c] != pid).collect();
        let logits: Vec<f64> = centroids.iter().map(|c| dot(&features[i], c) / tau).collect();
        let k = positives.len() as f64;
        let neg_lse = log_sum_exp(negatives.iter().map(|&j| logits[j]));

        let mut d_logits = vec![0.0; centroids.len()];
        let mut loss_i = 0.0;
        for &c in &positives {
            let z = if negatives.is_empty() {
                logits[c]
            } else {
                let m = logits[c].max(neg_lse);
                m + ((logits[c] - m).exp() + (neg_lse - m).exp()).ln()
            };
            loss_i += (z - logits[c]) / k;
            d_logits[c] += ((logits[c] - z).exp() - 1.0) / k;
            for &j in &negatives {
                d_logits[j] += (logits[j] - z).exp() / k;
            }
        }
        total += loss_i;
        used += 1;
        per_sample.push((i, d_logits));
    }

    if used > 0 {
        let scale = 1.0 / used as f64;
        for (i, d_logits) in per_sample {
            for (c, &dl) in d_logits.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let w = dl * scale / tau;
                for t in 0..dim {
                    grad_features[i][t] += w * centroids[c][t];
                    grad_centroids[c][t] += w * features[i][t];
                }
            }
        }
        total *= scale;
    }
    Ok(CalOutput {
        loss: total,
        grad_features,
        grad_centroids,
        skipped,
    })
}

/// Cross entropy against the `ε`-smoothed one-hot target; returns the loss
/// and its gradient with respect to the logits.
pub fn label_smoothed_ce(logits: &[f64], target: usize, smoothing: f64) -> Result<(f64, Vec<f64>)> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::Config(format!("need at least two classes, got {c}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("smoothing must lie in [0, 1), got {smoothing}")));
    }
    if target >= c {
        return Err(Error::Index(format!("target {target} out of range for {c} classes")));
    }
    let lse = log_sum_exp(logits.iter().copied());
    let off = smoothing / c as f64;
    let q = |k: usize| if k == target { 1.0 - smoothing + off } else { off };
    let loss = (0..c).map(|k| q(k) * (lse - logits[k])).sum();
    let probs = softmax(logits);
    let grad = probs.iter().enumerate().map(|(k, p)| p - q(k)).collect();
    Ok((loss, grad))
}

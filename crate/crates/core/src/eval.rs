//! Retrieval metrics: CMC, Rank-k and mAP under clothing-aware protocols.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{stream_distance_matrix, weighted_matrix, DistanceMatrix};
use crate::dwt::{fused_matrix, DwtParams, FusionMode};
use crate::embedding::{EmbeddingRecord, EmbeddingSet, Stream};
use crate::error::{Error, Result};

/// Length of the CMC curve stored in reports.
pub const CMC_LENGTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClothesMode {
    #[default]
    Standard,
    SameClothes,
    ClothChanging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub mode: ClothesMode,
    pub cross_camera_only: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: ClothesMode::Standard,
            cross_camera_only: true,
        }
    }
}

impl EvalProtocol {
    pub fn new(mode: ClothesMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Whether gallery item `g` takes part in ranking for query `q`.
    pub fn keeps(&self, q: &EmbeddingRecord, g: &EmbeddingRecord) -> bool {
        let same_person = q.person_id == g.person_id;
        if self.cross_camera_only && same_person && q.camera_id == g.camera_id {
            return false;
        }
        match self.mode {
            ClothesMode::Standard => true,
            ClothesMode::ClothChanging => g.clothes_id != q.clothes_id,
            ClothesMode::SameClothes => !same_person || g.clothes_id == q.clothes_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub num_queries: usize,
    pub valid_queries: usize,
    /// Queries without any relevant gallery item after masking.
    pub excluded_queries: usize,
    pub rank_1: f64,
    pub rank_5: f64,
    pub rank_10: f64,
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// AP per query in query order; `None` for excluded queries.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query_ap: Option<Vec<Option<f64>>>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k if k <= self.cmc.len() => self.cmc[k - 1],
            _ => *self.cmc.last().unwrap_or(&0.0),
        }
    }

    pub fn without_per_query(mut self) -> Self {
        self.per_query_ap = None;
        self
    }
}

/// Ascending by distance, ties broken by position.
pub(crate) fn ranking(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// AP and 0-based rank of the first hit for one query, or `None` when no
/// item is relevant.
fn score_query(distances: &[f64], relevant: &[bool]) -> Option<(f64, usize)> {
    let order = ranking(distances);
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (pos, &j) in order.iter().enumerate() {
        if relevant[j] {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    first.map(|f| (precision_sum / hits as f64, f))
}

pub fn evaluate(
    matrix: &DistanceMatrix,
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    if matrix.shape() != (query.len(), gallery.len()) {
        return Err(Error::Dimension(format!(
            "matrix shape {:?} does not match {} queries × {} gallery",
            matrix.shape(),
            query.len(),
            gallery.len()
        )));
    }
    let scored: Vec<Option<(f64, usize)>> = query
        .records
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let row = matrix.row(i);
            let (dist, rel): (Vec<f64>, Vec<bool>) = gallery
                .records
                .iter()
                .zip(row)
                .filter(|(g, _)| protocol.keeps(q, g))
                .map(|(g, &d)| (d, g.person_id == q.person_id))
                .unzip();
            score_query(&dist, &rel)
        })
        .collect();

    let valid: Vec<(f64, usize)> = scored.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Eval(format!(
            "none of the {} queries has a relevant gallery item under {:?}",
            query.len(),
            protocol
        )));
    }
    let n = valid.len() as f64;
    let mut cmc = vec![0.0; CMC_LENGTH];
    for &(_, first) in &valid {
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let within = |k: usize| valid.iter().filter(|(_, f)| *f < k).count() as f64 / n;
    Ok(EvalReport {
        protocol,
        num_queries: query.len(),
        valid_queries: valid.len(),
        excluded_queries: query.len() - valid.len(),
        rank_1: within(1),
        rank_5: within(5),
        rank_10: within(10),
        cmc,
        map: valid.iter().map(|(ap, _)| ap).sum::<f64>() / n,
        seed: None,
        per_query_ap: Some(scored.iter().map(|s| s.map(|(ap, _)| ap)).collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

/// Fixed equal-weight configurations followed by the learned decision module:
/// three single streams, three pairs, all three, then DWT (hard mode).
pub const ABLATION_ROWS: [(&str, [f64; 3]); 7] = [
    ("face", [1.0, 0.0, 0.0]),
    ("head_limb", [0.0, 1.0, 0.0]),
    ("global", [0.0, 0.0, 1.0]),
    ("face+head_limb", [0.5, 0.5, 0.0]),
    ("face+global", [0.5, 0.0, 0.5]),
    ("head_limb+global", [0.0, 0.5, 0.5]),
    ("face+head_limb+global", [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
];

pub const DWT_ROW: &str = "face+head_limb+global+dwt";

pub fn ablation_sweep(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    params: &DwtParams,
    protocol: EvalProtocol,
) -> Result<Vec<AblationRow>> {
    let per_stream = Stream::ALL.map(|s| stream_distance_matrix(query, gallery, s));
    let [f, l, g] = per_stream;
    let (f, l, g) = (f?, l?, g?);
    let mut rows = Vec::with_capacity(8);
    for (name, weights) in ABLATION_ROWS {
        let m = weighted_matrix([&f, &l, &g], weights)?;
        rows.push(AblationRow {
            name: name.to_owned(),
            report: evaluate(&m, query, gallery, protocol)?,
        });
    }
    let fused = fused_matrix(params, query, gallery, FusionMode::Hard)?;
    rows.push(AblationRow {
        name: DWT_ROW.to_owned(),
        report: evaluate(&fused, query, gallery, protocol)?,
    });
    Ok(rows)
}

/// Picks one record per identity, optionally restricted to one camera.
pub fn single_shot_gallery(set: &EmbeddingSet, camera: Option<u16>, seed: u64) -> Result<EmbeddingSet> {
    let mut by_person: BTreeMap<u32, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in &set.records {
        if camera.is_none_or(|c| r.camera_id == c) {
            by_person.entry(r.person_id).or_default().push(r);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = by_person
        .values()
        .map(|rs| (*rs.choose(&mut rng).expect("non-empty group")).clone())
        .collect();
    EmbeddingSet::new(records, set.dims, set.role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::StreamTag;
    use crate::embedding::{SetRole, StreamDims};

    fn rec(id: &str, person: u32, camera: u16, clothes: u32) -> EmbeddingRecord {
        EmbeddingRecord::new(id, person, camera, clothes, vec![1.0], vec![1.0], vec![1.0])
    }

    fn set(records: Vec<EmbeddingRecord>, role: SetRole) -> EmbeddingSet {
        EmbeddingSet::new(records, StreamDims::uniform(1), role).unwrap()
    }

    #[test]
    fn worked_example_ap() {
        let q = set(vec![rec("q", 1, 0, 10)], SetRole::Query);
        let g = set(
            vec![rec("a", 1, 1, 10), rec("b", 2, 1, 20), rec("c", 1, 1, 11)],
            SetRole::Gallery,
        );
        let m = DistanceMatrix::from_vec(1, 3, vec![0.1, 0.2, 0.3], StreamTag::Fused).unwrap();
        let r = evaluate(&m, &q, &g, EvalProtocol::default()).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(r.rank_1, 1.0);
    }

    #[test]
    fn perfect_single_relevant() {
        let q = set(vec![rec("q", 1, 0, 10)], SetRole::Query);
        let g = set(vec![rec("a", 2, 1, 20), rec("b", 1, 1, 10)], SetRole::Gallery);
        let m = DistanceMatrix::from_vec(1, 2, vec![0.5, 0.1], StreamTag::Fused).unwrap();
        let r = evaluate(&m, &q, &g, EvalProtocol::default()).unwrap();
        assert_eq!((r.map, r.rank_1), (1.0, 1.0));
    }

    #[test]
    fn cloth_changing_excludes_queries_without_other_outfits() {
        let q = set(vec![rec("q1", 1, 0, 10), rec("q2", 2, 0, 20)], SetRole::Query);
        let g = set(
            vec![rec("a", 1, 1, 10), rec("b", 2, 1, 21), rec("c", 2, 1, 20)],
            SetRole::Gallery,
        );
        let m = DistanceMatrix::from_vec(2, 3, vec![0.1, 0.5, 0.6, 0.4, 0.2, 0.1], StreamTag::Fused).unwrap();
        let r = evaluate(&m, &q, &g, EvalProtocol::new(ClothesMode::ClothChanging)).unwrap();
        assert_eq!(r.valid_queries, 1);
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.per_query_ap.as_ref().unwrap()[0], None);
        // q2 ranks b (its other outfit) first once c is masked
        assert_eq!(r.rank_1, 1.0);

        let same = evaluate(&m, &q, &g, EvalProtocol::new(ClothesMode::SameClothes)).unwrap();
        assert_eq!(same.valid_queries, 2);
    }

    #[test]
    fn same_camera_same_id_is_junk() {
        let q = set(vec![rec("q", 1, 0, 10)], SetRole::Query);
        let g = set(vec![rec("a", 1, 0, 10), rec("b", 1, 1, 10)], SetRole::Gallery);
        let m = DistanceMatrix::from_vec(1, 2, vec![0.0, 0.1], StreamTag::Fused).unwrap();
        let r = evaluate(&m, &q, &g, EvalProtocol::default()).unwrap();
        assert_eq!(r.map, 1.0);
        let all = EvalProtocol {
            cross_camera_only: false,
            ..EvalProtocol::default()
        };
        assert_eq!(evaluate(&m, &q, &g, all).unwrap().map, 1.0);
        let q2 = set(vec![rec("q", 1, 0, 10)], SetRole::Query);
        let g2 = set(vec![rec("a", 1, 0, 10)], SetRole::Gallery);
        let m2 = DistanceMatrix::from_vec(1, 1, vec![0.0], StreamTag::Fused).unwrap();
        assert!(matches!(
            evaluate(&m2, &q2, &g2, EvalProtocol::default()),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn shape_mismatch() {
        let q = set(vec![rec("q", 1, 0, 10)], SetRole::Query);
        let m = DistanceMatrix::from_vec(1, 2, vec![0.0, 0.1], StreamTag::Fused).unwrap();
        assert!(matches!(
            evaluate(&m, &q, &q, EvalProtocol::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ties_broken_by_gallery_index() {
        assert_eq!(ranking(&[0.5, 0.2, 0.5, 0.2]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn single_shot_is_seeded() {
        let s = set(
            (0..12)
                .map(|i| rec(&format!("r{i}"), i % 3, (i % 2) as u16, i))
                .collect(),
            SetRole::Gallery,
        );
        let a = single_shot_gallery(&s, Some(0), 5).unwrap();
        let b = single_shot_gallery(&s, Some(0), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.records.iter().all(|r| r.camera_id == 0));
    }
}

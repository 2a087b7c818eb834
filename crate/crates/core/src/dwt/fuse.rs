use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decide::{decide_hard_view, Branch, WeightVector};
use super::params::DwtParams;
use super::soft::soft_pair_forward;
use crate::distance::{check_same_dims, cosine_distance_unchecked, DistanceMatrix, StreamTag};
use crate::embedding::{EmbeddingSet, Stream, StreamView};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Hard,
    Soft,
}

/// `Σ_k w_k d_k`, clamped into `[0, 2]` against rounding.
pub fn fuse_distance(weights: WeightVector, d_face: f64, d_head_limb: f64, d_global: f64) -> f64 {
    (weights.face * d_face + weights.head_limb * d_head_limb + weights.global * d_global).clamp(0.0, 2.0)
}

fn stream_distances(q: &StreamView<'_>, g: &StreamView<'_>) -> [f64; 3] {
    Stream::ALL.map(|s| cosine_distance_unchecked(q.stream(s), g.stream(s)))
}

/// Fused distance of one pair under the chosen mode, with the hard branch
/// when in hard mode.
pub(crate) fn fused_pair(
    params: &DwtParams,
    q: &StreamView<'_>,
    g: &StreamView<'_>,
    mode: FusionMode,
) -> Result<(f64, Option<Branch>)> {
    match mode {
        FusionMode::Hard => {
            let (w, branch) = decide_hard_view(params, q, g)?;
            let [df, dl, dg] = stream_distances(q, g);
            Ok((fuse_distance(w, df, dl, dg), Some(branch)))
        }
        FusionMode::Soft => {
            let trace = soft_pair_forward(params, q, g)?;
            let [df, dl, dg] = trace.distances();
            Ok((fuse_distance(trace.weights(), df, dl, dg), None))
        }
    }
}

/// Query × gallery matrix of fused distances.
pub fn fused_matrix(
    params: &DwtParams,
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: FusionMode,
) -> Result<DistanceMatrix> {
    check_same_dims(query, gallery)?;
    params.check_dims(&query.dims)?;
    if mode == FusionMode::Soft {
        params.check_temperature()?;
    }
    let rows: Vec<Vec<f64>> = query
        .records
        .par_iter()
        .map(|q| {
            let qv = q.view();
            gallery
                .records
                .iter()
                .map(|g| fused_pair(params, &qv, &g.view(), mode).map(|(d, _)| d))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    DistanceMatrix::from_vec(
        query.len(),
        gallery.len(),
        rows.into_iter().flatten().collect(),
        StreamTag::Fused,
    )
}

/// Hard-mode branch taken by every (query, gallery) pair, row-major.
pub fn branch_map(params: &DwtParams, query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<Branch>> {
    check_same_dims(query, gallery)?;
    params.check_dims(&query.dims)?;
    let rows: Vec<Vec<Branch>> = query
        .records
        .par_iter()
        .map(|q| {
            gallery
                .records
                .iter()
                .map(|g| decide_hard_view(params, &q.view(), &g.view()).map(|(_, b)| b))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

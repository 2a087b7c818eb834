//! Dynamic weighted three-way decision over face, head-limb and global
//! streams.
//!
//! A facial confidence network decides first: accept the face alone, defer
//! to a second layer that mixes the face with the body streams, or reject
//! the face and let a third layer choose among the body streams. Three
//! confidence networks and four gating networks drive the decisions; the
//! resulting weights fuse per-stream cosine distances into one distance.
//!
//! Inference uses exact branching ([`decide_hard`]); training uses the
//! tempered relaxation in [`soft`], which is differentiable in every network
//! parameter and every threshold.

mod decide;
mod fuse;
mod params;
pub mod soft;

pub use decide::{decide_hard, face_confidence, lg_confidence, Branch, WeightVector};
pub use fuse::{branch_map, fuse_distance, fused_matrix, FusionMode};
pub use params::{
    pair_encoding, DecisionLayer, DwtConfig, DwtGrads, DwtParams, NetId, PairNet, RandomProjection, Thresholds,
};
pub use soft::{decide_soft, soft_pair_forward, PairInputGrads, SoftPairTrace};

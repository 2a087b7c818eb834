use serde::{Deserialize, Serialize};

use super::params::{net_input, pair_encoding, DecisionLayer, DwtParams, NetId};
use crate::embedding::{EmbeddingRecord, Stream, StreamView};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax};

/// Fusion weights `[w_face, w_head_limb, w_global]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub face: f64,
    pub head_limb: f64,
    pub global: f64,
}

impl WeightVector {
    pub const FACE_ONLY: WeightVector = WeightVector::new(1.0, 0.0, 0.0);
    pub const LIMB_ONLY: WeightVector = WeightVector::new(0.0, 1.0, 0.0);
    pub const GLOBAL_ONLY: WeightVector = WeightVector::new(0.0, 0.0, 1.0);

    pub const fn new(face: f64, head_limb: f64, global: f64) -> Self {
        Self {
            face,
            head_limb,
            global,
        }
    }

    pub fn from_array(w: [f64; 3]) -> Self {
        Self::new(w[0], w[1], w[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.face, self.head_limb, self.global]
    }

    pub fn get(&self, stream: Stream) -> f64 {
        self.to_array()[stream.index()]
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        let w = self.to_array();
        w.iter().all(|&x| (0.0..=1.0).contains(&x)) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Leaf of the three-layer decision tree. Order matches the leaf index used
/// by the soft relaxation and by branch-occupancy logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    FaceOnly,
    FaceGlobal,
    FaceLimb,
    AllFusion,
    GlobalOnly,
    LimbOnly,
    LimbGlobal,
}

impl Branch {
    pub const ALL: [Branch; 7] = [
        Branch::FaceOnly,
        Branch::FaceGlobal,
        Branch::FaceLimb,
        Branch::AllFusion,
        Branch::GlobalOnly,
        Branch::LimbOnly,
        Branch::LimbGlobal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Branch::FaceOnly => "face-only",
            Branch::FaceGlobal => "face-global",
            Branch::FaceLimb => "face-limb",
            Branch::AllFusion => "all-fusion",
            Branch::GlobalOnly => "global-only",
            Branch::LimbOnly => "limb-only",
            Branch::LimbGlobal => "limb-global",
        }
    }

    /// Gating network that produces this leaf's weights, if any.
    pub fn gate(self) -> Option<NetId> {
        match self {
            Branch::FaceGlobal => Some(NetId::GatingFg),
            Branch::FaceLimb => Some(NetId::GatingFl),
            Branch::AllFusion => Some(NetId::GatingAll),
            Branch::LimbGlobal => Some(NetId::GatingLg),
            _ => None,
        }
    }

    /// Streams allowed a non-zero weight on this leaf.
    pub fn support(self) -> &'static [Stream] {
        match self {
            Branch::FaceOnly => &[Stream::Face],
            Branch::GlobalOnly => &[Stream::Global],
            Branch::LimbOnly => &[Stream::HeadLimb],
            b => b.gate().map(|g| g.streams()).unwrap_or(&[]),
        }
    }

    /// Whether `w` respects this leaf's zero pattern.
    pub fn admits(self, w: &WeightVector) -> bool {
        Stream::ALL
            .iter()
            .all(|s| self.support().contains(s) || w.get(*s) == 0.0)
    }
}

/// Three-way outcome of one decision layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Verdict {
    Accept,
    Defer,
    Reject,
}

/// Strict comparisons: equality with either threshold defers.
pub(crate) fn three_way(c: f64, alpha: f64, beta: f64) -> Verdict {
    if c > alpha {
        Verdict::Accept
    } else if c < beta {
        Verdict::Reject
    } else {
        Verdict::Defer
    }
}

pub(crate) fn stream_encodings(q: &StreamView<'_>, g: &StreamView<'_>) -> [Vec<f64>; 3] {
    [
        pair_encoding(q.face, g.face),
        pair_encoding(q.head_limb, g.head_limb),
        pair_encoding(q.global, g.global),
    ]
}

/// Softmax over a gating network's outputs, scattered onto its streams.
pub(crate) fn gate_weights(params: &DwtParams, id: NetId, encodings: &[Vec<f64>; 3]) -> Result<WeightVector> {
    let probs = softmax(&params.net(id).predict(&net_input(id, encodings))?);
    let mut w = [0.0; 3];
    for (p, s) in probs.iter().zip(id.streams()) {
        w[s.index()] = *p;
    }
    Ok(WeightVector::from_array(w))
}

fn confidence(params: &DwtParams, id: NetId, encodings: &[Vec<f64>; 3]) -> Result<f64> {
    let out = params.net(id).predict(&net_input(id, encodings))?;
    Ok(sigmoid(out[0]))
}

fn check_pair(params: &DwtParams, q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<()> {
    params.check_dims(&q.dims())?;
    params.check_dims(&g.dims())
}

fn face_confidence_view(
    params: &DwtParams,
    q: &StreamView<'_>,
    g: &StreamView<'_>,
    enc: &[Vec<f64>; 3],
) -> Result<f64> {
    if !q.face_present || !g.face_present {
        return Ok(0.0);
    }
    confidence(params, NetId::ConfidenceFace, enc)
}

/// Facial confidence; exactly 0 when either face is absent.
pub fn face_confidence(params: &DwtParams, q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<f64> {
    check_pair(params, q, g)?;
    let (qv, gv) = (q.view(), g.view());
    face_confidence_view(params, &qv, &gv, &stream_encodings(&qv, &gv))
}

/// Head-limb/global confidence of the second or third decision layer.
pub fn lg_confidence(
    params: &DwtParams,
    layer: DecisionLayer,
    q: &EmbeddingRecord,
    g: &EmbeddingRecord,
) -> Result<f64> {
    check_pair(params, q, g)?;
    let id = match layer {
        DecisionLayer::Second => NetId::ConfidenceLg1,
        DecisionLayer::Third => NetId::ConfidenceLg2,
        DecisionLayer::Face => {
            return Err(Error::Config(
                "head-limb/global confidence exists only for layers two and three".into(),
            ))
        }
    };
    let enc = [
        Vec::new(),
        pair_encoding(&q.head_limb, &g.head_limb),
        pair_encoding(&q.global_feat, &g.global_feat),
    ];
    confidence(params, id, &enc)
}

pub(crate) fn decide_hard_view(
    params: &DwtParams,
    q: &StreamView<'_>,
    g: &StreamView<'_>,
) -> Result<(WeightVector, Branch)> {
    let enc = stream_encodings(q, g);
    let t = &params.thresholds;
    let c_face = face_confidence_view(params, q, g, &enc)?;
    match three_way(c_face, t.alpha(DecisionLayer::Face), t.beta(DecisionLayer::Face)) {
        Verdict::Accept => Ok((WeightVector::FACE_ONLY, Branch::FaceOnly)),
        Verdict::Defer => {
            let c = confidence(params, NetId::ConfidenceLg1, &enc)?;
            let branch = match three_way(c, t.alpha(DecisionLayer::Second), t.beta(DecisionLayer::Second)) {
                Verdict::Accept => Branch::FaceGlobal,
                Verdict::Reject => Branch::FaceLimb,
                Verdict::Defer => Branch::AllFusion,
            };
            let gate = branch.gate().expect("second-layer leaves are gated");
            Ok((gate_weights(params, gate, &enc)?, branch))
        }
        Verdict::Reject => {
            let c = confidence(params, NetId::ConfidenceLg2, &enc)?;
            match three_way(c, t.alpha(DecisionLayer::Third), t.beta(DecisionLayer::Third)) {
                Verdict::Accept => Ok((WeightVector::GLOBAL_ONLY, Branch::GlobalOnly)),
                Verdict::Reject => Ok((WeightVector::LIMB_ONLY, Branch::LimbOnly)),
                Verdict::Defer => Ok((gate_weights(params, NetId::GatingLg, &enc)?, Branch::LimbGlobal)),
            }
        }
    }
}

/// Exact sequential three-way decision: face layer first, then the
/// face-available (second) or face-unavailable (third) layer.
pub fn decide_hard(params: &DwtParams, q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<(WeightVector, Branch)> {
    check_pair(params, q, g)?;
    decide_hard_view(params, &q.view(), &g.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwt::params::DwtConfig;
    use crate::embedding::StreamDims;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn record(id: &str, face: bool, seed: f64) -> EmbeddingRecord {
        let v = |k: f64| vec![(seed * k).sin(), (seed * k + 1.0).cos(), 0.3 * k, -0.2];
        EmbeddingRecord::new(id, 1, 0, 1, if face { v(1.0) } else { vec![0.0; 4] }, v(2.0), v(3.0))
    }

    fn params() -> DwtParams {
        DwtParams::init(StreamDims::uniform(4), &DwtConfig::default(), 11).unwrap()
    }

    #[test]
    fn absent_face_has_zero_confidence() {
        let p = params();
        assert_eq!(
            face_confidence(&p, &record("a", false, 1.0), &record("b", true, 2.0)).unwrap(),
            0.0
        );
        assert_eq!(
            face_confidence(&p, &record("a", true, 1.0), &record("b", false, 2.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn zero_logit_gives_half() {
        let mut p = params();
        p.confidence_f.set_constant_output(0.0);
        p.confidence_lg1.set_constant_output(0.0);
        let (q, g) = (record("a", true, 1.0), record("b", true, 2.0));
        assert_eq!(face_confidence(&p, &q, &g).unwrap(), 0.5);
        assert_eq!(lg_confidence(&p, DecisionLayer::Second, &q, &g).unwrap(), 0.5);
    }

    #[test]
    fn confident_face_selects_face_only() {
        let mut p = params();
        p.confidence_f.set_constant_output(logit(0.99));
        let (w, b) = decide_hard(&p, &record("a", true, 1.0), &record("b", true, 2.0)).unwrap();
        assert_eq!(w, WeightVector::FACE_ONLY);
        assert_eq!(b, Branch::FaceOnly);
        assert_eq!(b.label(), "face-only");
    }

    #[test]
    fn absent_face_confident_body_selects_global_only() {
        let mut p = params();
        p.confidence_lg2.set_constant_output(logit(0.99));
        let (w, b) = decide_hard(&p, &record("a", false, 1.0), &record("b", true, 2.0)).unwrap();
        assert_eq!((w, b), (WeightVector::GLOBAL_ONLY, Branch::GlobalOnly));
        p.confidence_lg2.set_constant_output(logit(0.01));
        let (w, b) = decide_hard(&p, &record("a", false, 1.0), &record("b", true, 2.0)).unwrap();
        assert_eq!((w, b), (WeightVector::LIMB_ONLY, Branch::LimbOnly));
    }

    #[test]
    fn middle_band_with_uniform_gates_is_equal_fusion() {
        let mut p = params();
        p.confidence_f.set_constant_output(0.0);
        p.confidence_lg1.set_constant_output(0.0);
        p.gating_all.set_constant_output(0.25);
        let (w, b) = decide_hard(&p, &record("a", true, 1.0), &record("b", true, 2.0)).unwrap();
        assert_eq!(b, Branch::AllFusion);
        for x in w.to_array() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_equality_defers() {
        let mut p = params();
        p.thresholds.set(DecisionLayer::Face, 0.5 + 1e-12, 0.5 - 1e-12).unwrap();
        p.confidence_f.set_constant_output(0.0);
        let (_, b) = decide_hard(&p, &record("a", true, 1.0), &record("b", true, 2.0)).unwrap();
        assert!(matches!(b, Branch::FaceGlobal | Branch::FaceLimb | Branch::AllFusion));
        assert_eq!(three_way(0.7, 0.7, 0.3), Verdict::Defer);
        assert_eq!(three_way(0.3, 0.7, 0.3), Verdict::Defer);
    }

    #[test]
    fn branch_patterns() {
        assert!(Branch::FaceGlobal.admits(&WeightVector::new(0.4, 0.0, 0.6)));
        assert!(!Branch::FaceGlobal.admits(&WeightVector::new(0.4, 0.1, 0.5)));
        assert!(Branch::LimbGlobal.admits(&WeightVector::new(0.0, 0.5, 0.5)));
        assert!(!Branch::LimbGlobal.admits(&WeightVector::new(0.1, 0.4, 0.5)));
    }

    #[test]
    fn dims_mismatch_is_error() {
        let p = DwtParams::init(StreamDims::uniform(3), &DwtConfig::default(), 1).unwrap();
        assert!(matches!(
            decide_hard(&p, &record("a", true, 1.0), &record("b", true, 2.0)),
            Err(Error::Dimension(_))
        ));
    }
}

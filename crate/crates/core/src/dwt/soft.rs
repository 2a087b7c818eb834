//! Differentiable relaxation of the three-way decision tree.
//!
//! Each layer's accept / defer / reject indicators become
//! `σ((C − α)/T)`, `1 − accept − reject` and `σ((β − C)/T)`. The fused weight
//! vector is the probability-weighted mixture of the seven leaf weight
//! vectors, and every quantity carries a hand-written backward pass.

use super::decide::{stream_encodings, Branch, WeightVector};
use super::params::{net_input, pair_encoding_backward, DecisionLayer, DwtGrads, DwtParams, NetId, Thresholds};
use crate::distance::cosine_distance_grad;
use crate::embedding::{EmbeddingRecord, Stream, StreamView};
use crate::error::Result;
use crate::nn::{sigmoid, softmax, softmax_backward, Tape};

/// Soft outcome of one decision layer, ordered `[accept, defer, reject]`.
#[derive(Debug, Clone, Copy)]
struct LayerSoft {
    confidence: f64,
    accept_raw: f64,
    reject_raw: f64,
    defer_clamped: bool,
    total: f64,
    probs: [f64; 3],
}

impl LayerSoft {
    fn new(confidence: f64, alpha: f64, beta: f64, temperature: f64) -> Self {
        let accept_raw = sigmoid((confidence - alpha) / temperature);
        let reject_raw = sigmoid((beta - confidence) / temperature);
        let defer_unclamped = 1.0 - accept_raw - reject_raw;
        let defer_clamped = defer_unclamped < 0.0;
        let defer_raw = defer_unclamped.max(0.0);
        let total = accept_raw + defer_raw + reject_raw;
        Self {
            confidence,
            accept_raw,
            reject_raw,
            defer_clamped,
            total,
            probs: [accept_raw / total, defer_raw / total, reject_raw / total],
        }
    }

    /// Returns `(dL/dC, dL/dalpha, dL/dbeta)` from `dL/dprobs`.
    fn backward(&self, grad: [f64; 3], temperature: f64) -> (f64, f64, f64) {
        let dot: f64 = grad.iter().zip(&self.probs).map(|(g, p)| g * p).sum();
        let d_raw: Vec<f64> = grad.iter().map(|g| (g - dot) / self.total).collect();
        let (mut d_accept, d_defer, mut d_reject) = (d_raw[0], d_raw[1], d_raw[2]);
        if !self.defer_clamped {
            d_accept -= d_defer;
            d_reject -= d_defer;
        }
        let sa = self.accept_raw * (1.0 - self.accept_raw) / temperature;
        let sr = self.reject_raw * (1.0 - self.reject_raw) / temperature;
        let d_conf = d_accept * sa - d_reject * sr;
        (d_conf, -d_accept * sa, d_reject * sr)
    }
}

#[derive(Debug, Clone)]
struct ConfidenceTrace {
    value: f64,
    tape: Option<Tape>,
}

#[derive(Debug, Clone)]
struct GateTrace {
    probs: Vec<f64>,
    tape: Tape,
}

/// Forward record of one soft pair decision, sufficient for the backward pass.
#[derive(Debug, Clone)]
pub struct SoftPairTrace {
    encodings: [Vec<f64>; 3],
    confidences: [ConfidenceTrace; 3],
    gates: [GateTrace; 4],
    layers: [LayerSoft; 3],
    leaf_probs: [f64; 7],
    leaf_weights: [[f64; 3]; 7],
    weights: [f64; 3],
    distances: [f64; 3],
    distance_grads: [(Vec<f64>, Vec<f64>); 3],
    fused: f64,
}

/// Gradients with respect to the six input vectors of a pair,
/// indexed by [`Stream::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputGrads {
    pub query: [Vec<f64>; 3],
    pub gallery: [Vec<f64>; 3],
}

const GATES: [NetId; 4] = [NetId::GatingFg, NetId::GatingFl, NetId::GatingAll, NetId::GatingLg];

fn gate_slot(branch: Branch) -> Option<usize> {
    branch.gate().map(|id| GATES.iter().position(|&g| g == id).unwrap())
}

impl SoftPairTrace {
    pub fn weights(&self) -> WeightVector {
        WeightVector::from_array(self.weights)
    }

    pub fn fused(&self) -> f64 {
        self.fused
    }

    pub fn distances(&self) -> [f64; 3] {
        self.distances
    }

    /// `[C_f, C_lg1, C_lg2]` as seen by the three layers.
    pub fn confidences(&self) -> [f64; 3] {
        self.layers.map(|l| l.confidence)
    }

    /// Probability of each leaf, in [`Branch::ALL`] order.
    pub fn leaf_probs(&self) -> [f64; 7] {
        self.leaf_probs
    }

    /// Backpropagates `dL/dfused` into `grads`. Input-vector gradients are
    /// returned only when `want_inputs` is set.
    pub fn backward(
        &self,
        params: &DwtParams,
        q: &StreamView<'_>,
        g: &StreamView<'_>,
        grad_fused: f64,
        grads: &mut DwtGrads,
        want_inputs: bool,
    ) -> Result<Option<PairInputGrads>> {
        let temperature = params.branch_temperature;
        let mut d_enc: [Vec<f64>; 3] = [
            vec![0.0; self.encodings[0].len()],
            vec![0.0; self.encodings[1].len()],
            vec![0.0; self.encodings[2].len()],
        ];

        // fused = w · d
        let d_weights: [f64; 3] = std::array::from_fn(|k| grad_fused * self.distances[k]);
        let d_dist: [f64; 3] = std::array::from_fn(|k| grad_fused * self.weights[k]);

        // w = Σ leaf_prob · leaf_weight
        let mut d_leaf = [0.0; 7];
        for (k, branch) in Branch::ALL.iter().enumerate() {
            d_leaf[k] = (0..3).map(|s| d_weights[s] * self.leaf_weights[k][s]).sum();
            if let Some(slot) = gate_slot(*branch) {
                let id = GATES[slot];
                let d_probs: Vec<f64> = id
                    .streams()
                    .iter()
                    .map(|s| self.leaf_probs[k] * d_weights[s.index()])
                    .collect();
                let gate = &self.gates[slot];
                let d_logits = softmax_backward(&gate.probs, &d_probs);
                let d_in = params
                    .net(id)
                    .backward_accumulate(&gate.tape, &d_logits, grads.net_mut(id))?;
                scatter_input_grad(id, &d_in, &mut d_enc);
            }
        }

        // leaf probabilities from the layer probabilities
        let [p1, p2, p3] = [self.layers[0].probs, self.layers[1].probs, self.layers[2].probs];
        let d_layer1 = [
            d_leaf[0],
            d_leaf[1] * p2[0] + d_leaf[3] * p2[1] + d_leaf[2] * p2[2],
            d_leaf[4] * p3[0] + d_leaf[6] * p3[1] + d_leaf[5] * p3[2],
        ];
        let d_layer2 = [p1[1] * d_leaf[1], p1[1] * d_leaf[3], p1[1] * d_leaf[2]];
        let d_layer3 = [p1[2] * d_leaf[4], p1[2] * d_leaf[6], p1[2] * d_leaf[5]];

        let conf_nets = [NetId::ConfidenceFace, NetId::ConfidenceLg1, NetId::ConfidenceLg2];
        for (k, (layer, d_probs)) in DecisionLayer::ALL
            .iter()
            .zip([d_layer1, d_layer2, d_layer3])
            .enumerate()
        {
            let (d_conf, d_alpha, d_beta) = self.layers[k].backward(d_probs, temperature);
            accumulate_threshold(&params.thresholds, *layer, d_alpha, d_beta, grads);
            let trace = &self.confidences[k];
            if let Some(tape) = &trace.tape {
                let d_logit = d_conf * trace.value * (1.0 - trace.value);
                let id = conf_nets[k];
                let d_in = params
                    .net(id)
                    .backward_accumulate(tape, &[d_logit], grads.net_mut(id))?;
                scatter_input_grad(id, &d_in, &mut d_enc);
            }
        }

        if !want_inputs {
            return Ok(None);
        }
        let mut out = PairInputGrads {
            query: [
                vec![0.0; q.face.len()],
                vec![0.0; q.head_limb.len()],
                vec![0.0; q.global.len()],
            ],
            gallery: [
                vec![0.0; g.face.len()],
                vec![0.0; g.head_limb.len()],
                vec![0.0; g.global.len()],
            ],
        };
        for s in Stream::ALL {
            let i = s.index();
            let (dq_dist, dg_dist) = &self.distance_grads[i];
            for (o, v) in out.query[i].iter_mut().zip(dq_dist) {
                *o += d_dist[i] * v;
            }
            for (o, v) in out.gallery[i].iter_mut().zip(dg_dist) {
                *o += d_dist[i] * v;
            }
            let (qs, gs) = (q.stream(s), g.stream(s));
            let (dq, dg) = (&mut out.query[i], &mut out.gallery[i]);
            pair_encoding_backward(qs, gs, &d_enc[i], dq, dg);
        }
        Ok(Some(out))
    }
}

fn accumulate_threshold(t: &Thresholds, layer: DecisionLayer, d_alpha: f64, d_beta: f64, grads: &mut DwtGrads) {
    t.accumulate_grad(layer, d_alpha, d_beta, &mut grads.thresholds);
}

fn scatter_input_grad(id: NetId, d_in: &[f64], d_enc: &mut [Vec<f64>; 3]) {
    let mut offset = 0;
    for s in id.streams() {
        let target = &mut d_enc[s.index()];
        let len = target.len();
        for (t, v) in target.iter_mut().zip(&d_in[offset..offset + len]) {
            *t += v;
        }
        offset += len;
    }
}

/// Soft forward pass for one pair of stream views.
pub fn soft_pair_forward(params: &DwtParams, q: &StreamView<'_>, g: &StreamView<'_>) -> Result<SoftPairTrace> {
    params.check_temperature()?;
    let temperature = params.branch_temperature;
    let encodings = stream_encodings(q, g);
    let t = &params.thresholds;

    let conf = |id: NetId| -> Result<ConfidenceTrace> {
        let (out, tape) = params.net(id).forward(&net_input(id, &encodings))?;
        Ok(ConfidenceTrace {
            value: sigmoid(out[0]),
            tape: Some(tape),
        })
    };
    let face = if q.face_present && g.face_present {
        conf(NetId::ConfidenceFace)?
    } else {
        ConfidenceTrace { value: 0.0, tape: None }
    };
    let confidences = [face, conf(NetId::ConfidenceLg1)?, conf(NetId::ConfidenceLg2)?];

    let mut gates = Vec::with_capacity(4);
    for id in GATES {
        let (logits, tape) = params.net(id).forward(&net_input(id, &encodings))?;
        gates.push(GateTrace {
            probs: softmax(&logits),
            tape,
        });
    }
    let gates: [GateTrace; 4] = gates.try_into().expect("four gates");

    let layers: [LayerSoft; 3] = std::array::from_fn(|k| {
        let layer = DecisionLayer::ALL[k];
        LayerSoft::new(confidences[k].value, t.alpha(layer), t.beta(layer), temperature)
    });
    let [p1, p2, p3] = [layers[0].probs, layers[1].probs, layers[2].probs];
    let leaf_probs = [
        p1[0],
        p1[1] * p2[0],
        p1[1] * p2[2],
        p1[1] * p2[1],
        p1[2] * p3[0],
        p1[2] * p3[2],
        p1[2] * p3[1],
    ];

    let leaf_weights: [[f64; 3]; 7] = std::array::from_fn(|k| {
        let branch = Branch::ALL[k];
        match gate_slot(branch) {
            Some(slot) => {
                let mut w = [0.0; 3];
                for (p, s) in gates[slot].probs.iter().zip(GATES[slot].streams()) {
                    w[s.index()] = *p;
                }
                w
            }
            None => match branch {
                Branch::FaceOnly => WeightVector::FACE_ONLY.to_array(),
                Branch::GlobalOnly => WeightVector::GLOBAL_ONLY.to_array(),
                _ => WeightVector::LIMB_ONLY.to_array(),
            },
        }
    });
    let weights: [f64; 3] = std::array::from_fn(|s| (0..7).map(|k| leaf_probs[k] * leaf_weights[k][s]).sum());

    let mut distances = [0.0; 3];
    let distance_grads: [(Vec<f64>, Vec<f64>); 3] = std::array::from_fn(|i| {
        let s = Stream::ALL[i];
        let (d, gq, gg) = cosine_distance_grad(q.stream(s), g.stream(s));
        distances[i] = d;
        (gq, gg)
    });
    let fused = (0..3).map(|k| weights[k] * distances[k]).sum();

    Ok(SoftPairTrace {
        encodings,
        confidences,
        gates,
        layers,
        leaf_probs,
        leaf_weights,
        weights,
        distances,
        distance_grads,
        fused,
    })
}

/// Tempered-sigmoid relaxation of [`decide_hard`](super::decide_hard).
pub fn decide_soft(params: &DwtParams, q: &EmbeddingRecord, g: &EmbeddingRecord) -> Result<WeightVector> {
    params.check_dims(&q.dims())?;
    params.check_dims(&g.dims())?;
    Ok(soft_pair_forward(params, &q.view(), &g.view())?.weights())
}

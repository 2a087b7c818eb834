use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{Stream, StreamDims};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, DenseNet, NetGrads, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwtConfig {
    /// Hidden width of every confidence and gating network.
    pub hidden: usize,
    pub branch_temperature: f64,
    pub init_alpha: f64,
    pub init_beta: f64,
    /// Encodings longer than this are randomly projected before the MLP.
    pub projection_threshold: usize,
    pub projection_dim: usize,
}

impl Default for DwtConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            branch_temperature: 0.1,
            init_alpha: 0.7,
            init_beta: 0.3,
            projection_threshold: 4096,
            projection_dim: 512,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// The three decision layers, each with its own accept/reject thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionLayer {
    Face,
    Second,
    Third,
}

impl DecisionLayer {
    pub const ALL: [DecisionLayer; 3] = [DecisionLayer::Face, DecisionLayer::Second, DecisionLayer::Third];

    fn offset(self) -> usize {
        match self {
            DecisionLayer::Face => 0,
            DecisionLayer::Second => 2,
            DecisionLayer::Third => 4,
        }
    }
}

/// Accept/reject thresholds stored unconstrained.
///
/// For each layer `alpha = σ(a)` and `beta = alpha · σ(b)`, so
/// `0 < beta < alpha < 1` holds for any raw values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// `[a_face, b_face, a_second, b_second, a_third, b_third]`
    pub raw: [f64; 6],
}

impl Thresholds {
    pub fn uniform(alpha: f64, beta: f64) -> Result<Self> {
        let mut t = Self { raw: [0.0; 6] };
        for layer in DecisionLayer::ALL {
            t.set(layer, alpha, beta)?;
        }
        Ok(t)
    }

    pub fn set(&mut self, layer: DecisionLayer, alpha: f64, beta: f64) -> Result<()> {
        if !(0.0 < beta && beta < alpha && alpha < 1.0) {
            return Err(Error::Config(format!(
                "thresholds need 0 < beta < alpha < 1, got alpha={alpha}, beta={beta}"
            )));
        }
        let o = layer.offset();
        self.raw[o] = logit(alpha);
        self.raw[o + 1] = logit(beta / alpha);
        Ok(())
    }

    pub fn alpha(&self, layer: DecisionLayer) -> f64 {
        sigmoid(self.raw[layer.offset()])
    }

    pub fn beta(&self, layer: DecisionLayer) -> f64 {
        self.alpha(layer) * sigmoid(self.raw[layer.offset() + 1])
    }

    /// Chain rule from `(dL/dalpha, dL/dbeta)` to the two raw scalars of `layer`.
    pub(crate) fn accumulate_grad(&self, layer: DecisionLayer, d_alpha: f64, d_beta: f64, out: &mut [f64; 6]) {
        let o = layer.offset();
        let alpha = self.alpha(layer);
        let s = sigmoid(self.raw[o + 1]);
        let dalpha_da = alpha * (1.0 - alpha);
        out[o] += d_alpha * dalpha_da + d_beta * s * dalpha_da;
        out[o + 1] += d_beta * alpha * s * (1.0 - s);
    }
}

/// Identifies one of the seven networks of the decision module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetId {
    ConfidenceFace,
    ConfidenceLg1,
    ConfidenceLg2,
    GatingFg,
    GatingFl,
    GatingAll,
    GatingLg,
}

impl NetId {
    pub const ALL: [NetId; 7] = [
        NetId::ConfidenceFace,
        NetId::ConfidenceLg1,
        NetId::ConfidenceLg2,
        NetId::GatingFg,
        NetId::GatingFl,
        NetId::GatingAll,
        NetId::GatingLg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NetId::ConfidenceFace => "confidence_f",
            NetId::ConfidenceLg1 => "confidence_lg1",
            NetId::ConfidenceLg2 => "confidence_lg2",
            NetId::GatingFg => "gating_fg",
            NetId::GatingFl => "gating_fl",
            NetId::GatingAll => "gating_all",
            NetId::GatingLg => "gating_lg",
        }
    }

    /// Streams whose pair encodings are concatenated (in this order) as input.
    /// For gating networks the same order maps softmax outputs to weights.
    pub fn streams(self) -> &'static [Stream] {
        use Stream::*;
        match self {
            NetId::ConfidenceFace => &[Face],
            NetId::ConfidenceLg1 | NetId::ConfidenceLg2 | NetId::GatingLg => &[HeadLimb, Global],
            NetId::GatingFg => &[Face, Global],
            NetId::GatingFl => &[Face, HeadLimb],
            NetId::GatingAll => &[Face, HeadLimb, Global],
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            NetId::ConfidenceFace | NetId::ConfidenceLg1 | NetId::ConfidenceLg2 => 1,
            _ => self.streams().len(),
        }
    }

    pub fn encoding_dim(self, dims: &StreamDims) -> usize {
        self.streams().iter().map(|&s| 2 * dims.get(s)).sum()
    }
}

/// Fixed Gaussian projection `x ↦ P x`, with `P_ij ~ N(0, 1/out_dim)`,
/// regenerated deterministically from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    pub seed: u64,
    pub in_dim: usize,
    pub out_dim: usize,
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub fn new(seed: u64, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (out_dim as f64).sqrt();
        let matrix = (0..in_dim * out_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            seed,
            in_dim,
            out_dim,
            matrix,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.in_dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, &yi) in self.matrix.chunks_exact(self.in_dim).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += r * yi);
        }
        out
    }
}

/// A dense network fed with a pair encoding, optionally through a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNet {
    pub net: DenseNet,
    pub projection: Option<RandomProjection>,
}

impl PairNet {
    pub fn encoding_dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.in_dim,
            None => self.net.input_dim(),
        }
    }

    fn check(&self, encoding: &[f64]) -> Result<()> {
        if encoding.len() != self.encoding_dim() {
            return Err(Error::Dimension(format!(
                "pair encoding has {} entries, network expects {}",
                encoding.len(),
                self.encoding_dim()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, encoding: &[f64]) -> Result<Vec<f64>> {
        self.check(encoding)?;
        match &self.projection {
            Some(p) => self.net.predict(&p.apply(encoding)),
            None => self.net.predict(encoding),
        }
    }

    pub fn forward(&self, encoding: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check(encoding)?;
        match &self.projection {
            Some(p) => self.net.forward(&p.apply(encoding)),
            None => self.net.forward(encoding),
        }
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the (unprojected) encoding.
    pub fn backward_accumulate(&self, tape: &Tape, grad_out: &[f64], acc: &mut NetGrads) -> Result<Vec<f64>> {
        let g = self.net.backward_accumulate(tape, grad_out, acc)?;
        Ok(match &self.projection {
            Some(p) => p.apply_transpose(&g),
            None => g,
        })
    }

    pub fn set_constant_output(&mut self, value: f64) {
        self.net.set_constant_output(value);
    }
}

/// All trainable state of the decision module.
#[derive(Debug, Clone, PartialEq)]
pub struct DwtParams {
    pub confidence_f: PairNet,
    pub confidence_lg1: PairNet,
    pub confidence_lg2: PairNet,
    pub gating_fg: PairNet,
    pub gating_fl: PairNet,
    pub gating_all: PairNet,
    pub gating_lg: PairNet,
    pub thresholds: Thresholds,
    pub branch_temperature: f64,
    pub dims: StreamDims,
}

impl DwtParams {
    /// Seeded initialization of all seven networks.
    pub fn init(dims: StreamDims, cfg: &DwtConfig, seed: u64) -> Result<Self> {
        if !(cfg.branch_temperature > 0.0) {
            return Err(Error::Config(format!(
                "branch temperature must be positive, got {}",
                cfg.branch_temperature
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build = |id: NetId| {
            let enc = id.encoding_dim(&dims);
            let projection = (enc > cfg.projection_threshold)
                .then(|| RandomProjection::new(projection_seed(seed, id), enc, cfg.projection_dim));
            let input = projection.as_ref().map_or(enc, |p| p.out_dim);
            PairNet {
                net: DenseNet::mlp(input, cfg.hidden, id.output_dim(), &mut rng),
                projection,
            }
        };
        Ok(Self {
            confidence_f: build(NetId::ConfidenceFace),
            confidence_lg1: build(NetId::ConfidenceLg1),
            confidence_lg2: build(NetId::ConfidenceLg2),
            gating_fg: build(NetId::GatingFg),
            gating_fl: build(NetId::GatingFl),
            gating_all: build(NetId::GatingAll),
            gating_lg: build(NetId::GatingLg),
            thresholds: Thresholds::uniform(cfg.init_alpha, cfg.init_beta)?,
            branch_temperature: cfg.branch_temperature,
            dims,
        })
    }

    pub fn net(&self, id: NetId) -> &PairNet {
        match id {
            NetId::ConfidenceFace => &self.confidence_f,
            NetId::ConfidenceLg1 => &self.confidence_lg1,
            NetId::ConfidenceLg2 => &self.confidence_lg2,
            NetId::GatingFg => &self.gating_fg,
            NetId::GatingFl => &self.gating_fl,
            NetId::GatingAll => &self.gating_all,
            NetId::GatingLg => &self.gating_lg,
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut PairNet {
        match id {
            NetId::ConfidenceFace => &mut self.confidence_f,
            NetId::ConfidenceLg1 => &mut self.confidence_lg1,
            NetId::ConfidenceLg2 => &mut self.confidence_lg2,
            NetId::GatingFg => &mut self.gating_fg,
            NetId::GatingFl => &mut self.gating_fl,
            NetId::GatingAll => &mut self.gating_all,
            NetId::GatingLg => &mut self.gating_lg,
        }
    }

    pub fn param_count(&self) -> usize {
        NetId::ALL
            .iter()
            .map(|&id| self.net(id).net.param_count())
            .sum::<usize>()
            + 6
    }

    /// Parameter buffers in canonical order: networks in [`NetId::ALL`] order,
    /// then the six raw thresholds.
    pub fn segments(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = NetId::ALL.iter().flat_map(|&id| self.net(id).net.segments()).collect();
        out.push(&self.thresholds.raw);
        out
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            confidence_f,
            confidence_lg1,
            confidence_lg2,
            gating_fg,
            gating_fl,
            gating_all,
            gating_lg,
            thresholds,
            ..
        } = self;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for n in [
            confidence_f,
            confidence_lg1,
            confidence_lg2,
            gating_fg,
            gating_fl,
            gating_all,
            gating_lg,
        ] {
            out.extend(n.net.segments_mut());
        }
        out.push(&mut thresholds.raw);
        out
    }

    pub(crate) fn check_temperature(&self) -> Result<()> {
        if !(self.branch_temperature > 0.0) {
            return Err(Error::Config(format!(
                "branch temperature must be positive, got {}",
                self.branch_temperature
            )));
        }
        Ok(())
    }

    pub(crate) fn check_dims(&self, dims: &StreamDims) -> Result<()> {
        if *dims != self.dims {
            return Err(Error::Dimension(format!(
                "inputs have dims {dims:?}, decision module was built for {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

pub(crate) fn projection_seed(seed: u64, id: NetId) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id.index() as u64 + 1))
}

/// Gradients shaped like [`DwtParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DwtGrads {
    pub nets: Vec<NetGrads>,
    pub thresholds: [f64; 6],
}

impl DwtGrads {
    pub fn zeros_like(params: &DwtParams) -> Self {
        Self {
            nets: NetId::ALL
                .iter()
                .map(|&id| NetGrads::zeros_like(&params.net(id).net))
                .collect(),
            thresholds: [0.0; 6],
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> &mut NetGrads {
        &mut self.nets[id.index()]
    }

    pub fn segments(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.nets.iter().flat_map(|n| n.segments()).collect();
        out.push(&self.thresholds);
        out
    }

    pub fn add_assign(&mut self, other: &DwtGrads) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            a.add_assign(b);
        }
        for (a, b) in self.thresholds.iter_mut().zip(&other.thresholds) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for n in &mut self.nets {
            n.scale(s);
        }
        self.thresholds.iter_mut().for_each(|x| *x *= s);
    }
}

/// `[q ⊙ g ; |q − g|]`, symmetric under swapping `q` and `g`.
pub fn pair_encoding(q: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * q.len());
    out.extend(q.iter().zip(g).map(|(a, b)| a * b));
    out.extend(q.iter().zip(g).map(|(a, b)| (a - b).abs()));
    out
}

/// Backward through [`pair_encoding`]; `|x|` uses the zero subgradient at 0.
pub(crate) fn pair_encoding_backward(q: &[f64], g: &[f64], grad: &[f64], dq: &mut [f64], dg: &mut [f64]) {
    let d = q.len();
    for i in 0..d {
        let s = (q[i] - g[i]).signum() * if q[i] == g[i] { 0.0 } else { 1.0 };
        dq[i] += grad[i] * g[i] + grad[d + i] * s;
        dg[i] += grad[i] * q[i] - grad[d + i] * s;
    }
}

/// Concatenates the stream encodings a network consumes.
pub(crate) fn net_input(id: NetId, encodings: &[Vec<f64>; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for &s in id.streams() {
        out.extend_from_slice(&encodings[s.index()]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_round_trip_and_order() {
        let t = Thresholds::uniform(0.7, 0.3).unwrap();
        for layer in DecisionLayer::ALL {
            assert!((t.alpha(layer) - 0.7).abs() < 1e-12);
            assert!((t.beta(layer) - 0.3).abs() < 1e-12);
        }
        let wild = Thresholds {
            raw: [40.0, -40.0, -3.0, 9.0, 0.0, 0.0],
        };
        for layer in DecisionLayer::ALL {
            let (a, b) = (wild.alpha(layer), wild.beta(layer));
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && b <= a);
        }
        assert!(Thresholds::uniform(0.3, 0.7).is_err());
    }

    #[test]
    fn threshold_grad_matches_fd() {
        let t = Thresholds {
            raw: [0.4, -0.2, 1.1, 0.3, -0.7, 2.0],
        };
        let (wa, wb) = (0.8, -1.3);
        let f = |t: &Thresholds| wa * t.alpha(DecisionLayer::Second) + wb * t.beta(DecisionLayer::Second);
        let mut g = [0.0; 6];
        t.accumulate_grad(DecisionLayer::Second, wa, wb, &mut g);
        let h = 1e-6;
        for i in 0..6 {
            let mut p = t;
            let mut m = t;
            p.raw[i] += h;
            m.raw[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-9, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn network_arities() {
        let p = DwtParams::init(StreamDims::uniform(4), &DwtConfig::default(), 1).unwrap();
        assert_eq!(p.gating_fg.net.output_dim(), 2);
        assert_eq!(p.gating_fl.net.output_dim(), 2);
        assert_eq!(p.gating_all.net.output_dim(), 3);
        assert_eq!(p.gating_lg.net.output_dim(), 2);
        assert_eq!(p.confidence_f.net.input_dim(), 8);
        assert_eq!(p.confidence_lg1.net.input_dim(), 16);
        assert_eq!(p.gating_all.net.input_dim(), 24);
        assert_ne!(p.confidence_lg1, p.confidence_lg2);
        assert_eq!(p.segments().iter().map(|s| s.len()).sum::<usize>(), p.param_count());
    }

    #[test]
    fn projection_kicks_in_above_threshold() {
        let cfg = DwtConfig {
            projection_threshold: 20,
            projection_dim: 6,
            hidden: 4,
            ..DwtConfig::default()
        };
        let p = DwtParams::init(StreamDims::uniform(8), &cfg, 3).unwrap();
        assert!(p.confidence_f.projection.is_none());
        let proj = p.confidence_lg1.projection.as_ref().unwrap();
        assert_eq!((proj.in_dim, proj.out_dim), (32, 6));
        assert_eq!(p.confidence_lg1.net.input_dim(), 6);
        assert_eq!(RandomProjection::new(proj.seed, 32, 6), *proj);
    }

    #[test]
    fn encoding_is_symmetric() {
        let q = [0.2, -0.5, 0.9];
        let g = [-0.1, 0.4, 0.9];
        assert_eq!(pair_encoding(&q, &g), pair_encoding(&g, &q));
    }
}

// Shared fixtures for the integration suites and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tsdw::distance::{DistanceMatrix, StreamTag};
use tsdw::dwt::{DecisionLayer, DwtConfig, DwtParams};
use tsdw::embedding::{EmbeddingRecord, EmbeddingSet, SetRole, StreamDims};
use tsdw::eval::EvalProtocol;
use tsdw::synth::{oracle_first_hit, oracle_map};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn record(rng: &mut impl Rng, dims: StreamDims, pid: u32, face: bool) -> EmbeddingRecord {
    let f = if face {
        unit(rng, dims.face)
    } else {
        vec![0.0; dims.face]
    };
    let clothes = pid * 10 + rng.random_range(0..3);
    let camera = rng.random_range(0..3);
    EmbeddingRecord::new(
        format!("r{}", rng.random::<u32>()),
        pid,
        camera,
        clothes,
        f,
        unit(rng, dims.head_limb),
        unit(rng, dims.global),
    )
}

/// Random query/gallery pair; each face is absent with probability `p_absent`.
pub fn pair(rng: &mut impl Rng, dims: StreamDims, p_absent: f64) -> (EmbeddingRecord, EmbeddingRecord) {
    let fq = rng.random::<f64>() >= p_absent;
    let fg = rng.random::<f64>() >= p_absent;
    (record(rng, dims, 1, fq), record(rng, dims, 2, fg))
}

/// Decision module with every weight redrawn and random thresholds, so all
/// seven leaves are reachable from random pairs.
pub fn random_params(rng: &mut impl Rng, dims: StreamDims, hidden: usize) -> DwtParams {
    let cfg = DwtConfig {
        hidden,
        ..DwtConfig::default()
    };
    let mut p = DwtParams::init(dims, &cfg, rng.random()).unwrap();
    let scale = rng.random_range(0.3..1.5);
    let n = p.segments().len();
    for (k, seg) in p.segments_mut().into_iter().enumerate() {
        if k + 1 == n {
            break;
        }
        for x in seg.iter_mut() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for layer in DecisionLayer::ALL {
        let alpha = rng.random_range(0.2..0.9);
        let beta = rng.random_range(0.05..alpha - 0.05);
        p.thresholds.set(layer, alpha, beta).unwrap();
    }
    p
}

pub fn set(records: Vec<EmbeddingRecord>, dims: StreamDims, role: SetRole) -> EmbeddingSet {
    EmbeddingSet::new(records, dims, role).unwrap()
}

/// Fourth-order central difference of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn flatten(segs: Vec<&[f64]>) -> Vec<f64> {
    segs.into_iter().flatten().copied().collect()
}

/// Mutable handle on the `k`-th scalar of `params` in canonical order.
pub fn param_mut(params: &mut DwtParams, mut k: usize) -> &mut f64 {
    for seg in params.segments_mut() {
        if k < seg.len() {
            return &mut seg[k];
        }
        k -= seg.len();
    }
    panic!("parameter index out of range")
}

/// Worst relative error between `analytic` and finite differences of `loss`
/// over every scalar of `params`.
pub fn check_params(params: &DwtParams, analytic: &[f64], loss: impl Fn(&DwtParams) -> f64) -> f64 {
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let x0 = *param_mut(&mut p, k);
        let n = central_diff(
            |x| {
                *param_mut(&mut p, k) = x;
                loss(&p)
            },
            x0,
            1e-5,
        );
        *param_mut(&mut p, k) = x0;
        worst = worst.max(rel_err(a, n));
    }
    worst
}

/// Worst relative error of `analytic` against finite differences over `x`.
pub fn check_vec(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut v = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let n = central_diff(
            |t| {
                v[k] = t;
                f(&v)
            },
            x[k],
            1e-5,
        );
        v[k] = x[k];
        worst = worst.max(rel_err(analytic[k], n));
    }
    worst
}

/// Triplet loss by enumerating every (anchor, positive, negative) triple.
pub fn triplet_brute_force(d: &[f64], ids: &[u32], margin: f64) -> f64 {
    let n = ids.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && ids[p] == ids[a]) {
            for k in (0..n).filter(|&k| ids[k] != ids[a]) {
                worst = worst.max((d[a * n + p] - d[a * n + k] + margin).max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

/// `P × K` identity labels in shuffled order.
pub fn shuffled_ids(rng: &mut impl Rng, p: u32, k: usize) -> Vec<u32> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<u32> = (0..p).flat_map(|i| std::iter::repeat_n(i * 7 + 3, k)).collect();
    ids.shuffle(rng);
    ids
}

/// Clothes loss written term by term from its definition.
pub fn cal_literal(
    features: &[Vec<f64>],
    classes: &[usize],
    ids: &[u32],
    centroids: &[Vec<f64>],
    owner: &[u32],
    tau: f64,
) -> f64 {
    let logit = |i: usize, c: usize| features[i].iter().zip(&centroids[c]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..features.len() {
        let pos: Vec<usize> = (0..centroids.len())
            .filter(|&c| owner[c] == ids[i] && c != classes[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        let neg_sum: f64 = (0..centroids.len())
            .filter(|&c| owner[c] != ids[i])
            .map(|c| logit(i, c).exp())
            .sum();
        let mut l = 0.0;
        for &c in &pos {
            let e = logit(i, c).exp();
            l -= (e / (e + neg_sum)).ln() / pos.len() as f64;
        }
        total += l;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Random clothes-loss instance: identities with 1 to 3 outfits each, small
/// feature norms so the literal form does not overflow.
pub struct CalCase {
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub ids: Vec<u32>,
    pub centroids: Vec<Vec<f64>>,
    pub owner: Vec<u32>,
    pub tau: f64,
}

pub fn cal_case(rng: &mut impl Rng) -> CalCase {
    let dim = rng.random_range(2..6);
    let people = rng.random_range(2..5u32);
    let mut owner = Vec::new();
    for p in 0..people {
        for _ in 0..rng.random_range(1..4) {
            owner.push(p);
        }
    }
    let centroids: Vec<Vec<f64>> = owner.iter().map(|_| unit(rng, dim)).collect();
    let n = rng.random_range(2..10);
    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..n {
        let c = rng.random_range(0..owner.len());
        classes.push(c);
        ids.push(owner[c]);
        let s = rng.random_range(0.2..1.0);
        features.push(unit(rng, dim).into_iter().map(|x| x * s).collect());
    }
    CalCase {
        features,
        classes,
        ids,
        centroids,
        owner,
        tau: rng.random_range(0.1..1.0),
    }
}

/// Two-dimensional records with random labels drawn from `ids` identities.
pub fn labelled_set(r: &mut impl Rng, n: usize, ids: u32, tag: &str) -> EmbeddingSet {
    let records = (0..n)
        .map(|i| {
            let pid = r.random_range(0..ids);
            EmbeddingRecord::new(
                format!("{tag}{i}"),
                pid,
                r.random_range(0..3),
                pid * 2 + r.random_range(0..2),
                unit(r, 2),
                unit(r, 2),
                unit(r, 2),
            )
        })
        .collect();
    set(records, StreamDims::uniform(2), SetRole::Query)
}

/// Distances on a coarse grid so ties are common.
pub fn grid_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> DistanceMatrix {
    let v = (0..rows * cols).map(|_| r.random_range(0..9) as f64 * 0.25).collect();
    DistanceMatrix::from_vec(rows, cols, v, StreamTag::Fused).unwrap()
}

/// Per-query `(AP, 1-based first hit)` from the quadratic oracles, `None`
/// for queries left without a relevant item.
pub fn eval_brute_force(
    m: &DistanceMatrix,
    q: &EmbeddingSet,
    g: &EmbeddingSet,
    p: EvalProtocol,
) -> Vec<Option<(f64, usize)>> {
    q.records
        .iter()
        .enumerate()
        .map(|(i, qr)| {
            let (d, rel): (Vec<f64>, Vec<bool>) = g
                .records
                .iter()
                .enumerate()
                .filter(|(_, gr)| p.keeps(qr, gr))
                .map(|(j, gr)| (m.get(i, j), gr.person_id == qr.person_id))
                .unzip();
            oracle_first_hit(&d, &rel).map(|f| (oracle_map(&d, &rel), f))
        })
        .collect()
}

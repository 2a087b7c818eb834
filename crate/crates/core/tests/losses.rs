mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

use tsdw::losses::*;
use tsdw::Error;

fn distances(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n * n).map(|_| r.random_range(0.0..2.0)).collect()
}

#[test]
fn triplet_matches_enumeration() {
    let mut r = rng(20);
    let cfg = TripletConfig::default();
    for _ in 0..100 {
        let ids = shuffled_ids(&mut r, 4, 4);
        let d = distances(&mut r, 16);
        let out = batch_hard_triplet(&d, &ids, &cfg).unwrap();
        assert!((out.loss - triplet_brute_force(&d, &ids, cfg.margin)).abs() < 1e-12);
    }
}

#[test]
fn triplet_ignores_batch_order() {
    let mut r = rng(21);
    let cfg = TripletConfig::default();
    let ids = shuffled_ids(&mut r, 3, 3);
    let d = distances(&mut r, 9);
    let base = batch_hard_triplet(&d, &ids, &cfg).unwrap().loss;
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut r);
    let ids2: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
    let d2: Vec<f64> = (0..81).map(|k| d[perm[k / 9] * 9 + perm[k % 9]]).collect();
    assert!((batch_hard_triplet(&d2, &ids2, &cfg).unwrap().loss - base).abs() < 1e-12);
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let mut r = rng(22);
    for reduction in [AnchorReduction::Mean, AnchorReduction::Max] {
        let cfg = TripletConfig { margin: 0.5, reduction };
        for _ in 0..20 {
            let ids = shuffled_ids(&mut r, 3, 2);
            let d = distances(&mut r, 6);
            let out = batch_hard_triplet(&d, &ids, &cfg).unwrap();
            let worst = check_vec(&d, &out.grad, |x| batch_hard_triplet(x, &ids, &cfg).unwrap().loss);
            assert!(worst < 1e-4, "{reduction:?}: {worst}");
        }
    }
}

#[test]
fn masked_triplet_skips_anchors_without_positives() {
    let ids = [1, 1, 2, 2];
    let d = vec![
        0.0, 0.4, 0.9, 0.2, 0.4, 0.0, 0.3, 0.8, 0.9, 0.3, 0.0, 0.5, 0.2, 0.8, 0.5, 0.0,
    ];
    let mut mask = vec![true; 16];
    mask[1] = false;
    mask[4] = false;
    let cfg = TripletConfig::default();
    let out = batch_hard_triplet_masked(&d, &ids, Some(&mask), &cfg).unwrap();
    assert_eq!(out.hard_pairs[0], None);
    assert_eq!(out.hard_pairs[1], None);
    // anchor 2: 0.5 − 0.3 + 0.3; anchor 3: 0.5 − 0.2 + 0.3
    assert!((out.loss - (0.5 + 0.6) / 2.0).abs() < 1e-12);
    assert!(matches!(
        batch_hard_triplet(&d[..9], &ids[..3], &cfg),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn cal_matches_literal_form() {
    let mut r = rng(23);
    for _ in 0..100 {
        let c = cal_case(&mut r);
        let out = cal_loss(
            &c.features,
            &c.classes,
            &c.ids,
            &c.centroids,
            &c.owner,
            &CalConfig { temperature: c.tau },
        )
        .unwrap();
        let want = cal_literal(&c.features, &c.classes, &c.ids, &c.centroids, &c.owner, c.tau);
        assert!((out.loss - want).abs() < 1e-9, "{} vs {want}", out.loss);
    }
}

#[test]
fn cal_symmetric_case_is_ln_two() {
    let f = vec![vec![1.0, 0.0]];
    let centroids = vec![vec![0.0, 1.0], vec![0.6, 0.8], vec![0.6, -0.8]];
    let out = cal_loss(&f, &[0], &[5], &centroids, &[5, 5, 9], &CalConfig::default()).unwrap();
    assert!((out.loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn cal_depends_only_on_scaled_logits() {
    let mut r = rng(24);
    let c = cal_case(&mut r);
    let base = cal_loss(
        &c.features,
        &c.classes,
        &c.ids,
        &c.centroids,
        &c.owner,
        &CalConfig { temperature: c.tau },
    )
    .unwrap()
    .loss;
    let s = 3.0;
    let scaled: Vec<Vec<f64>> = c.features.iter().map(|f| f.iter().map(|x| x * s).collect()).collect();
    let cfg = CalConfig { temperature: c.tau * s };
    let out = cal_loss(&scaled, &c.classes, &c.ids, &c.centroids, &c.owner, &cfg).unwrap();
    assert!((out.loss - base).abs() < 1e-12);
}

#[test]
fn cal_gradients_match_finite_differences() {
    let mut r = rng(25);
    for _ in 0..30 {
        let c = cal_case(&mut r);
        let cfg = CalConfig { temperature: c.tau };
        let out = cal_loss(&c.features, &c.classes, &c.ids, &c.centroids, &c.owner, &cfg).unwrap();
        let dim = c.centroids[0].len();
        let flat_f: Vec<f64> = c.features.concat();
        let worst = check_vec(&flat_f, &out.grad_features.concat(), |x| {
            let f: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            cal_loss(&f, &c.classes, &c.ids, &c.centroids, &c.owner, &cfg)
                .unwrap()
                .loss
        });
        assert!(worst < 1e-4, "features: {worst}");
        let flat_c: Vec<f64> = c.centroids.concat();
        let worst = check_vec(&flat_c, &out.grad_centroids.concat(), |x| {
            let cs: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            cal_loss(&c.features, &c.classes, &c.ids, &cs, &c.owner, &cfg)
                .unwrap()
                .loss
        });
        assert!(worst < 1e-4, "centroids: {worst}");
    }
}

#[test]
fn cross_entropy_examples_and_gradient() {
    let (l, _) = label_smoothed_ce(&[0.0; 4], 2, 0.0).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let (l, g) = label_smoothed_ce(&[0.0, 0.0], 0, 0.2).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert!((g[0] + 0.4).abs() < 1e-12 && (g[1] - 0.4).abs() < 1e-12);

    let mut r = rng(26);
    for _ in 0..50 {
        let logits = gaussian(&mut r, 5);
        let t = r.random_range(0..5);
        let eps = r.random_range(0.0..0.3);
        let (_, g) = label_smoothed_ce(&logits, t, eps).unwrap();
        let worst = check_vec(&logits, &g, |x| label_smoothed_ce(x, t, eps).unwrap().0);
        assert!(worst < 1e-4);
    }
    assert!(matches!(label_smoothed_ce(&[0.0; 3], 3, 0.1), Err(Error::Index(_))));
}

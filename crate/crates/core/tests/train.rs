use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsdw::embedding::StreamDims;
use tsdw::nn::LrSchedule;
use tsdw::synth::{generate, SynthConfig};
use tsdw::train::*;

fn data() -> tsdw::embedding::EmbeddingSet {
    let cfg = SynthConfig {
        n_identities: 24,
        dims: StreamDims::uniform(6),
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().train
}

fn quick(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        freeze_epochs: epochs.min(2),
        schedule: LrSchedule::new(3e-3, vec![], 0.1).unwrap(),
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.dwt.hidden = 8;
    cfg.sampler.seed = 5;
    cfg
}

#[test]
fn loss_goes_down() {
    let out = train_fusion(&data(), &quick(10)).unwrap();
    let h = out.loss_history();
    assert_eq!(h.len(), 10);
    let head = (h[0] + h[1]) / 2.0;
    let tail = (h[8] + h[9]) / 2.0;
    assert!(tail < head, "{h:?}");
    for (i, e) in out.history.iter().enumerate() {
        assert_eq!(e.epoch, i + 1);
        assert!((e.branch_occupancy.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn same_seed_same_model() {
    let a = train_fusion(&data(), &quick(3)).unwrap();
    let b = train_fusion(&data(), &quick(3)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn result_does_not_depend_on_thread_count() {
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_fusion(&data(), &quick(2)).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn frozen_adapters_stay_identity() {
    let mut cfg = quick(3);
    cfg.adapter_enabled = true;
    cfg.freeze_epochs = 3;
    let out = train_fusion(&data(), &cfg).unwrap();
    let adapters = out.adapters.unwrap();
    assert_eq!(adapters, Adapters::identity(StreamDims::uniform(6)));

    cfg.freeze_epochs = 1;
    let moved = train_fusion(&data(), &cfg).unwrap().adapters.unwrap();
    assert_ne!(moved, Adapters::identity(StreamDims::uniform(6)));
}

#[test]
fn smallest_batch_covers_both_identities() {
    let set = data();
    let cfg = PkSamplerConfig { p: 2, k: 2, seed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let batch = sample_batch(&set, &cfg, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let mut ids: Vec<u32> = batch.iter().map(|&i| set.records[i].person_id).collect();
        ids.sort();
        assert!(ids[0] == ids[1] && ids[2] == ids[3] && ids[1] != ids[2], "{ids:?}");
        assert!(batch[0] != batch[1] && batch[2] != batch[3]);
    }
}

#[test]
fn cross_clothes_policy_trains() {
    let mut cfg = quick(2);
    cfg.positives = PositivePolicy::CrossClothes;
    let out = train_fusion(&data(), &cfg).unwrap();
    assert!(out.loss_history().iter().all(|l| l.is_finite()));
}

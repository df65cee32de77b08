mod common;

use coca3d::boxhead::{envelope, BoxHeadConfig};
use coca3d::model::{CocaConfig, CocaModel};
use coca3d::tensor::checkpoint::encode;
use coca3d::train::{Trainer, TrainConfig};
use common::{fixture, small_trainer, steps};

fn decoder_bytes(t: &Trainer) -> Vec<Vec<f64>> {
    t.store.iter().filter(|(_, p)| p.name.starts_with("decoder.")).map(|(_, p)| p.tensor.data().to_vec()).collect()
}

#[test]
fn lambda_zero_never_touches_the_decoder() {
    let f = fixture(20, 128, 1);
    let mut t = small_trainer(&f, 3, steps(15, 0.0));
    let before = decoder_bytes(&t);
    let logs = t.run(None).unwrap();
    assert_eq!(logs.len(), 15);
    assert_eq!(before, decoder_bytes(&t));
    assert!(logs.iter().all(|l| l.l_cap == 0.0));

    let mut t = small_trainer(&f, 3, steps(3, 1.0));
    t.run(None).unwrap();
    assert_ne!(before, decoder_bytes(&t));
}

#[test]
fn frozen_parameters_survive_training() {
    let f = fixture(20, 128, 2);
    let mut t = small_trainer(&f, 4, steps(40, 1.0));
    assert!(t.store.frozen_count() > 0);
    let frozen = t.store.frozen_hash();
    t.run(None).unwrap();
    assert_eq!(frozen, t.store.frozen_hash());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture(20, 128, 3);
    let mut straight = small_trainer(&f, 5, steps(12, 1.0));
    straight.run(None).unwrap();

    let run_dir = tempfile::tempdir().unwrap();
    let mut first = small_trainer(&f, 5, steps(12, 1.0));
    for _ in 0..6 {
        first.train_step().unwrap();
    }
    first.save(run_dir.path()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(run_dir.path(), &f.samples, None).unwrap();
    assert_eq!(resumed.step, 6);
    resumed.run(None).unwrap();
    assert_eq!(resumed.step, 12);
    for ((_, a), (_, b)) in straight.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((x - y).abs() <= 1e-9, "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let f = fixture(20, 128, 4);
    let run = |seed: u64| {
        let mut t = small_trainer(&f, 6, TrainConfig { seed, ..steps(8, 1.0) });
        let logs = t.run(None).unwrap();
        (encode(&t.store), logs.last().unwrap().l_total)
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    assert_eq!(a, b);
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_ne!(a, run(2).0);
}

#[test]
fn loss_falls_with_box_head() {
    let f = fixture(20, 128, 5);
    let mut config = CocaConfig::small(f.vocab.len(), 4);
    config.box_head = Some(BoxHeadConfig::default());
    let boxes: Vec<_> = f.samples.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    let (model, store) = CocaModel::with_envelope(config, 7, envelope(&boxes)).unwrap();
    let mut t = Trainer::new(model, store, f.vocab.clone(), steps(60, 1.0), &f.samples).unwrap();
    let logs = t.run(None).unwrap();
    let (first, last) = (&logs[0], logs.last().unwrap());
    assert!(first.l_box.is_some());
    assert!(last.l_total < first.l_total, "{} -> {}", first.l_total, last.l_total);
}

#[test]
fn invalid_training_configs_are_rejected() {
    let f = fixture(20, 128, 6);
    let (model, store) = CocaModel::new(CocaConfig::small(f.vocab.len(), 4), 1).unwrap();
    assert!(Trainer::new(model, store, f.vocab.clone(), steps(5, -1.0), &f.samples).is_err());
    let (model, store) = CocaModel::new(CocaConfig::small(f.vocab.len() + 1, 4), 1).unwrap();
    assert!(Trainer::new(model, store, f.vocab.clone(), steps(5, 1.0), &f.samples).is_err());
    let (model, store) = CocaModel::new(CocaConfig::small(f.vocab.len(), 4), 1).unwrap();
    assert!(Trainer::new(model, store, f.vocab.clone(), steps(5, 1.0), &f.samples[..1]).is_err());
}

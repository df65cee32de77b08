#![allow(dead_code)]

pub mod oracles;

use coca3d::data::{generate_dataset, Dataset, Split, SynthConfig};
use coca3d::model::{CocaConfig, CocaModel};
use coca3d::text::Vocabulary;
use coca3d::train::{TrainConfig, TrainSample, Trainer};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub dataset: Dataset,
    pub samples: Vec<TrainSample>,
    pub vocab: Vocabulary,
}

/// Synthetic dataset of `count` scenes with its training split as samples.
pub fn fixture(count: usize, points: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig { count, points_per_scene: points, seed, ..Default::default() };
    generate_dataset(dir.path(), &config).unwrap();
    let dataset = Dataset::load(dir.path()).unwrap();
    let samples = dataset
        .items(Split::Train)
        .into_iter()
        .map(|it| TrainSample {
            cloud: dataset.scenes[it.scene].cloud().unwrap(),
            caption: it.caption,
            boxes: dataset.scenes[it.scene].objects.iter().map(|o| o.bbox).collect(),
        })
        .collect();
    let vocab = Vocabulary::build(&dataset.captions(Split::Train), 400).unwrap();
    Fixture { dir, dataset, samples, vocab }
}

pub fn small_trainer(f: &Fixture, init_seed: u64, config: TrainConfig) -> Trainer {
    let (model, store) = CocaModel::new(CocaConfig::small(f.vocab.len(), 4), init_seed).unwrap();
    Trainer::new(model, store, f.vocab.clone(), config, &f.samples).unwrap()
}

pub fn steps(n: usize, lambda: f64) -> TrainConfig {
    TrainConfig { lambda, epochs: 0, max_steps: Some(n), ..Default::default() }
}

//! Joint contrastive + captioning training loop.

pub mod optim;

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{clamp_temperature, retrieval_top1};
use crate::data::sub_seed;
use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::model::{CocaConfig, CocaModel, Example, PreparedScene};
use crate::pointcloud::PointCloud;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Tensor};
use crate::text::Vocabulary;

pub use optim::{cosine_lr, AdamW, AdamWConfig};

pub const MODEL_FILE: &str = "model.c3ca";
pub const STATE_FILE: &str = "train_state.c3ca";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight on the caption loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub box_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: None,
            box_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for in-batch negatives"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Saved next to the weights so a run can be rebuilt and resumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: CocaConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// A scene with its target caption and ground-truth boxes.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub caption: String,
    pub boxes: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_con: f64,
    pub l_cap: f64,
    pub l_total: f64,
    pub lr: f64,
    pub retrieval_top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_box: Option<f64>,
}

pub struct Trainer {
    pub model: CocaModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub scenes: Vec<PreparedScene>,
    pub captions: Vec<Vec<usize>>,
    pub text_features: Tensor,
    pub boxes: Vec<Vec<Box3D>>,
    /// Completed optimizer steps.
    pub step: usize,
    batch: usize,
    frozen_hash: [u8; 32],
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(
        model: CocaModel,
        store: ParamStore,
        vocab: Vocabulary,
        config: TrainConfig,
        samples: &[TrainSample],
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if vocab.len() != model.config.decoder.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary has {} ids, model expects {}",
                vocab.len(),
                model.config.decoder.vocab_size
            )));
        }
        let batch = config.batch_size.min(samples.len());
        if batch < 2 {
            return Err(Error::invalid("training needs at least 2 samples for in-batch negatives"));
        }
        if batch < config.batch_size {
            log::warn!("batch size {} clamped to the {} available samples", config.batch_size, samples.len());
        }
        let scenes = samples.iter().map(|s| model.prepare(s.cloud.clone())).collect::<Result<Vec<_>>>()?;
        let captions: Vec<Vec<usize>> = samples.iter().map(|s| vocab.tokenize(&s.caption)).collect();
        let text_features = model.text_features(&store, &captions)?;
        let boxes = samples.iter().map(|s| s.boxes.clone()).collect();
        let optimizer = AdamW::new(config.optimizer, &store);
        let frozen_hash = store.frozen_hash();
        Ok(Trainer {
            model,
            store,
            vocab,
            config,
            optimizer,
            scenes,
            captions,
            text_features,
            boxes,
            step: 0,
            batch,
            frozen_hash,
            epoch_order: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scenes.len() / self.batch
    }

    pub fn total_steps(&self) -> usize {
        let by_epochs = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(by_epochs, |m| if self.config.epochs == 0 { m } else { m.min(by_epochs) })
    }

    /// Item indices of the batch used at `step`.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.scenes.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, &format!("epoch.{epoch}"))));
            self.epoch_order = Some((epoch, order));
        }
        let pos = step % spe;
        let order = &self.epoch_order.as_ref().expect("order set above").1;
        order[pos * self.batch..(pos + 1) * self.batch].to_vec()
    }

    fn examples(&self, idx: &[usize]) -> Vec<Example<'_>> {
        idx.iter()
            .map(|&i| Example {
                scene: &self.scenes[i],
                caption: &self.captions[i],
                text_feature: self.text_features.row_slice(i),
                boxes: &self.boxes[i],
            })
            .collect()
    }

    /// Runs one optimizer step and returns its log entry.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let total = self.total_steps();
        let step = self.step;
        let lr = cosine_lr(self.config.learning_rate, step, total);
        let idx = self.batch_indices(step);
        let (log, grads) = {
            let examples = self.examples(&idx);
            let mut g = Graph::new(&self.store);
            let sg = self.model.step_graph(&mut g, &examples, self.config.lambda, self.config.box_loss_weight)?;
            let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
            let l_total = g.value(sg.total).item();
            if !l_total.is_finite() {
                return Err(Error::Diverged { step, detail: format!("total loss is {l_total}") });
            }
            g.backward(sg.total).map_err(diverged)?;
            let log = StepLog {
                step: step + 1,
                l_con: g.value(sg.l_con).item(),
                l_cap: sg.l_cap.map_or(0.0, |v| g.value(v).item()),
                l_total,
                lr,
                retrieval_top1: retrieval_top1(g.value(sg.sim)),
                l_box: sg.l_box.map(|v| g.value(v).item()),
            };
            (log, g.param_grads())
        };
        self.optimizer.apply(&mut self.store, &grads, lr)?;
        clamp_temperature(&mut self.store);
        self.step += 1;
        debug!("step {} l_total {:.6} l_con {:.6} l_cap {:.6}", log.step, log.l_total, log.l_con, log.l_cap);
        Ok(log)
    }

    /// Trains until `total_steps`, optionally writing checkpoints and the
    /// metrics log under `out`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepLog>> {
        let total = self.total_steps();
        let mut logs = Vec::with_capacity(total.saturating_sub(self.step));
        let mut sink = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(file)))
            }
            None => None,
        };
        info!("training {} steps from step {} (batch {})", total, self.step, self.batch);
        while self.step < total {
            let log = self.train_step()?;
            if let Some((path, w)) = sink.as_mut() {
                let line = serde_json::to_string(&log).map_err(|e| Error::json(path.as_path(), e))?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if log.step % 100 == 0 || log.step == total {
                info!(
                    "step {}/{} l_total {:.4} l_con {:.4} l_cap {:.4} top1 {:.3}",
                    log.step, total, log.l_total, log.l_con, log.l_cap, log.retrieval_top1
                );
            }
            let every = self.config.checkpoint_every.unwrap_or(0);
            if let (Some(dir), true) = (out, every > 0 && log.step % every == 0 && log.step < total) {
                if let Some((path, w)) = sink.as_mut() {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                self.save(dir)?;
            }
            logs.push(log);
        }
        if let Some((path, w)) = sink.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if self.store.frozen_hash() != self.frozen_hash {
            return Err(Error::invalid("frozen parameters changed during training"));
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(logs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&dir.join(MODEL_FILE), &self.store)?;
        let mut state = self.optimizer.state(&self.store)?;
        state.add("trainer.step", Tensor::new(vec![1], vec![self.step as f64])?, false)?;
        write_checkpoint(&dir.join(STATE_FILE), &state)?;
        let run = RunConfig { model: self.model.config.clone(), train: self.config.clone() };
        let path = dir.join(CONFIG_FILE);
        let json = serde_json::to_string_pretty(&run).map_err(|e| Error::json(&path, e))?;
        crate::tensor::checkpoint::write_atomic(&path, json.as_bytes())?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    /// Restores weights, optimizer moments and the step counter from `dir`.
    pub fn resume(dir: &Path, samples: &[TrainSample], overrides: Option<TrainConfig>) -> Result<Self> {
        let run = RunConfig::load(dir)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let (model, store) = CocaModel::load(run.model, &dir.join(MODEL_FILE))?;
        let config = overrides.unwrap_or(run.train);
        let mut trainer = Trainer::new(model, store, vocab, config, samples)?;
        let state_path = dir.join(STATE_FILE);
        let state = read_checkpoint(&state_path)?;
        trainer.optimizer = AdamW::from_state(trainer.config.optimizer, &trainer.store, &state)?;
        trainer.step = state
            .by_name("trainer.step")
            .map(|p| p.tensor.data()[0] as usize)
            .ok_or_else(|| Error::Checkpoint { path: state_path.clone(), detail: "missing trainer.step".into() })?;
        Ok(trainer)
    }
}

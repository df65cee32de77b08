//! The assembled model: tokenizer, scene and text encoders, projection
//! heads, temperature, caption decoder and the optional box head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxhead::{BoxHead, BoxHeadConfig};
use crate::contrastive::{self, ContrastiveConfig, ContrastiveState, ProjectionHeads};
use crate::decoder::{total_loss, CaptionDecoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::pointcloud::{make_patches, PatchSet, PointCloud, PointEmbedder};
use crate::scene::{SceneEncoder, SceneEncoderConfig, SceneTokens};
use crate::tensor::{read_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::text::{TextBatch, TextEncoder, TextEncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocaConfig {
    /// Per-point feature count `F` (point width is `3 + F`).
    pub n_features: usize,
    /// Points per patch `K`.
    pub patch_size: usize,
    pub scene: SceneEncoderConfig,
    pub text: TextEncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub box_head: Option<BoxHeadConfig>,
}

impl CocaConfig {
    /// Desk-scale defaults: M=64, K=16, D_p=64, 4-layer 128-wide encoders,
    /// 2-layer decoder.
    pub fn desk(vocab_size: usize, n_features: usize) -> Self {
        let mut c = CocaConfig {
            n_features,
            patch_size: 16,
            scene: SceneEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            decoder: DecoderConfig::default(),
            box_head: None,
        };
        c.set_vocab_size(vocab_size);
        c
    }

    /// Small widths for fast CPU experiments.
    pub fn small(vocab_size: usize, n_features: usize) -> Self {
        let mut c = CocaConfig {
            n_features,
            patch_size: 16,
            scene: SceneEncoderConfig { layers: 2, heads: 2, dim: 32, mlp_ratio: 2, task_tokens: 2, patches: 16, patch_dim: 32 },
            text: TextEncoderConfig { layers: 2, heads: 2, dim: 32, mlp_ratio: 2, max_len: 32, vocab_size },
            contrastive: ContrastiveConfig { shared_dim: 32, ..ContrastiveConfig::default() },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                dim: 48,
                mlp_ratio: 2,
                vocab_size,
                max_decode_len: 24,
                memory_dim: 32,
            },
            box_head: None,
        };
        c.set_vocab_size(vocab_size);
        c
    }

    /// Smallest complete model, used for gradient checks.
    pub fn tiny(vocab_size: usize, n_features: usize) -> Self {
        let mut c = CocaConfig {
            n_features,
            patch_size: 4,
            scene: SceneEncoderConfig { layers: 1, heads: 2, dim: 4, mlp_ratio: 2, task_tokens: 2, patches: 8, patch_dim: 3 },
            text: TextEncoderConfig { layers: 1, heads: 2, dim: 4, mlp_ratio: 2, max_len: 8, vocab_size },
            contrastive: ContrastiveConfig { shared_dim: 8, ..ContrastiveConfig::default() },
            decoder: DecoderConfig { layers: 1, heads: 2, dim: 4, mlp_ratio: 2, vocab_size, max_decode_len: 8, memory_dim: 4 },
            box_head: None,
        };
        c.set_vocab_size(vocab_size);
        c
    }

    pub fn set_vocab_size(&mut self, vocab_size: usize) {
        self.text.vocab_size = vocab_size;
        self.decoder.vocab_size = vocab_size;
        self.decoder.memory_dim = self.scene.dim;
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.vocab_size != self.decoder.vocab_size {
            return Err(Error::invalid("text encoder and decoder vocabularies differ"));
        }
        if self.decoder.memory_dim != self.scene.dim {
            return Err(Error::invalid("decoder memory width must equal the scene encoder width"));
        }
        if self.patch_size == 0 || self.scene.patches == 0 {
            return Err(Error::invalid("patch count and patch size must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// FPS/kNN grouping is deterministic, so it is computed once per cloud.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub patches: PatchSet,
}

#[derive(Clone, Debug)]
pub struct CocaModel {
    pub config: CocaConfig,
    pub tokenizer: PointEmbedder,
    pub scene: SceneEncoder,
    pub text: TextEncoder,
    pub heads: ProjectionHeads,
    pub contrastive: ContrastiveState,
    pub decoder: CaptionDecoder,
    pub box_head: Option<BoxHead>,
}

/// One training example after preprocessing.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub scene: &'a PreparedScene,
    /// `[CLS, BOS, …, EOS]`.
    pub caption: &'a [usize],
    /// Cached frozen text feature, `[D_t]`.
    pub text_feature: &'a [f64],
    pub boxes: &'a [Box3D],
}

#[derive(Clone, Copy, Debug)]
pub struct StepGraph {
    pub sim: Var,
    pub l_con: Var,
    pub l_cap: Option<Var>,
    pub l_box: Option<Var>,
    pub total: Var,
}

impl CocaModel {
    /// Builds the model; every initial value is drawn from `seed`.
    pub fn new(config: CocaConfig, seed: u64) -> Result<(Self, ParamStore)> {
        Self::with_envelope(config, seed, None)
    }

    /// As [`Self::new`], seeding the box head (if configured) with `envelope`.
    pub fn with_envelope(config: CocaConfig, seed: u64, envelope: Option<Box3D>) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = PointEmbedder::new(&mut store, 3 + config.n_features, config.scene.patch_dim, &mut rng)?;
        let scene = SceneEncoder::new(&mut store, config.scene.clone(), &mut rng)?;
        let text = TextEncoder::new(&mut store, config.text.clone(), &mut rng)?;
        let heads =
            ProjectionHeads::new(&mut store, config.scene.dim, config.text.dim, config.contrastive.shared_dim, &mut rng)?;
        let contrastive = ContrastiveState::new(&mut store, config.contrastive.tau_init, config.contrastive.symmetric)?;
        let decoder = CaptionDecoder::new(&mut store, config.decoder.clone(), &mut rng)?;
        let box_head = match &config.box_head {
            Some(bc) => {
                let env = envelope.unwrap_or(Box3D { center: [0.0; 3], size: [1.0; 3] });
                Some(BoxHead::new(&mut store, config.scene.dim, bc.clone(), env, &mut rng)?)
            }
            None => None,
        };
        let model = CocaModel { config, tokenizer, scene, text, heads, contrastive, decoder, box_head };
        Ok((model, store))
    }

    /// Rebuilds the architecture from `config` and loads weights.
    pub fn load(config: CocaConfig, checkpoint: &Path) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::new(config, 0)?;
        let saved = read_checkpoint(checkpoint)?;
        store.load_from(&saved).map_err(|e| Error::Checkpoint { path: checkpoint.to_path_buf(), detail: e.to_string() })?;
        Ok((model, store))
    }

    pub fn prepare(&self, cloud: PointCloud) -> Result<PreparedScene> {
        if cloud.n_features() != self.config.n_features {
            return Err(Error::shape(
                "prepare_scene",
                format!("model expects {} point features, cloud has {}", self.config.n_features, cloud.n_features()),
            ));
        }
        let patches = make_patches(&cloud, self.config.scene.patches, self.config.patch_size)?;
        Ok(PreparedScene { cloud, patches })
    }

    pub fn encode_scene(&self, g: &mut Graph, scene: &PreparedScene) -> Result<SceneTokens> {
        let tokens = self.tokenizer.embed_patches(g, &scene.cloud, &scene.patches)?;
        self.scene.encode(g, tokens)
    }

    /// Frozen text features, one row per caption.
    pub fn text_features(&self, store: &ParamStore, captions: &[Vec<usize>]) -> Result<Tensor> {
        self.text.features(store, &TextBatch::new(captions))
    }

    /// Builds every loss for one batch. With `lambda == 0` the decoder graph
    /// is skipped entirely.
    pub fn step_graph(&self, g: &mut Graph, batch: &[Example], lambda: f64, box_weight: f64) -> Result<StepGraph> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut globals = Vec::with_capacity(batch.len());
        let mut tokens = Vec::with_capacity(batch.len());
        for ex in batch {
            let t = self.encode_scene(g, ex.scene)?;
            globals.push(t.global);
            tokens.push(t);
        }
        let f_enc = g.concat_rows(&globals)?;
        let scene_emb = contrastive::project_and_normalize(g, f_enc, &self.heads.scene)?;
        let d_t = self.config.text.dim;
        let text_data: Vec<f64> = batch.iter().flat_map(|ex| ex.text_feature.iter().copied()).collect();
        let text = g.constant(Tensor::new(vec![batch.len(), d_t], text_data)?)?;
        let text_emb = contrastive::project_and_normalize(g, text, &self.heads.text)?;
        let sim = contrastive::similarity_matrix(g, scene_emb, text_emb)?;
        let l_con = self.contrastive.loss(g, sim)?;

        let l_cap = if lambda > 0.0 {
            let mut parts = Vec::with_capacity(batch.len());
            for (ex, t) in batch.iter().zip(&tokens) {
                let memory = self.decoder.memory(g, t)?;
                parts.push(self.decoder.caption_loss_for(g, ex.caption, &memory)?);
            }
            Some(mean_of(g, &parts)?)
        } else {
            None
        };
        let zero = g.constant(Tensor::scalar(0.0))?;
        let mut total = total_loss(g, l_con, l_cap.unwrap_or(zero), lambda)?;

        let l_box = match (&self.box_head, box_weight > 0.0) {
            (Some(head), true) => {
                let mut parts = Vec::with_capacity(batch.len());
                for (ex, t) in batch.iter().zip(&tokens) {
                    let out = head.forward(g, t.global)?;
                    parts.push(head.loss(g, out, ex.boxes)?);
                }
                let l = mean_of(g, &parts)?;
                let weighted = g.scale(l, box_weight)?;
                total = g.add(total, weighted)?;
                Some(l)
            }
            _ => None,
        };
        Ok(StepGraph { sim, l_con, l_cap, l_box, total })
    }
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}

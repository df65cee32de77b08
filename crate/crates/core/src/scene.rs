//! Scene encoder: patch tokens followed by learnable task tokens, learned
//! positions, and a frozen transformer backbone. The global scene feature is
//! the mean of the task-token outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{EncoderBlock, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BACKBONE_PREFIX: &str = "scene_backbone.";
pub const TASK_TOKENS_PREFIX: &str = "task_tokens.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub task_tokens: usize,
    /// Patch count `M`; fixes the length of the positional table.
    pub patches: usize,
    /// Width `D_p` of incoming patch tokens.
    pub patch_dim: usize,
}

impl Default for SceneEncoderConfig {
    fn default() -> Self {
        SceneEncoderConfig { layers: 4, heads: 4, dim: 128, mlp_ratio: 4, task_tokens: 4, patches: 64, patch_dim: 64 }
    }
}

/// `m_t × D_p` trainable prompt embeddings; token `j` starts as the
/// constant vector `j + 1`.
#[derive(Clone, Debug)]
pub struct TaskTokens {
    pub embed: ParamId,
    pub count: usize,
}

impl TaskTokens {
    pub fn new(store: &mut ParamStore, count: usize, dim: usize) -> Result<Self> {
        let data = (0..count).flat_map(|j| std::iter::repeat_n((j + 1) as f64, dim)).collect();
        let embed = store.add(format!("{TASK_TOKENS_PREFIX}embed"), Tensor::new(vec![count, dim], data)?, false)?;
        Ok(TaskTokens { embed, count })
    }
}

/// All encoder outputs for one scene.
#[derive(Clone, Copy, Debug)]
pub struct SceneTokens {
    /// `[M + m_t, D]`, patch rows first.
    pub token_outputs: Var,
    /// `[1, D]` mean of the task-token output rows.
    pub global: Var,
    pub patches: usize,
    pub task_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub config: SceneEncoderConfig,
    pub adapter: Option<Linear>,
    pub pos_embed: ParamId,
    pub task: TaskTokens,
    pub blocks: Vec<EncoderBlock>,
}

impl SceneEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: SceneEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!(
                "scene encoder dim {} not divisible by {} heads",
                config.dim, config.heads
            )));
        }
        if config.task_tokens == 0 {
            return Err(Error::invalid("scene encoder needs at least one task token"));
        }
        let adapter = if config.patch_dim != config.dim {
            Some(Linear::new(store, "scene_encoder.adapter", config.patch_dim, config.dim, true, false, rng)?)
        } else {
            None
        };
        let seq = config.patches + config.task_tokens;
        let pos_embed = store.add_normal("scene_encoder.pos_embed", vec![seq, config.dim], 0.02, false, rng)?;
        let task = TaskTokens::new(store, config.task_tokens, config.patch_dim)?;
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("{BACKBONE_PREFIX}layers.{l}");
                EncoderBlock::new(store, &name, config.dim, config.heads, config.mlp_ratio, true, rng)
            })
            .collect::<Result<_>>()?;
        Ok(SceneEncoder { config, adapter, pos_embed, task, blocks })
    }

    /// Encodes `[M, D_p]` patch tokens into `M + m_t` output tokens and the
    /// pooled global feature.
    pub fn encode(&self, g: &mut Graph, patch_tokens: Var) -> Result<SceneTokens> {
        let pt = g.value(patch_tokens);
        if pt.shape() != [self.config.patches, self.config.patch_dim] {
            return Err(Error::shape(
                "encode_scene",
                format!("expected [{}, {}] patch tokens, got {:?}", self.config.patches, self.config.patch_dim, pt.shape()),
            ));
        }
        let task = g.param(self.task.embed)?;
        let seq = g.concat_rows(&[patch_tokens, task])?;
        let seq = match &self.adapter {
            Some(a) => a.forward(g, seq)?,
            None => seq,
        };
        let pos = g.param(self.pos_embed)?;
        let mut x = g.add(seq, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let task_out = g.slice_rows(x, self.config.patches, self.config.task_tokens)?;
        let global = g.mean_rows(task_out)?;
        Ok(SceneTokens {
            token_outputs: x,
            global,
            patches: self.config.patches,
            task_tokens: self.config.task_tokens,
        })
    }
}

/// Marks every scene backbone parameter frozen. Idempotent.
pub fn freeze_backbone(store: &mut ParamStore) -> usize {
    store.freeze_prefix(BACKBONE_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(config: SceneEncoderConfig) -> (ParamStore, SceneEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let e = SceneEncoder::new(&mut s, config, &mut rng).unwrap();
        (s, e)
    }

    fn small(layers: usize, task_tokens: usize) -> SceneEncoderConfig {
        SceneEncoderConfig { layers, heads: 1, dim: 3, mlp_ratio: 2, task_tokens, patches: 2, patch_dim: 3 }
    }

    #[test]
    fn task_tokens_start_enumerated_and_trainable() {
        let (s, e) = encoder(small(1, 3));
        let p = s.get(e.task.embed);
        assert!(!p.frozen);
        assert_eq!(p.tensor.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        assert!(s.iter().filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX)).all(|(_, p)| p.frozen));
    }

    #[test]
    fn zero_layer_backbone_is_identity() {
        let (mut s, e) = encoder(small(0, 2));
        s.get_mut(e.pos_embed).tensor = Tensor::zeros(vec![4, 3]);
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::from_rows(&[vec![0.5, 1.0, -1.0], vec![2.0, 0.0, 0.0]]).unwrap()).unwrap();
        let out = e.encode(&mut g, pt).unwrap();
        let v = g.value(out.token_outputs);
        assert_eq!(v.shape(), &[4, 3]);
        assert_eq!(v.row_slice(0), &[0.5, 1.0, -1.0]);
        assert_eq!(v.row_slice(3), &[2.0, 2.0, 2.0]);
        assert_eq!(g.value(out.global).data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn single_task_token_global_is_its_output_row() {
        let (s, e) = encoder(small(2, 1));
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.0, -1.0, 4.0]]).unwrap()).unwrap();
        let out = e.encode(&mut g, pt).unwrap();
        assert_eq!(g.value(out.token_outputs).row_slice(2), g.value(out.global).data());
    }

    #[test]
    fn one_layer_hand_oracle() {
        // M=1, m_t=1, D=2, one head. Weights are set by hand and the
        // expected output is recomputed with plain arithmetic.
        let config = SceneEncoderConfig { layers: 1, heads: 1, dim: 2, mlp_ratio: 1, task_tokens: 1, patches: 1, patch_dim: 2 };
        let (mut s, e) = encoder(config);
        s.get_mut(e.pos_embed).tensor = Tensor::zeros(vec![2, 2]);
        let b = &e.blocks[0];
        for l in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
            s.get_mut(l.weight).tensor = Tensor::eye(2);
        }
        // MLP contributes zero.
        s.get_mut(b.mlp.fc2.weight).tensor = Tensor::zeros(vec![2, 2]);

        let patch = [3.0, 1.0];
        let task = [1.0, 1.0];
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::row(patch.to_vec())).unwrap();
        let out = e.encode(&mut g, pt).unwrap();

        // ln1: patch -> [1, -1]; task (constant row) -> [0, 0].
        let eps: f64 = 1e-5;
        let a = 1.0 / (1.0 + eps).sqrt();
        let h = [[a, -a], [0.0, 0.0]];
        // task query [0,0] gives equal logits -> mean of values.
        let attn_task = [(h[0][0] + h[1][0]) / 2.0, (h[0][1] + h[1][1]) / 2.0];
        let expected = [task[0] + attn_task[0], task[1] + attn_task[1]];
        let got = g.value(out.global).data();
        assert!((got[0] - expected[0]).abs() < 1e-12, "{got:?} vs {expected:?}");
        assert!((got[1] - expected[1]).abs() < 1e-12);

        // Cross-check the patch row against the shared attention routine.
        let mut g2 = Graph::detached();
        let hv = g2.constant(Tensor::from_rows(&[h[0].to_vec(), h[1].to_vec()]).unwrap()).unwrap();
        let y = attention(&mut g2, hv, hv, hv, 1, false).unwrap();
        let row0 = g2.value(y).row_slice(0);
        let enc_row0 = g.value(out.token_outputs).row_slice(0);
        assert!((enc_row0[0] - (patch[0] + row0[0])).abs() < 1e-12);
    }

    #[test]
    fn output_count_is_m_plus_task_tokens() {
        let (s, e) = encoder(small(1, 3));
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let out = e.encode(&mut g, pt).unwrap();
        assert_eq!(g.value(out.token_outputs).rows(), 5);
    }

    #[test]
    fn wrong_patch_width_is_rejected() {
        let (s, e) = encoder(small(1, 1));
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::zeros(vec![2, 4])).unwrap();
        assert!(matches!(e.encode(&mut g, pt), Err(Error::Shape { .. })));
    }

    #[test]
    fn adapter_created_when_widths_differ() {
        let config = SceneEncoderConfig { patch_dim: 5, ..small(1, 1) };
        let (s, e) = encoder(config);
        assert!(e.adapter.is_some());
        let mut g = Graph::new(&s);
        let pt = g.constant(Tensor::zeros(vec![2, 5])).unwrap();
        let out = e.encode(&mut g, pt).unwrap();
        assert_eq!(g.value(out.global).shape(), &[1, 3]);
    }

    #[test]
    fn freeze_is_idempotent() {
        let (mut s, _) = encoder(small(1, 1));
        let n = freeze_backbone(&mut s);
        let h = s.frozen_hash();
        assert_eq!(freeze_backbone(&mut s), n);
        assert_eq!(h, s.frozen_hash());
    }
}

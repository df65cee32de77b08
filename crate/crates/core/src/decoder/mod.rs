//! Autoregressive caption decoder: causal self-attention, cross-attention
//! over every scene token, and a position-wise MLP per layer.

pub mod search;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneTokens;
use crate::tensor::nn::{Activation, KeyValue, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{BOS, PAD};

pub use search::{beam_search, greedy, CaptionHypothesis, DecodeMode, NextTokenScorer};

pub const PREFIX: &str = "decoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_decode_len: usize,
    /// Width of the scene tokens used as cross-attention memory.
    pub memory_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { layers: 2, heads: 4, dim: 128, mlp_ratio: 4, vocab_size: 512, max_decode_len: 32, memory_dim: 128 }
    }
}

impl DecoderConfig {
    pub fn d_k(&self) -> usize {
        self.dim / self.heads.max(1)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub config: DecoderConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub memory_ln: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

/// Per-scene cross-attention keys and values, detached from any graph so a
/// single encoding can serve every decoding step.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub memory: Vec<(Tensor, Tensor)>,
    pub ids: Vec<usize>,
    pub step: usize,
}

impl CaptionDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!("decoder dim {} not divisible by {} heads", config.dim, config.heads)));
        }
        if config.max_decode_len == 0 {
            return Err(Error::invalid("decoder max_decode_len must be positive"));
        }
        let (d, v) = (config.dim, config.vocab_size);
        let token_embed = store.add_normal(format!("{PREFIX}token_embed"), vec![v, d], 0.1, false, rng)?;
        let pos_embed = store.add_normal(format!("{PREFIX}pos_embed"), vec![config.max_decode_len, d], 0.02, false, rng)?;
        let memory_ln = LayerNorm::new(store, &format!("{PREFIX}memory_ln"), config.memory_dim, false)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("{PREFIX}layers.{l}");
            layers.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, false)?,
                self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), d, d, config.heads, false, rng)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, false)?,
                cross_attn: MultiHeadAttention::new(
                    store,
                    &format!("{n}.cross_attn"),
                    d,
                    config.memory_dim,
                    config.heads,
                    false,
                    rng,
                )?,
                ln3: LayerNorm::new(store, &format!("{n}.ln3"), d, false)?,
                mlp: Mlp::new(store, &format!("{n}.mlp"), d, d * config.mlp_ratio, d, Activation::Gelu, false, rng)?,
            });
        }
        let ln_final = LayerNorm::new(store, &format!("{PREFIX}ln_final"), d, false)?;
        let head = Linear::new(store, &format!("{PREFIX}head"), d, v, true, false, rng)?;
        Ok(CaptionDecoder { config, token_embed, pos_embed, memory_ln, layers, ln_final, head })
    }

    /// Projects all `M + m_t` scene token outputs into per-layer keys/values.
    pub fn memory(&self, g: &mut Graph, scene: &SceneTokens) -> Result<Vec<KeyValue>> {
        self.memory_from(g, scene.token_outputs)
    }

    pub fn memory_from(&self, g: &mut Graph, tokens: Var) -> Result<Vec<KeyValue>> {
        if g.value(tokens).cols() != self.config.memory_dim {
            return Err(Error::shape(
                "decoder_memory",
                format!("expected width {}, got {:?}", self.config.memory_dim, g.value(tokens).shape()),
            ));
        }
        let m = self.memory_ln.forward(g, tokens)?;
        self.layers.iter().map(|l| l.cross_attn.key_value(g, m)).collect()
    }

    /// `[L, vocab]` logits for decoder input `ids` (starting with BOS).
    pub fn forward(&self, g: &mut Graph, ids: &[usize], scene: &SceneTokens) -> Result<Var> {
        let memory = self.memory(g, scene)?;
        self.forward_with_memory(g, ids, &memory)
    }

    pub fn forward_with_memory(&self, g: &mut Graph, ids: &[usize], memory: &[KeyValue]) -> Result<Var> {
        if ids.first() != Some(&BOS) {
            return Err(Error::invalid("decoder input must start with BOS"));
        }
        if ids.len() > self.config.max_decode_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max: self.config.max_decode_len });
        }
        if memory.len() != self.layers.len() {
            return Err(Error::invalid(format!("{} memory entries for {} layers", memory.len(), self.layers.len())));
        }
        let table = g.param(self.token_embed)?;
        let tok = g.gather_rows(table, ids)?;
        let pos_table = g.param(self.pos_embed)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        for (layer, kv) in self.layers.iter().zip(memory) {
            let h = layer.ln1.forward(g, x)?;
            let a = layer.self_attn.forward(g, h, h, true)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, x)?;
            let c = layer.cross_attn.attend(g, h, *kv, false)?;
            x = g.add(x, c)?;
            let h = layer.ln3.forward(g, x)?;
            let m = layer.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let h = self.ln_final.forward(g, x)?;
        self.head.forward(g, h)
    }

    /// Teacher-forced caption loss for one tokenized caption
    /// `[CLS, BOS, w…, EOS]`: input `[BOS, w…]`, target `[w…, EOS]`.
    pub fn caption_loss_for(&self, g: &mut Graph, tokenized: &[usize], memory: &[KeyValue]) -> Result<Var> {
        let (input, target) = teacher_forcing_split(tokenized)?;
        let logits = self.forward_with_memory(g, input, memory)?;
        caption_loss(g, logits, target)
    }

    /// Detached cross-attention cache for generation.
    pub fn state(&self, g: &mut Graph, scene: &SceneTokens) -> Result<DecoderState> {
        let kv = self.memory(g, scene)?;
        Ok(DecoderState {
            memory: kv.iter().map(|kv| (g.value(kv.keys).clone(), g.value(kv.values).clone())).collect(),
            ids: vec![BOS],
            step: 0,
        })
    }

    /// Log-softmax of the last-position logits after `prefix`.
    pub fn next_log_probs(&self, store: &ParamStore, state: &DecoderState, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(store);
        let memory = state
            .memory
            .iter()
            .map(|(k, v)| Ok(KeyValue { keys: g.constant(k.clone())?, values: g.constant(v.clone())? }))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.forward_with_memory(&mut g, prefix, &memory)?;
        let t = g.value(logits);
        Ok(log_softmax(t.row_slice(t.rows() - 1)))
    }

    /// Greedy or beam decoding; the returned ids exclude BOS and EOS.
    pub fn generate(
        &self,
        store: &ParamStore,
        state: &mut DecoderState,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<CaptionHypothesis> {
        // Prefix length (BOS + generated) must stay within the position table.
        let max_len = max_len.min(self.config.max_decode_len);
        let mut scorer = DecoderScorer { decoder: self, store, state };
        let hyp = match mode {
            DecodeMode::Greedy => greedy(&mut scorer, max_len)?,
            DecodeMode::Beam(width) => beam_search(&mut scorer, width, max_len)?,
        };
        state.ids = std::iter::once(BOS).chain(hyp.ids.iter().copied()).collect();
        state.step = hyp.ids.len();
        Ok(hyp)
    }
}

struct DecoderScorer<'a> {
    decoder: &'a CaptionDecoder,
    store: &'a ParamStore,
    state: &'a DecoderState,
}

impl NextTokenScorer for DecoderScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.decoder.next_log_probs(self.store, self.state, prefix)
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Splits `[CLS, BOS, w…, EOS]` into decoder input and shifted target.
pub fn teacher_forcing_split(tokenized: &[usize]) -> Result<(&[usize], &[usize])> {
    let start = tokenized.iter().position(|&t| t == BOS).ok_or_else(|| Error::invalid("caption has no BOS"))?;
    let body = &tokenized[start..];
    if body.len() < 2 {
        return Err(Error::invalid("caption needs at least BOS and one target token"));
    }
    Ok((&body[..body.len() - 1], &body[1..]))
}

/// `−Σ_t log P(y_t | y_<t)` over non-PAD reference positions.
pub fn caption_loss(g: &mut Graph, logits: Var, reference: &[usize]) -> Result<Var> {
    let rows = g.value(logits).rows();
    if rows != reference.len() {
        return Err(Error::shape("caption_loss", format!("{rows} logit rows for {} reference tokens", reference.len())));
    }
    let targets: Vec<Option<usize>> = reference.iter().map(|&t| (t != PAD).then_some(t)).collect();
    g.cross_entropy_sum(logits, &targets)
}

/// `l_con + λ·l_cap`.
pub fn total_loss(g: &mut Graph, l_con: Var, l_cap: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = g.scale(l_cap, lambda)?;
    g.add(l_con, weighted)
}

pub fn total_loss_value(l_con: f64, l_cap: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(l_con + lambda * l_cap)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("caption loss weight must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

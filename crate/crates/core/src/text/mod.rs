//! Caption tokenization and the frozen text encoder.

pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use vocab::{normalize, Vocabulary, BOS, CLS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::tensor::nn::EncoderBlock;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BACKBONE_PREFIX: &str = "text_backbone.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { layers: 4, heads: 4, dim: 128, mlp_ratio: 4, max_len: 64, vocab_size: 512 }
    }
}

/// Right-padded token id matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(sequences: &[Vec<usize>]) -> Self {
        let max = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let token_ids = sequences
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(max, PAD);
                row
            })
            .collect();
        TextBatch { token_ids, lengths: sequences.iter().map(Vec::len).collect() }
    }

    pub fn from_texts<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S]) -> Self {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| vocab.tokenize(t.as_ref())).collect();
        Self::new(&seqs)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.token_ids[b][..self.lengths[b]]
    }
}

/// Token and position embeddings followed by bidirectional transformer
/// blocks; every weight lives under [`BACKBONE_PREFIX`] and is frozen.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!("text encoder dim {} not divisible by {} heads", config.dim, config.heads)));
        }
        let token_embed =
            store.add_normal(format!("{BACKBONE_PREFIX}token_embed"), vec![config.vocab_size, config.dim], 1.0, true, rng)?;
        let pos_embed =
            store.add_normal(format!("{BACKBONE_PREFIX}pos_embed"), vec![config.max_len, config.dim], 0.1, true, rng)?;
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("{BACKBONE_PREFIX}layers.{l}");
                EncoderBlock::new(store, &name, config.dim, config.heads, config.mlp_ratio, true, rng)
            })
            .collect::<Result<_>>()?;
        Ok(TextEncoder { config, token_embed, pos_embed, blocks })
    }

    /// Final-layer output at position 0 (the CLS slot) as a `[1, D_t]` row.
    pub fn encode_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max: self.config.max_len });
        }
        let table = g.param(self.token_embed)?;
        let tok = g.gather_rows(table, ids)?;
        let pos_table = g.param(self.pos_embed)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        g.slice_rows(x, 0, 1)
    }

    /// `[B, D_t]` CLS features. PAD positions are excluded from attention by
    /// encoding each sequence at its true length.
    pub fn encode_batch(&self, g: &mut Graph, batch: &TextBatch) -> Result<Var> {
        let rows = (0..batch.len()).map(|b| self.encode_ids(g, batch.sequence(b))).collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// Plain-value CLS features for a batch (inference only).
    pub fn features(&self, store: &ParamStore, batch: &TextBatch) -> Result<Tensor> {
        let mut g = Graph::no_grad(store);
        let f = self.encode_batch(&mut g, batch)?;
        Ok(g.value(f).clone())
    }
}

//! Greedy and beam search over any next-token scorer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Log-probabilities of the next token after `prefix` (which starts with BOS).
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionHypothesis {
    /// Generated ids without BOS and EOS.
    pub ids: Vec<usize>,
    /// Sum of per-step log-probabilities, EOS included.
    pub log_prob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    /// Scored length: generated tokens plus the EOS step when finished.
    pub fn length(&self) -> usize {
        (self.ids.len() + usize::from(self.finished)).max(1)
    }

    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.length() as f64
    }

    fn prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.ids.iter().copied()).collect()
    }
}

fn checked(scorer: &mut impl NextTokenScorer, prefix: &[usize]) -> Result<Vec<f64>> {
    let lp = scorer.log_probs(prefix)?;
    if lp.len() != scorer.vocab_size() {
        return Err(Error::shape("generate", format!("scorer returned {} entries for vocab {}", lp.len(), scorer.vocab_size())));
    }
    Ok(lp)
}

/// Argmax at each step, lowest id on ties, for at most `max_len` steps.
pub fn greedy(scorer: &mut impl NextTokenScorer, max_len: usize) -> Result<CaptionHypothesis> {
    let mut hyp = CaptionHypothesis { ids: Vec::new(), log_prob: 0.0, finished: false };
    for _ in 0..max_len {
        let lp = checked(scorer, &hyp.prefix())?;
        let best = (0..lp.len()).fold(0, |b, j| if lp[j] > lp[b] { j } else { b });
        hyp.log_prob += lp[best];
        if best == EOS {
            hyp.finished = true;
            break;
        }
        hyp.ids.push(best);
    }
    Ok(hyp)
}

/// Keeps the `width` highest cumulative log-probability hypotheses per step;
/// finished ones compete unchanged. The winner maximizes log-prob / length.
pub fn beam_search(scorer: &mut impl NextTokenScorer, width: usize, max_len: usize) -> Result<CaptionHypothesis> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let mut beams = vec![CaptionHypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }];
    for _ in 0..max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let lp = checked(scorer, &hyp.prefix())?;
            for (tok, l) in lp.iter().enumerate() {
                let mut next = hyp.clone();
                next.log_prob += l;
                if tok == EOS {
                    next.finished = true;
                } else {
                    next.ids.push(tok);
                }
                candidates.push(next);
            }
        }
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(width);
        beams = candidates;
    }
    beams.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
    Ok(beams.swap_remove(0))
}

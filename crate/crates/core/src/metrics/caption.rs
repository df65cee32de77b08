//! N-gram caption metrics over pre-tokenized words.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub type Ngram = Vec<String>;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

pub fn ngram_counts(words: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut counts = HashMap::new();
    if n > 0 && words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-free BLEU-4 for one candidate: clipped precisions n = 1..4,
/// uniform weights, brevity penalty against the closest reference length
/// (shorter wins ties).
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        for rc in &ref_counts {
            for (g, c) in rc {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(*c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Best LCS F-measure over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// One candidate with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Per-item CIDEr: `10 · mean_n mean_r cos(tfidf_n(c), tfidf_n(r))`, with
/// `idf(g) = ln(|I| / df(g))` and `df` counting items whose references
/// contain `g`.
pub fn cider(items: &[CorpusItem]) -> Result<Vec<f64>> {
    if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
        return Err(Error::invalid(format!("corpus item {i} has no references")));
    }
    let n_items = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<Ngram, usize> = HashMap::new();
        for it in items {
            let seen: HashSet<Ngram> = it.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vector = |words: &[String]| -> HashMap<Ngram, f64> {
            let counts = ngram_counts(words, n);
            let total: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, c)| {
                    let idf = (n_items / df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
                    (g, c as f64 / total as f64 * idf)
                })
                .collect()
        };
        for (it, score) in items.iter().zip(scores.iter_mut()) {
            let c = vector(&it.candidate);
            let cos_sum: f64 = it.references.iter().map(|r| cosine(&c, &vector(r))).sum();
            *score += cos_sum / it.references.len() as f64;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s / CIDER_MAX_N as f64).collect())
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Greedy unigram alignment: exact matches first, then Porter-stem
/// matches. Returns `(candidate_pos, reference_pos)` pairs sorted by
/// candidate position.
pub fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stems_c: Vec<String> = candidate.iter().map(|w| porter_stemmer::stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| porter_stemmer::stem(w)).collect();
    for stage in 0..2 {
        for i in 0..candidate.len() {
            if used_c[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !used_r[j] && if stage == 0 { candidate[i] == reference[j] } else { stems_c[i] == stems_r[j] }
            });
            if let Some(j) = hit {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Runs of matches contiguous in both sentences.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
}

/// `Fmean · (1 − 0.5 (chunks/m)³)` with `Fmean = 10PR / (R + 9P)`, best
/// over references.
pub fn meteor_lite(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let pairs = align(candidate, r);
            let m = pairs.len();
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let fmean = 10.0 * p * rec / (rec + 9.0 * p);
            let frag = chunk_count(&pairs) as f64 / m as f64;
            fmean * (1.0 - 0.5 * frag.powi(3))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert!((bleu4(&w("the red chair is large"), &[w("the red chair is large")]) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&w("a b c d"), &[w("e f g h")]), 0.0);
        assert_eq!(bleu4(&[], &[w("a")]), 0.0);
    }

    #[test]
    fn rouge_cases() {
        assert!((rouge_l(&w("a b c"), &[w("a b c")]) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &[w("c d")]), 0.0);
        assert_eq!(lcs_len(&w("a b c d"), &w("a c b d")), 3);
    }

    #[test]
    fn meteor_cases() {
        let m = meteor_lite(&w("the red chair"), &[w("the red chair")]);
        assert!((m - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(meteor_lite(&w("a b"), &[w("c d")]), 0.0);
        assert_eq!(align(&w("chairs"), &w("chair")), vec![(0, 0)]);
    }
}

//! Brute-force reference implementations of the caption metrics, written
//! without sharing code with the library.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

pub const WORDS: &[&str] = &[
    "the", "a", "red", "blue", "chair", "chairs", "table", "tables", "lamp", "is", "on", "next", "to", "small", "box",
    "boxes", "sitting", "sits", "left",
];

pub fn sentence<R: Rng>(rng: &mut R, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| WORDS.choose(rng).unwrap().to_string()).collect()
}

fn grams(words: &[String], n: usize) -> Vec<Vec<String>> {
    if words.len() < n {
        return Vec::new();
    }
    (0..=words.len() - n).map(|i| words[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu4(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let cg = grams(cand, n);
        if cg.is_empty() {
            return 0.0;
        }
        let mut matched = 0;
        for g in distinct(&cg) {
            let best = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
            matched += count(&cg, &g).min(best);
        }
        if matched == 0 {
            return 0.0;
        }
        product *= matched as f64 / cg.len() as f64;
    }
    let c = cand.len() as f64;
    let mut best_r = f64::INFINITY;
    for r in refs {
        let l = r.len() as f64;
        if (l - c).abs() < (best_r - c).abs() || ((l - c).abs() == (best_r - c).abs() && l < best_r) {
            best_r = l;
        }
    }
    let bp = if c > best_r { 1.0 } else { (1.0 - best_r / c).exp() };
    bp * product.powf(0.25)
}

fn is_subsequence(sub: &[String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|w| it.any(|x| x == w))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i].clone()).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs(cand, r) as f64;
        if l > 0.0 {
            let (p, rc) = (l / cand.len() as f64, l / r.len() as f64);
            best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
        }
    }
    best
}

pub fn cider(items: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<f64> {
    let total = items.len() as f64;
    let mut out = vec![0.0; items.len()];
    for n in 1..=4 {
        let df = |g: &[String]| -> f64 {
            let d = items.iter().filter(|(_, refs)| refs.iter().any(|r| count(&grams(r, n), g) > 0)).count();
            d.max(1) as f64
        };
        let tfidf = |words: &[String]| -> Vec<(Vec<String>, f64)> {
            let all = grams(words, n);
            distinct(&all)
                .into_iter()
                .map(|g| {
                    let w = count(&all, &g) as f64 / all.len() as f64 * (total / df(&g)).ln();
                    (g, w)
                })
                .collect()
        };
        for (k, (cand, refs)) in items.iter().enumerate() {
            let cv = tfidf(cand);
            let mut acc = 0.0;
            for r in refs {
                let rv = tfidf(r);
                let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
                let (na, nb) = (norm(&cv), norm(&rv));
                if na > 0.0 && nb > 0.0 {
                    let mut dot = 0.0;
                    for (g, a) in &cv {
                        for (h, b) in &rv {
                            if g == h {
                                dot += a * b;
                            }
                        }
                    }
                    acc += (dot / (na * nb)).clamp(0.0, 1.0);
                }
            }
            out[k] += acc / refs.len() as f64;
        }
    }
    out.into_iter().map(|s| 10.0 * s / 4.0).collect()
}

pub fn meteor(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        // Candidate position -> reference position.
        let mut link: Vec<Option<usize>> = vec![None; cand.len()];
        let mut taken = vec![false; r.len()];
        for exact in [true, false] {
            for i in 0..cand.len() {
                if link[i].is_some() {
                    continue;
                }
                for j in 0..r.len() {
                    let same = if exact {
                        cand[i] == r[j]
                    } else {
                        porter_stemmer::stem(&cand[i]) == porter_stemmer::stem(&r[j])
                    };
                    if !taken[j] && same {
                        link[i] = Some(j);
                        taken[j] = true;
                        break;
                    }
                }
            }
        }
        let m = link.iter().flatten().count();
        if m == 0 {
            continue;
        }
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for (i, l) in link.iter().enumerate() {
            if let Some(j) = *l {
                if prev != Some((i.wrapping_sub(1), j.wrapping_sub(1))) {
                    chunks += 1;
                }
                prev = Some((i, j));
            } else {
                prev = None;
            }
        }
        let (p, rc) = (m as f64 / cand.len() as f64, m as f64 / r.len() as f64);
        let f = p * rc / (0.9 * p + 0.1 * rc);
        best = best.max(f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3)));
    }
    best
}

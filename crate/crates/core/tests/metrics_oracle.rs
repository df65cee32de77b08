mod common;

use coca3d::metrics::caption::{bleu4, cider, meteor_lite, rouge_l, CorpusItem};
use coca3d::metrics::{evaluate, m_at_k_iou, Box3D, EvalRecord, Metric};
use common::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64, n: usize) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let cand = oracles::sentence(&mut rng, 10);
            let refs = (0..rng.gen_range(1..=3)).map(|_| oracles::sentence(&mut rng, 10)).collect();
            (cand, refs)
        })
        .collect()
}

#[test]
fn sentence_metrics_match_brute_force() {
    for seed in 0..4 {
        for (cand, refs) in corpus(seed, 50) {
            assert!((bleu4(&cand, &refs) - oracles::bleu4(&cand, &refs)).abs() < 1e-9, "{cand:?} {refs:?}");
            assert!((rouge_l(&cand, &refs) - oracles::rouge_l(&cand, &refs)).abs() < 1e-9);
            assert!((meteor_lite(&cand, &refs) - oracles::meteor(&cand, &refs)).abs() < 1e-9);
        }
    }
}

#[test]
fn cider_matches_brute_force() {
    for seed in 0..4 {
        let c = corpus(100 + seed, 50);
        let items: Vec<CorpusItem> =
            c.iter().map(|(cand, refs)| CorpusItem { candidate: cand.clone(), references: refs.clone() }).collect();
        let got = cider(&items).unwrap();
        for (a, b) in got.iter().zip(oracles::cider(&c)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn bleu_identity_boundaries() {
    let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    assert!((bleu4(&w("a red chair on the table"), &[w("a red chair on the table")]) - 1.0).abs() < 1e-12);
    // Brevity penalty: shorter candidate loses exp(1 - r/c).
    let b = bleu4(&w("a red chair on the"), &[w("a red chair on the table")]);
    assert!((b - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
}

fn record(caption: &str, reference: &str, offset: f64) -> EvalRecord {
    let gt = Box3D::new([0.0; 3], [1.0; 3]).unwrap();
    EvalRecord {
        scene_id: None,
        object_id: None,
        predicted_box: Box3D::new([offset, 0.0, 0.0], [1.0; 3]).unwrap(),
        predicted_caption: caption.into(),
        gt_box: gt,
        references: vec![reference.into()],
        score: 1.0,
    }
}

#[test]
fn m_at_k_monotone_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(1..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let ious: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut last = f64::INFINITY;
        for k in [0.0, 0.1, 0.25, 0.5, 0.75, 1.0] {
            let v = m_at_k_iou(&scores, &ious, k).unwrap();
            assert!(v <= last + 1e-15);
            last = v;
        }
        let plain = scores.iter().sum::<f64>() / n as f64;
        assert!((m_at_k_iou(&scores, &vec![1.0; n], 0.5).unwrap() - plain).abs() < 1e-12);
    }
}

#[test]
fn evaluate_zeroes_misplaced_boxes() {
    let recs = vec![record("a red chair on the desk", "a red chair on the desk", 0.0), record("a red chair on the desk", "a red chair on the desk", 0.5)];
    let r = evaluate(&recs, &[Metric::Bleu4], &[0.25, 0.5], None).unwrap();
    // Second box has IoU 1/3: counts at 0.25, not at 0.5.
    assert!((r.get(Metric::Bleu4, 0.25).unwrap() - 1.0).abs() < 1e-12);
    assert!((r.get(Metric::Bleu4, 0.5).unwrap() - 0.5).abs() < 1e-12);
}

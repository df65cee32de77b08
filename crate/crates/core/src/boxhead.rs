//! Optional localization head: a two-layer perceptron from the pooled scene
//! feature to per-slot `(center, log-size, confidence)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const SLOT_WIDTH: usize = 7;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxHeadConfig {
    pub slots: usize,
    pub hidden: usize,
}

impl Default for BoxHeadConfig {
    fn default() -> Self {
        BoxHeadConfig { slots: 4, hidden: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    pub mlp: Mlp,
    pub slots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotPrediction {
    pub bbox: Box3D,
    pub confidence: f64,
}

/// Smallest axis-aligned box containing every box.
pub fn envelope(boxes: &[Box3D]) -> Option<Box3D> {
    let first = boxes.first()?;
    let (mut lo, mut hi) = (first.min(), first.max());
    for b in &boxes[1..] {
        let (bl, bh) = (b.min(), b.max());
        for i in 0..3 {
            lo[i] = lo[i].min(bl[i]);
            hi[i] = hi[i].max(bh[i]);
        }
    }
    Some(Box3D { center: [0, 1, 2].map(|i| (lo[i] + hi[i]) / 2.0), size: [0, 1, 2].map(|i| hi[i] - lo[i]) })
}

impl BoxHead {
    /// Output weights start at zero and the output bias encodes `init`, so
    /// every slot initially predicts `init` with confidence 0.5.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_dim: usize,
        config: BoxHeadConfig,
        init: Box3D,
        rng: &mut R,
    ) -> Result<Self> {
        if config.slots == 0 {
            return Err(Error::invalid("box head needs at least one slot"));
        }
        init.validate()?;
        let out = config.slots * SLOT_WIDTH;
        let mlp = Mlp::new(store, "box_head", in_dim, config.hidden, out, Activation::Relu, false, rng)?;
        store.get_mut(mlp.fc2.weight).tensor = Tensor::zeros(vec![config.hidden, out]);
        let mut bias = Vec::with_capacity(out);
        for _ in 0..config.slots {
            bias.extend_from_slice(&init.center);
            bias.extend(init.size.iter().map(|s| s.ln()));
            bias.push(0.0);
        }
        let bias_id = mlp.fc2.bias.expect("box head output has a bias");
        store.get_mut(bias_id).tensor = Tensor::new(vec![out], bias)?;
        Ok(BoxHead { mlp, slots: config.slots })
    }

    /// `[1, slots * 7]` raw outputs.
    pub fn forward(&self, g: &mut Graph, global: Var) -> Result<Var> {
        self.mlp.forward(g, global)
    }

    pub fn decode(&self, raw: &Tensor) -> Vec<SlotPrediction> {
        raw.data()
            .chunks(SLOT_WIDTH)
            .take(self.slots)
            .map(|s| SlotPrediction {
                bbox: Box3D { center: [s[0], s[1], s[2]], size: [s[3].exp(), s[4].exp(), s[5].exp()] },
                confidence: 1.0 / (1.0 + (-s[6]).exp()),
            })
            .collect()
    }

    /// Smooth-L1 on `(center, log-size)` of assigned slots plus BCE on every
    /// slot's confidence. Slot 0 is reserved for object 0 (the captioning
    /// target); the rest are matched by minimum total center distance.
    pub fn loss(&self, g: &mut Graph, raw: Var, gt: &[Box3D]) -> Result<Var> {
        if gt.is_empty() {
            return Err(Error::invalid("box loss needs at least one ground-truth box"));
        }
        let preds = self.decode(g.value(raw));
        let centers: Vec<[f64; 3]> = preds.iter().map(|p| p.bbox.center).collect();
        let mut pairs = vec![(0usize, 0usize)];
        let rest_slots: Vec<usize> = (1..self.slots).collect();
        let rest_objs: Vec<usize> = (1..gt.len()).collect();
        let cost = |s: usize, o: usize| dist(&centers[s], &gt[o].center);
        pairs.extend(min_cost_assignment(&rest_slots, &rest_objs, cost));
        pairs.sort_unstable();

        let mut reg_cols = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len() * 6);
        for &(s, o) in &pairs {
            reg_cols.push(g.slice_cols(raw, s * SLOT_WIDTH, 6)?);
            targets.extend_from_slice(&gt[o].center);
            targets.extend(gt[o].size.iter().map(|v| v.ln()));
        }
        let reg = g.concat_cols(&reg_cols)?;
        let l_reg = g.smooth_l1_sum(reg, &targets, SMOOTH_L1_BETA)?;

        let conf_cols = (0..self.slots).map(|s| g.slice_cols(raw, s * SLOT_WIDTH + 6, 1)).collect::<Result<Vec<_>>>()?;
        let conf = g.concat_cols(&conf_cols)?;
        let conf_t: Vec<f64> = (0..self.slots).map(|s| if pairs.iter().any(|p| p.0 == s) { 1.0 } else { 0.0 }).collect();
        let l_conf = g.bce_with_logits_sum(conf, &conf_t)?;
        g.add(l_reg, l_conf)
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Exhaustive minimum-cost matching of `min(|slots|, |objects|)` pairs;
/// ties keep the lexicographically first assignment.
pub fn min_cost_assignment(slots: &[usize], objects: &[usize], cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    #[allow(clippy::too_many_arguments)]
    fn search(
        i: usize,
        slots: &[usize],
        objects: &[usize],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cur_cost: f64,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
        cost: &dyn Fn(usize, usize) -> f64,
        need: usize,
    ) {
        if cur.len() == need {
            if best.as_ref().is_none_or(|(c, _)| cur_cost < *c) {
                *best = Some((cur_cost, cur.clone()));
            }
            return;
        }
        if i == slots.len() || slots.len() - i < need - cur.len() {
            return;
        }
        for (k, &o) in objects.iter().enumerate() {
            if !used[k] {
                used[k] = true;
                cur.push((slots[i], o));
                search(i + 1, slots, objects, used, cur, cur_cost + cost(slots[i], o), best, cost, need);
                cur.pop();
                used[k] = false;
            }
        }
        // Leave this slot unassigned.
        search(i + 1, slots, objects, used, cur, cur_cost, best, cost, need);
    }
    let need = slots.len().min(objects.len());
    let mut best = None;
    search(0, slots, objects, &mut vec![false; objects.len()], &mut Vec::new(), 0.0, &mut best, &cost, need);
    best.map(|(_, p)| p).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn head(slots: usize, init: Box3D) -> (ParamStore, BoxHead) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let h = BoxHead::new(&mut s, 3, BoxHeadConfig { slots, hidden: 5 }, init, &mut rng).unwrap();
        (s, h)
    }

    #[test]
    fn initial_prediction_is_init_box() {
        let init = Box3D { center: [0.1, -0.2, 0.3], size: [1.0, 2.0, 0.5] };
        let (s, h) = head(2, init);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![0.3, -1.0, 2.0])).unwrap();
        let out = h.forward(&mut g, x).unwrap();
        for p in h.decode(g.value(out)) {
            assert_eq!(p.bbox.center, init.center);
            for i in 0..3 {
                assert!((p.bbox.size[i] - init.size[i]).abs() < 1e-12);
            }
            assert_eq!(p.confidence, 0.5);
        }
    }

    #[test]
    fn zero_log_size_is_unit_size() {
        let (s, h) = head(1, Box3D { center: [0.0; 3], size: [1.0; 3] });
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![0.0; 3])).unwrap();
        let out = h.forward(&mut g, x).unwrap();
        assert_eq!(h.decode(g.value(out))[0].bbox.size, [1.0; 3]);
    }

    #[test]
    fn single_slot_single_object_pairs_trivially() {
        assert_eq!(min_cost_assignment(&[0], &[0], |_, _| 5.0), vec![(0, 0)]);
        let (s, h) = head(1, Box3D { center: [0.0; 3], size: [1.0; 3] });
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![0.0; 3])).unwrap();
        let out = h.forward(&mut g, x).unwrap();
        let l = h.loss(&mut g, out, &[Box3D { center: [0.0; 3], size: [1.0; 3] }]).unwrap();
        // Perfect regression; confidence BCE at logit 0 with target 1.
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn assignment_minimizes_distance() {
        let pos = [0.0f64, 10.0, 5.0];
        let obj = [9.0, 1.0];
        let p = min_cost_assignment(&[0, 1, 2], &[0, 1], |s, o| (pos[s] - obj[o]).abs());
        assert_eq!(p, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn envelope_contains_all() {
        let a = Box3D { center: [0.0; 3], size: [1.0; 3] };
        let b = Box3D { center: [2.0, 0.0, 0.0], size: [1.0; 3] };
        let e = envelope(&[a, b]).unwrap();
        assert_eq!(e.center, [1.0, 0.0, 0.0]);
        assert_eq!(e.size, [3.0, 1.0, 1.0]);
    }
}

//! Projection heads, cosine similarity and the temperature-scaled InfoNCE loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LOG_TEMPERATURE: &str = "contrastive.log_temperature";
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
pub const TAU_INIT: f64 = 0.07;
/// Projected vectors below this norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;
/// Tolerance on `‖row‖ = 1` when building the similarity matrix.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub shared_dim: usize,
    /// Add the text→scene direction and average the two.
    pub symmetric: bool,
    pub tau_init: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { shared_dim: 128, symmetric: false, tau_init: TAU_INIT }
    }
}

/// `Linear → ReLU → Linear` heads mapping each modality to the shared space.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub scene: Mlp,
    pub text: Mlp,
    pub shared_dim: usize,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        scene_dim: usize,
        text_dim: usize,
        shared_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ProjectionHeads {
            scene: Mlp::new(store, "proj_v", scene_dim, shared_dim, shared_dim, Activation::Relu, false, rng)?,
            text: Mlp::new(store, "proj_t", text_dim, shared_dim, shared_dim, Activation::Relu, false, rng)?,
            shared_dim,
        })
    }
}

/// Learnable `log τ`, kept inside `[ln TAU_MIN, ln TAU_MAX]` by [`clamp_temperature`].
#[derive(Clone, Debug)]
pub struct ContrastiveState {
    pub log_temperature: ParamId,
    pub symmetric: bool,
}

impl ContrastiveState {
    pub fn new(store: &mut ParamStore, tau_init: f64, symmetric: bool) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&tau_init) {
            return Err(Error::invalid(format!("initial temperature {tau_init} outside [{TAU_MIN}, {TAU_MAX}]")));
        }
        let log_temperature = store.add(LOG_TEMPERATURE, Tensor::new(vec![1], vec![tau_init.ln()])?, false)?;
        Ok(ContrastiveState { log_temperature, symmetric })
    }

    pub fn temperature(&self, store: &ParamStore) -> f64 {
        store.get(self.log_temperature).tensor.item().exp()
    }

    pub fn loss(&self, g: &mut Graph, sim: Var) -> Result<Var> {
        let log_tau = g.param(self.log_temperature)?;
        if self.symmetric {
            let a = info_nce(g, sim, log_tau)?;
            let st = g.transpose(sim)?;
            let b = info_nce(g, st, log_tau)?;
            let s = g.add(a, b)?;
            g.scale(s, 0.5)
        } else {
            info_nce(g, sim, log_tau)
        }
    }
}

/// Clamps `τ = exp(log τ)` into `[TAU_MIN, TAU_MAX]`.
pub fn clamp_temperature(store: &mut ParamStore) {
    if let Some(id) = store.id(LOG_TEMPERATURE) {
        let v = &mut store.get_mut(id).tensor.data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

/// Head projection followed by row-wise L2 normalization.
pub fn project_and_normalize(g: &mut Graph, features: Var, head: &Mlp) -> Result<Var> {
    let p = head.forward(g, features)?;
    g.l2_normalize_rows(p, MIN_NORM)
}

/// `sim[i][j] = scene_i · text_j` for unit-norm rows.
pub fn similarity_matrix(g: &mut Graph, scene: Var, text: Var) -> Result<Var> {
    for v in [scene, text] {
        let t = g.value(v);
        for r in 0..t.rows() {
            let norm = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("similarity input row {r} has norm {norm}, expected 1")));
            }
        }
    }
    g.matmul_t(scene, text)
}

/// `−(1/N) Σ_i log softmax_j(sim[i][j] / τ)[i]` with `τ = exp(log_tau)`.
pub fn info_nce(g: &mut Graph, sim: Var, log_tau: Var) -> Result<Var> {
    let shape = g.value(sim).shape().to_vec();
    match shape.as_slice() {
        [n, m] if n == m && *n > 0 => {}
        s => return Err(Error::shape("info_nce", format!("square non-empty matrix expected, got {s:?}"))),
    }
    let n = shape[0];
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    let logits = g.scale_by(sim, inv_tau)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let total = g.cross_entropy_sum(logits, &targets)?;
    g.scale(total, 1.0 / n as f64)
}

/// Plain-value InfoNCE for a similarity matrix and temperature.
pub fn info_nce_value(sim: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Graph::detached();
    let s = g.constant(sim.clone())?;
    let lt = g.constant(Tensor::scalar(tau.ln()))?;
    let l = info_nce(&mut g, s, lt)?;
    Ok(g.value(l).item())
}

/// Top-1 scene→text accuracy: row `i` is correct when its argmax (lowest
/// index on ties) is `i`.
pub fn retrieval_top1(sim: &Tensor) -> f64 {
    let n = sim.rows();
    if n == 0 {
        return 0.0;
    }
    let correct = (0..n)
        .filter(|&i| {
            let row = sim.row_slice(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use proptest::prelude::*;

    fn identity_head(dim: usize) -> (ParamStore, Mlp) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut s = ParamStore::new();
        let head = Mlp::new(&mut s, "h", dim, dim, dim, Activation::Relu, false, &mut rng).unwrap();
        s.get_mut(head.fc1.weight).tensor = Tensor::eye(dim);
        s.get_mut(head.fc2.weight).tensor = Tensor::eye(dim);
        (s, head)
    }

    #[test]
    fn identity_head_normalizes() {
        let (s, head) = identity_head(2);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![3.0, 4.0])).unwrap();
        let y = project_and_normalize(&mut g, x, &head).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
        let x = g.constant(Tensor::row(vec![0.6, 0.8])).unwrap();
        let y = project_and_normalize(&mut g, x, &head).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_head_is_degenerate() {
        let (mut s, head) = identity_head(2);
        s.get_mut(head.fc2.weight).tensor = Tensor::zeros(vec![2, 2]);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![3.0, 4.0])).unwrap();
        assert!(matches!(project_and_normalize(&mut g, x, &head), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn similarity_cases() {
        let mut g = Graph::detached();
        let a = g.constant(Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap()).unwrap();
        let s = similarity_matrix(&mut g, a, a).unwrap();
        let v = g.value(s);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15 && (v.get(1, 1) - 1.0).abs() < 1e-15);

        let e = g.constant(Tensor::eye(3)).unwrap();
        let s = similarity_matrix(&mut g, e, e).unwrap();
        assert_eq!(g.value(s), &Tensor::eye(3));

        let (c, sn) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let sc = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let tx = g.constant(Tensor::from_rows(&[vec![c, sn], vec![sn, c]]).unwrap()).unwrap();
        let s = similarity_matrix(&mut g, sc, tx).unwrap();
        assert!((g.value(s).get(0, 0) - 0.8660254037844386).abs() < 1e-12);
        assert!((g.value(s).get(0, 1) - 0.5).abs() < 1e-12);

        let bad = g.constant(Tensor::row(vec![1.0, 1.0])).unwrap();
        assert!(similarity_matrix(&mut g, bad, bad).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        assert_eq!(info_nce_value(&Tensor::from_rows(&[vec![0.3]]).unwrap(), 0.5).unwrap(), 0.0);
        for n in 1..6 {
            let l = info_nce_value(&Tensor::full(vec![n, n], 0.2), 0.07).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9);
        }
        let l = info_nce_value(&Tensor::eye(2), 1.0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn info_nce_rejects_non_square() {
        assert!(info_nce_value(&Tensor::zeros(vec![2, 3]), 1.0).is_err());
    }

    #[test]
    fn retrieval_ties_take_lowest_index() {
        assert_eq!(retrieval_top1(&Tensor::full(vec![4, 4], 1.0)), 0.25);
        assert_eq!(retrieval_top1(&Tensor::eye(3)), 1.0);
    }

    fn arb_sim(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n * n)
    }

    proptest! {
        #[test]
        fn info_nce_properties(data in arb_sim(4), tau in 0.05f64..2.0, seed in any::<u64>()) {
            let sim = Tensor::new(vec![4, 4], data.clone()).unwrap();
            let l = info_nce_value(&sim, tau).unwrap();
            prop_assert!(l >= 0.0);

            // Same permutation on rows and columns leaves the loss unchanged.
            let mut perm: Vec<usize> = (0..4).collect();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let pd: Vec<f64> = (0..16).map(|k| data[perm[k / 4] * 4 + perm[k % 4]]).collect();
            let lp = info_nce_value(&Tensor::new(vec![4, 4], pd).unwrap(), tau).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);

            // Gradient signs: diagonal entries lower the loss, off-diagonal raise it.
            let mut g = Graph::detached();
            let s = g.input(sim.clone()).unwrap();
            let lt = g.input(Tensor::scalar(tau.ln())).unwrap();
            let loss = info_nce(&mut g, s, lt).unwrap();
            g.backward(loss).unwrap();
            let gs = g.grad(s).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if i == j { prop_assert!(gs.get(i, j) < 0.0); } else { prop_assert!(gs.get(i, j) > 0.0); }
                }
            }

            // Finite-difference agreement for sim and log τ.
            let fd = numeric_gradient(&sim, 1e-5, |t| info_nce_value(t, tau)).unwrap();
            for (a, n) in gs.data().iter().zip(fd.data()) {
                prop_assert!(relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
            }
            let fd_tau = numeric_gradient(&Tensor::scalar(tau.ln()), 1e-5, |t| info_nce_value(&sim, t.item().exp())).unwrap();
            prop_assert!(relative_error(g.grad(lt).unwrap().item(), fd_tau.item()) <= 1e-4);
        }
    }

    #[test]
    fn clamp_keeps_temperature_in_range() {
        let mut s = ParamStore::new();
        let st = ContrastiveState::new(&mut s, TAU_INIT, false).unwrap();
        s.get_mut(st.log_temperature).tensor.data_mut()[0] = -50.0;
        clamp_temperature(&mut s);
        assert!((st.temperature(&s) - TAU_MIN).abs() < 1e-12);
        s.get_mut(st.log_temperature).tensor.data_mut()[0] = 50.0;
        clamp_temperature(&mut s);
        assert!((st.temperature(&s) - TAU_MAX).abs() < 1e-9);
    }
}

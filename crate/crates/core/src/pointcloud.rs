//! Point cloud patch tokenization: farthest point sampling for patch centers,
//! k-nearest-neighbor grouping, and a shared point-wise network max-pooled
//! per patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// `N × (3 + F)` points: xyz in meters followed by `F` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    data: Vec<f64>,
    n_points: usize,
    n_features: usize,
}

impl PointCloud {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("point cloud needs N >= 1"))?;
        if width < 3 {
            return Err(Error::invalid(format!("point rows need at least xyz, got width {width}")));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("point rows have inconsistent widths"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite values"));
        }
        Ok(PointCloud { data, n_points: rows.len(), n_features: width - 3 })
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn width(&self) -> usize {
        3 + self.n_features
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_points).map(|i| self.point(i).to_vec()).collect()
    }

    fn dist2(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.xyz(i), self.xyz(j));
        (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
    }
}

/// Greedy max-min selection of `m` centers starting at `start`.
///
/// Each pick maximizes the distance to its nearest already-selected center;
/// ties go to the lowest index and selected points are never re-picked.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("farthest point sampling needs 1 <= M <= N, got M={m}, N={n}")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range for {n} points")));
    }
    let mut selected = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut centers = Vec::with_capacity(m);
    let mut current = start;
    loop {
        centers.push(current);
        selected[current] = true;
        if centers.len() == m {
            break;
        }
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = cloud.dist2(i, current);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !selected[i] && best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        current = best.expect("M <= N leaves an unselected point");
    }
    Ok(centers)
}

/// Largest distance from any point to its nearest center.
pub fn coverage_radius(cloud: &PointCloud, centers: &[usize]) -> f64 {
    (0..cloud.len())
        .map(|i| centers.iter().map(|&c| cloud.dist2(i, c)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt()
}

/// `M` patches of `K` point indices each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    /// Row `i` holds the neighbors of center `i`, sorted by (distance, index).
    pub neighbor_indices: Vec<Vec<usize>>,
    pub k: usize,
}

impl PatchSet {
    pub fn m(&self) -> usize {
        self.center_indices.len()
    }
}

/// Groups the `k` nearest points (xyz distance) around each center. The
/// center always comes first; remaining ties go to the lowest index.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("kNN grouping needs 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut neighbor_indices = Vec::with_capacity(centers.len());
    for &c in centers {
        if c >= n {
            return Err(Error::invalid(format!("center index {c} out of range for {n} points")));
        }
        let mut order: Vec<(f64, bool, usize)> = (0..n).map(|i| (cloud.dist2(i, c), i != c, i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        neighbor_indices.push(order.into_iter().take(k).map(|(_, _, i)| i).collect());
    }
    Ok(PatchSet { center_indices: centers.to_vec(), neighbor_indices, k })
}

/// FPS followed by kNN grouping with the default start index 0.
pub fn make_patches(cloud: &PointCloud, m: usize, k: usize) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, m, 0)?;
    knn_group(cloud, &centers, k)
}

/// Shared per-point two-layer perceptron, max-pooled over each patch.
#[derive(Clone, Debug)]
pub struct PointEmbedder {
    pub mlp: Mlp,
    pub input_width: usize,
    pub dim: usize,
}

impl PointEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, input_width: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(store, "point_tokenizer", input_width, dim, dim, Activation::Relu, false, rng)?;
        Ok(PointEmbedder { mlp, input_width, dim })
    }

    /// Patch point rows with xyz re-centered on the patch center, stacked
    /// patch by patch: `[M*K, 3+F]`.
    pub fn patch_inputs(cloud: &PointCloud, patches: &PatchSet) -> Result<Tensor> {
        let w = cloud.width();
        let mut data = Vec::with_capacity(patches.m() * patches.k * w);
        for (&c, nbrs) in patches.center_indices.iter().zip(&patches.neighbor_indices) {
            let center = cloud.xyz(c);
            for &i in nbrs {
                let p = cloud.point(i);
                data.extend((0..3).map(|d| p[d] - center[d]));
                data.extend_from_slice(&p[3..]);
            }
        }
        Tensor::new(vec![patches.m() * patches.k, w], data)
    }

    /// `[M, D_p]` patch tokens, rows in center order.
    pub fn embed_patches(&self, g: &mut Graph, cloud: &PointCloud, patches: &PatchSet) -> Result<Var> {
        if cloud.width() != self.input_width {
            return Err(Error::shape(
                "embed_patches",
                format!("network expects width {}, cloud has {}", self.input_width, cloud.width()),
            ));
        }
        let x = g.constant(Self::patch_inputs(cloud, patches)?)?;
        let h = self.mlp.forward(g, x)?;
        g.group_max(h, patches.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_rows(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Brute force: the second FPS pick is the candidate whose distance to
    /// the start point is largest (lowest index on ties).
    fn brute_second_pick(c: &PointCloud, start: usize) -> usize {
        let mut best = None::<(f64, usize)>;
        for i in 0..c.len() {
            if i == start {
                continue;
            }
            let d = c.dist2(i, start);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn fps_unit_square() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let picks = farthest_point_sample(&c, 2, 0).unwrap();
        assert_eq!(picks[1], brute_second_pick(&c, 0));
        assert_eq!(picks, vec![0, 3]);
    }

    #[test]
    fn fps_trivial_cases() {
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 1, 2).unwrap(), vec![2]);
        assert_eq!(farthest_point_sample(&c, 3, 0).unwrap(), vec![0, 1, 2]);
        assert!(farthest_point_sample(&c, 4, 0).is_err());
        assert!(farthest_point_sample(&c, 0, 0).is_err());
    }

    #[test]
    fn fps_never_repeats_duplicates() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        assert_eq!(farthest_point_sample(&c, 3, 1).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn knn_cases() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let p = knn_group(&c, &[1], 2).unwrap();
        assert_eq!(p.neighbor_indices[0], vec![1, 0]);
        let p = knn_group(&c, &[0, 2], 1).unwrap();
        assert_eq!(p.neighbor_indices, vec![vec![0], vec![2]]);
        let p = knn_group(&c, &[2], 3).unwrap();
        assert_eq!(p.neighbor_indices[0], vec![2, 1, 0]);
        assert!(knn_group(&c, &[0], 4).is_err());
    }

    #[test]
    fn knn_center_first_among_duplicates() {
        let c = cloud(&[[0.0; 3], [0.0; 3]]);
        let p = knn_group(&c, &[1], 1).unwrap();
        assert_eq!(p.neighbor_indices[0], vec![1]);
    }

    fn embedder(width: usize, dim: usize) -> (ParamStore, PointEmbedder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let e = PointEmbedder::new(&mut s, width, dim, &mut rng).unwrap();
        (s, e)
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let (mut s, e) = embedder(4, 3);
        for id in s.ids().collect::<Vec<_>>() {
            let shape = s.get(id).tensor.shape().to_vec();
            s.get_mut(id).tensor = Tensor::zeros(shape);
        }
        let c = PointCloud::from_rows(&[vec![1.0, 2.0, 3.0, 0.5], vec![0.0, 1.0, 0.0, 0.1]]).unwrap();
        let p = make_patches(&c, 2, 2).unwrap();
        let mut g = Graph::new(&s);
        let y = e.embed_patches(&mut g, &c, &p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_points_pool_to_single_embedding() {
        let (s, e) = embedder(4, 5);
        let c = PointCloud::from_rows(&vec![vec![0.3, 0.1, 0.2, 0.9]; 3]).unwrap();
        let p = knn_group(&c, &[0], 3).unwrap();
        let single = knn_group(&c, &[0], 1).unwrap();
        let mut g = Graph::new(&s);
        let y = e.embed_patches(&mut g, &c, &p).unwrap();
        let y1 = e.embed_patches(&mut g, &c, &single).unwrap();
        assert_eq!(g.value(y).data(), g.value(y1).data());
    }

    #[test]
    fn two_point_patch_hand_forward() {
        // width 4 (xyz + 1 feature), hidden 1, output 1:
        // h = relu(x · w1 + b1), out = h * w2 + b2, max over the two points.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let e = PointEmbedder {
            mlp: Mlp::new(&mut s, "t", 4, 1, 1, Activation::Relu, false, &mut rng).unwrap(),
            input_width: 4,
            dim: 1,
        };
        s.get_mut(e.mlp.fc1.weight).tensor = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        s.get_mut(e.mlp.fc1.bias.unwrap()).tensor = Tensor::new(vec![1], vec![0.5]).unwrap();
        s.get_mut(e.mlp.fc2.weight).tensor = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        s.get_mut(e.mlp.fc2.bias.unwrap()).tensor = Tensor::new(vec![1], vec![3.0]).unwrap();
        // Center point 0 at x=1, point 1 at x=2 (re-centered: 0 and 1).
        let c = PointCloud::from_rows(&[vec![1.0, 0.0, 0.0, 0.25], vec![2.0, 0.0, 0.0, 1.0]]).unwrap();
        let p = knn_group(&c, &[0], 2).unwrap();
        let mut g = Graph::new(&s);
        let y = e.embed_patches(&mut g, &c, &p).unwrap();
        // point 0: h = relu(0 + 0.5 + 0.5) = 1, out = 2
        // point 1: h = relu(1 + 2 + 0.5) = 3.5, out = -0.5
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (s, e) = embedder(7, 3);
        let c = PointCloud::from_rows(&[vec![0.0; 4]]).unwrap();
        let p = make_patches(&c, 1, 1).unwrap();
        let mut g = Graph::new(&s);
        assert!(e.embed_patches(&mut g, &c, &p).is_err());
    }

    fn arb_cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 2..40)
    }

    proptest! {
        #[test]
        fn fps_centers_distinct_and_knn_contains_center(rows in arb_cloud(), m in 1usize..40, k in 1usize..40) {
            let c = PointCloud::from_rows(&rows).unwrap();
            let m = m.min(c.len());
            let k = k.min(c.len());
            let centers = farthest_point_sample(&c, m, 0).unwrap();
            let mut sorted = centers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), m);
            let p = knn_group(&c, &centers, k).unwrap();
            for (ctr, nb) in p.center_indices.iter().zip(&p.neighbor_indices) {
                prop_assert_eq!(nb.len(), k);
                prop_assert_eq!(nb[0], *ctr);
                prop_assert!(nb.iter().all(|&i| i < c.len()));
            }
        }

        #[test]
        fn fps_is_permutation_covariant(rows in arb_cloud(), seed in any::<u64>()) {
            let c = PointCloud::from_rows(&rows).unwrap();
            let n = c.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            // permuted[j] = rows[perm[j]]
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let pc = PointCloud::from_rows(&permuted).unwrap();
            let start = 0;
            let new_start = perm.iter().position(|&i| i == start).unwrap();
            let m = n.min(5);
            let a: Vec<[f64; 3]> = farthest_point_sample(&c, m, start).unwrap().iter().map(|&i| c.xyz(i)).collect();
            let b: Vec<[f64; 3]> = farthest_point_sample(&pc, m, new_start).unwrap().iter().map(|&i| pc.xyz(i)).collect();
            // Distinct distances make the greedy choice unique; with ties the
            // selected coordinates may legitimately differ.
            let mut d: Vec<f64> = Vec::new();
            for i in 0..n { for j in i + 1..n { d.push(c.dist2(i, j)); } }
            d.sort_by(f64::total_cmp);
            prop_assume!(d.windows(2).all(|w| w[1] - w[0] > 1e-9) && d.first().is_none_or(|&x| x > 0.0));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn embedding_ignores_point_order_within_patch(rows in arb_cloud(), seed in any::<u64>()) {
            let c = PointCloud::from_rows(&rows).unwrap();
            let (s, e) = embedder(4, 6);
            let k = c.len().min(6);
            let mut p = knn_group(&c, &[0], k).unwrap();
            let mut g = Graph::new(&s);
            let y = e.embed_patches(&mut g, &c, &p).unwrap();
            let before = g.value(y).clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(p.neighbor_indices[0].as_mut_slice(), &mut rng);
            let y = e.embed_patches(&mut g, &c, &p).unwrap();
            prop_assert_eq!(&before, g.value(y));
        }
    }
}

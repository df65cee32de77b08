//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: Option<String>,
    pub elements: usize,
    pub parameters: usize,
}

/// Numeric gradient of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Compares analytic gradients against central differences for every
/// element of every non-frozen parameter.
///
/// `loss` evaluates the model on `store`; with `true` it must also return
/// the analytic parameter gradients.
pub fn check_parameters<F>(store: &mut ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
{
    let (_, analytic) = loss(store, true)?;
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let grad = analytic.iter().find(|(g, _)| *g == id).map(|(_, t)| t.clone());
        report.parameters += 1;
        for i in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let up = loss(store, false)?.0;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let down = loss(store, false)?.0;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some(format!("{}[{i}] analytic={a:e} numeric={numeric:e}", store.get(id).name));
            }
        }
    }
    Ok(report)
}

/// Gradient check of the full joint loss on the tiny model
/// ([`CocaConfig::tiny`]) over a seeded batch of random scenes and captions.
pub fn check_tiny_model(seed: u64, eps: f64, with_box_head: bool) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};

    use crate::boxhead::BoxHeadConfig;
    use crate::metrics::Box3D;
    use crate::model::{CocaConfig, CocaModel, Example};
    use crate::pointcloud::PointCloud;
    use crate::tensor::Graph;
    use crate::text::{BOS, CLS, EOS};

    const VOCAB: usize = 20;
    const FEATURES: usize = 2;
    const BATCH: usize = 3;
    const POINTS: usize = 24;

    let mut config = CocaConfig::tiny(VOCAB, FEATURES);
    if with_box_head {
        config.box_head = Some(BoxHeadConfig { slots: 2, hidden: 3 });
    }
    let envelope = Box3D { center: [0.0; 3], size: [1.0; 3] };
    let (model, mut store) = CocaModel::with_envelope(config, seed, Some(envelope))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut scenes = Vec::with_capacity(BATCH);
    let mut captions = Vec::with_capacity(BATCH);
    let mut boxes = Vec::with_capacity(BATCH);
    for _ in 0..BATCH {
        let rows: Vec<Vec<f64>> = (0..POINTS).map(|_| (0..3 + FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        scenes.push(model.prepare(PointCloud::from_rows(&rows)?)?);
        let len = rng.gen_range(1..4);
        let mut ids = vec![CLS, BOS];
        ids.extend((0..len).map(|_| rng.gen_range(5..VOCAB)));
        ids.push(EOS);
        captions.push(ids);
        let b = |rng: &mut rand_chacha::ChaCha8Rng| Box3D {
            center: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)],
            size: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
        };
        boxes.push(vec![b(&mut rng), b(&mut rng)]);
    }
    let text = model.text_features(&store, &captions)?;
    let loss = |store: &ParamStore, with_grad: bool| {
        let batch: Vec<Example> = (0..BATCH)
            .map(|i| Example { scene: &scenes[i], caption: &captions[i], text_feature: text.row_slice(i), boxes: &boxes[i] })
            .collect();
        let mut g = Graph::new(store);
        let sg = model.step_graph(&mut g, &batch, 1.0, 1.0)?;
        let value = g.value(sg.total).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(sg.total)?;
        Ok((value, g.param_grads()))
    };
    check_parameters(&mut store, eps, loss)
}

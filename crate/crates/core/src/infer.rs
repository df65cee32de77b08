//! Inference helpers: captioning, batch retrieval and evaluation records.

use serde::{Deserialize, Serialize};

use crate::contrastive::{project_and_normalize, retrieval_top1, similarity_matrix};
use crate::data::Dataset;
use crate::decoder::DecodeMode;
use crate::error::{Error, Result};
use crate::metrics::{Box3D, EvalRecord};
use crate::model::{CocaModel, PreparedScene};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::text::Vocabulary;

/// One generated caption, as written to caption JSON-lines files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: String,
    pub object_id: usize,
    pub caption: String,
    pub log_prob: f64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub struct Caption {
    pub ids: Vec<usize>,
    pub text: String,
    pub log_prob: f64,
    /// Slot-0 box and confidence when the model has a box head.
    pub bbox: Option<(Box3D, f64)>,
}

pub fn caption_scene(
    model: &CocaModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    scene: &PreparedScene,
    mode: DecodeMode,
    max_len: usize,
) -> Result<Caption> {
    let mut g = Graph::no_grad(store);
    let tokens = model.encode_scene(&mut g, scene)?;
    let mut state = model.decoder.state(&mut g, &tokens)?;
    let bbox = match &model.box_head {
        Some(head) => {
            let raw = head.forward(&mut g, tokens.global)?;
            head.decode(g.value(raw)).first().map(|p| (p.bbox, p.confidence))
        }
        None => None,
    };
    drop(g);
    let hyp = model.decoder.generate(store, &mut state, mode, max_len)?;
    Ok(Caption { text: vocab.detokenize(&hyp.ids)?, ids: hyp.ids, log_prob: hyp.log_prob, bbox })
}

/// Projected, normalized scene embeddings `[B, D_s]`.
pub fn scene_embeddings(model: &CocaModel, store: &ParamStore, scenes: &[&PreparedScene]) -> Result<Tensor> {
    let mut g = Graph::no_grad(store);
    let globals = scenes.iter().map(|s| Ok(model.encode_scene(&mut g, s)?.global)).collect::<Result<Vec<_>>>()?;
    let f = g.concat_rows(&globals)?;
    let e = project_and_normalize(&mut g, f, &model.heads.scene)?;
    Ok(g.value(e).clone())
}

/// Projected, normalized text embeddings from frozen features `[B, D_t]`.
pub fn text_embeddings(model: &CocaModel, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad(store);
    let f = g.constant(features.clone())?;
    let e = project_and_normalize(&mut g, f, &model.heads.text)?;
    Ok(g.value(e).clone())
}

/// Top-1 scene→text accuracy within one batch.
pub fn batch_top1(scene_emb: &Tensor, text_emb: &Tensor, idx: &[usize]) -> Result<f64> {
    let pick = |t: &Tensor| Tensor::from_rows(&idx.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>());
    let mut g = Graph::detached();
    let s = g.constant(pick(scene_emb)?)?;
    let t = g.constant(pick(text_emb)?)?;
    let sim = similarity_matrix(&mut g, s, t)?;
    Ok(retrieval_top1(g.value(sim)))
}

/// Mean top-1 accuracy over consecutive batches of `batch` items (the last
/// partial batch is kept when it has at least two items).
pub fn retrieval_accuracy(scene_emb: &Tensor, text_emb: &Tensor, batch: usize) -> Result<f64> {
    let n = scene_emb.rows();
    if n == 0 || n != text_emb.rows() {
        return Err(Error::invalid(format!("{} scene rows vs {} text rows", n, text_emb.rows())));
    }
    let batch = batch.max(1);
    let (mut correct, mut count) = (0.0, 0usize);
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        if idx.len() < 2 && n >= 2 {
            continue;
        }
        correct += batch_top1(scene_emb, text_emb, &idx)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(correct / count as f64)
}

/// Evaluation records for the target object of each captioned scene. With
/// `gt_boxes` (or when a prediction carries no box) the ground-truth box is
/// used as the prediction.
pub fn eval_records(dataset: &Dataset, captions: &[CaptionRecord], gt_boxes: bool) -> Result<Vec<EvalRecord>> {
    captions
        .iter()
        .map(|c| {
            let index = (0..dataset.scenes.len())
                .find(|&i| dataset.scene_id(i) == c.scene_id)
                .ok_or_else(|| Error::invalid(format!("scene '{}' not in dataset", c.scene_id)))?;
            let object = dataset.scenes[index]
                .objects
                .get(c.object_id)
                .ok_or_else(|| Error::invalid(format!("scene '{}' has no object {}", c.scene_id, c.object_id)))?;
            let predicted_box = if gt_boxes { object.bbox } else { c.bbox.unwrap_or(object.bbox) };
            Ok(EvalRecord {
                scene_id: Some(c.scene_id.clone()),
                object_id: Some(c.object_id),
                predicted_box,
                predicted_caption: c.caption.clone(),
                gt_box: object.bbox,
                references: object.captions.clone(),
                score: c.score.unwrap_or(1.0),
            })
        })
        .collect()
}

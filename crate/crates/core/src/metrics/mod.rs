//! Caption metrics, box overlap and the m@kIoU aggregate.

pub mod boxes;
pub mod caption;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boxes::{iou3d, nms, Box3D};
pub use caption::{bleu4, cider, meteor_lite, rouge_l, CorpusItem};

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn eval_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cider,
    Bleu4,
    Meteor,
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Cider, Metric::Bleu4, Metric::Meteor, Metric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cider => "cider",
            Metric::Bleu4 => "bleu4",
            Metric::Meteor => "meteor",
            Metric::RougeL => "rougel",
        }
    }

    pub fn max_value(self) -> f64 {
        if self == Metric::Cider {
            10.0
        } else {
            1.0
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown metric '{s}' (expected cider, bleu4, meteor, rougel)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<usize>,
    pub predicted_box: Box3D,
    pub predicted_caption: String,
    pub gt_box: Box3D,
    pub references: Vec<String>,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    1.0
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::invalid("evaluation record has no references"));
        }
        self.predicted_box.validate()?;
        self.gt_box.validate()
    }
}

/// Per-record caption scores; CIDEr's IDF is taken over these records.
pub fn caption_scores(records: &[EvalRecord], metric: Metric) -> Result<Vec<f64>> {
    let items: Vec<CorpusItem> = records
        .iter()
        .map(|r| CorpusItem {
            candidate: eval_tokenize(&r.predicted_caption),
            references: r.references.iter().map(|s| eval_tokenize(s)).collect(),
        })
        .collect();
    if let Some(i) = records.iter().position(|r| r.references.is_empty()) {
        return Err(Error::invalid(format!("record {i} has no references")));
    }
    Ok(match metric {
        Metric::Cider => cider(&items)?,
        Metric::Bleu4 => items.iter().map(|it| bleu4(&it.candidate, &it.references)).collect(),
        Metric::Meteor => items.iter().map(|it| meteor_lite(&it.candidate, &it.references)).collect(),
        Metric::RougeL => items.iter().map(|it| rouge_l(&it.candidate, &it.references)).collect(),
    })
}

/// `(1/N) Σ_i score_i · 1{iou_i ≥ k}`.
pub fn m_at_k_iou(scores: &[f64], ious: &[f64], k: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("m@kIoU needs at least one record"));
    }
    if scores.len() != ious.len() {
        return Err(Error::invalid(format!("{} scores for {} IoUs", scores.len(), ious.len())));
    }
    let total: f64 = scores.iter().zip(ious).filter(|(_, &iou)| iou >= k).map(|(s, _)| s).sum();
    Ok(total / scores.len() as f64)
}

/// IoU per record, with NMS-suppressed records (within the same scene)
/// set to 0.
pub fn effective_ious(records: &[EvalRecord], nms_threshold: Option<f64>) -> Vec<f64> {
    let mut ious: Vec<f64> = records.iter().map(|r| iou3d(&r.predicted_box, &r.gt_box)).collect();
    if let Some(t) = nms_threshold {
        let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.scene_id.as_deref()).or_default().push(i);
        }
        for idx in groups.values() {
            let boxes: Vec<Box3D> = idx.iter().map(|&i| records[i].predicted_box).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| records[i].score).collect();
            let kept = nms(&boxes, &scores, t);
            for (local, &i) in idx.iter().enumerate() {
                if !kept.contains(&local) {
                    ious[i] = 0.0;
                }
            }
        }
    }
    ious
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_records: usize,
    pub iou_thresholds: Vec<f64>,
    /// metric name → IoU threshold (as written) → m@kIoU.
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric, k: f64) -> Option<f64> {
        self.values.get(metric.name())?.get(&threshold_key(k)).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}", "metric");
        for k in &self.iou_thresholds {
            out.push_str(&format!(" {:>10}", format!("@{}", threshold_key(*k))));
        }
        out.push('\n');
        for (name, row) in &self.values {
            out.push_str(&format!("{name:<8}"));
            for k in &self.iou_thresholds {
                out.push_str(&format!(" {:>10.4}", row.get(&threshold_key(*k)).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

fn threshold_key(k: f64) -> String {
    format!("{k}")
}

pub fn evaluate(records: &[EvalRecord], metrics: &[Metric], ks: &[f64], nms_threshold: Option<f64>) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    for r in records {
        r.validate()?;
    }
    let ious = effective_ious(records, nms_threshold);
    let mut values = BTreeMap::new();
    for &m in metrics {
        let scores = caption_scores(records, m)?;
        let row = ks.iter().map(|&k| Ok((threshold_key(k), m_at_k_iou(&scores, &ious, k)?))).collect::<Result<_>>()?;
        values.insert(m.name().to_string(), row);
    }
    Ok(MetricReport { n_records: records.len(), iou_thresholds: ks.to_vec(), values })
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

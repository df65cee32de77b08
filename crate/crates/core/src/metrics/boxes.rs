//! Axis-aligned 3D boxes, IoU and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        let b = Box3D { center, size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("invalid box {self:?}: sizes must be finite and positive")));
        }
        Ok(())
    }

    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3).map(|i| (amax[i].min(bmax[i]) - amin[i].max(bmin[i])).max(0.0)).product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices kept by greedy NMS, in keep order. Highest score first, ties by
/// input order; a box is dropped when its IoU with a kept box exceeds
/// `threshold`.
pub fn nms(boxes: &[Box3D], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou3d(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

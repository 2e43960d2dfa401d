//! Gauge-invariant quality metrics: keypoint transfer, PCK@α and mean
//! transfer error against labelled ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ImageMeta;
use crate::optim::AlignmentResult;
use crate::sl3::{project, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtKeypoint {
    /// Pixel coordinates.
    pub position: Point2,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtImage {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub keypoints: BTreeMap<String, GtKeypoint>,
}

impl GtImage {
    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            id: self.id,
            width: self.width,
            height: self.height,
        }
    }

    fn visible(&self, label: &str) -> Option<Point2> {
        self.keypoints
            .get(label)
            .filter(|k| k.visible)
            .map(|k| k.position)
    }
}

/// Named ground-truth keypoints per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotations {
    pub images: Vec<GtImage>,
}

impl GtAnnotations {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for img in &self.images {
            img.meta().validate()?;
            if !seen.insert(img.id) {
                return Err(Error::Validation(format!("duplicate annotated image id {}", img.id)));
            }
            if let Some((label, _)) = img
                .keypoints
                .iter()
                .find(|(_, k)| k.visible && !k.position.is_finite())
            {
                return Err(Error::Validation(format!(
                    "image {} keypoint {label:?} has non-finite coordinates",
                    img.id
                )));
            }
        }
        Ok(())
    }
}

/// Maps a pixel of image `i` into image `j` through the shared frame.
///
/// Flipped images are mirrored before the source warp and un-mirrored
/// after the target warp.
pub fn transfer_point(result: &AlignmentResult, i: u32, j: u32, p: Point2) -> Result<Point2> {
    let (a, b) = pair_indices(result, i, j)?;
    let src = &result.images[a];
    let dst = &result.images[b];
    let mut q = src.normalize(p);
    if result.flips.get(a) {
        q = q.mirrored();
    }
    let rel = result.homographies[b].inverse().matrix() * result.homographies[a].matrix();
    let mut r = project(&rel, q)?;
    if result.flips.get(b) {
        r = r.mirrored();
    }
    Ok(dst.denormalize(r))
}

fn pair_indices(result: &AlignmentResult, i: u32, j: u32) -> Result<(usize, usize)> {
    if i == j {
        return Err(Error::InvalidArgument(format!("transfer from image {i} to itself")));
    }
    let find = |id| {
        result
            .image_index(id)
            .ok_or_else(|| Error::InvalidArgument(format!("image {id} is not in the alignment")))
    };
    Ok((find(i)?, find(j)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub i: u32,
    pub j: u32,
    pub evaluated: usize,
    pub correct: usize,
    pub pck: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub evaluated: usize,
    pub correct: usize,
    pub pck: f64,
}

/// PCK and mean transfer error for one alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub alpha: f64,
    pub pck: f64,
    /// Mean Euclidean error in normalized units over successful transfers.
    pub mean_transfer_error: f64,
    pub evaluated: usize,
    pub correct: usize,
    /// Transfers that hit the line at infinity; counted as incorrect and
    /// left out of the mean error.
    pub failed: usize,
    pub per_pair: Vec<PairScore>,
    pub per_label: BTreeMap<String, LabelScore>,
}

/// Evaluates every ordered image pair on every label visible in both.
pub fn evaluate(result: &AlignmentResult, gt: &GtAnnotations, alpha: f64) -> Result<MetricReport> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut annotated: Vec<(&GtImage, usize)> = Vec::new();
    for img in &gt.images {
        let Some(k) = result.image_index(img.id) else {
            continue;
        };
        let meta = &result.images[k];
        if (meta.width, meta.height) != (img.width, img.height) {
            return Err(Error::Validation(format!(
                "image {} is {}x{} in the alignment but {}x{} in the annotations",
                img.id, meta.width, meta.height, img.width, img.height
            )));
        }
        annotated.push((img, k));
    }
    annotated.sort_by_key(|(img, _)| img.id);

    let mut per_pair = Vec::new();
    let mut per_label: BTreeMap<String, LabelScore> = BTreeMap::new();
    let (mut evaluated, mut correct, mut failed) = (0, 0, 0);
    let mut error_sum = 0.0;
    let mut error_count = 0usize;

    for &(src, _) in &annotated {
        for &(dst, b) in &annotated {
            if src.id == dst.id {
                continue;
            }
            let threshold = alpha * result.images[b].max_side();
            let mut pair = PairScore {
                i: src.id,
                j: dst.id,
                evaluated: 0,
                correct: 0,
                pck: 0.0,
            };
            for label in src.keypoints.keys() {
                let (Some(p), Some(target)) = (src.visible(label), dst.visible(label)) else {
                    continue;
                };
                let entry = per_label.entry(label.clone()).or_insert(LabelScore {
                    evaluated: 0,
                    correct: 0,
                    pck: 0.0,
                });
                pair.evaluated += 1;
                entry.evaluated += 1;
                match transfer_point(result, src.id, dst.id, p) {
                    Ok(q) => {
                        if q.distance(&target) <= threshold {
                            pair.correct += 1;
                            entry.correct += 1;
                        }
                        let meta = &result.images[b];
                        error_sum += meta.normalize(q).distance(&meta.normalize(target));
                        error_count += 1;
                    }
                    Err(Error::PointAtInfinity { .. }) => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            if pair.evaluated > 0 {
                pair.pck = pair.correct as f64 / pair.evaluated as f64;
                evaluated += pair.evaluated;
                correct += pair.correct;
                per_pair.push(pair);
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Validation(
            "metric undefined: no label is visible in two aligned images".into(),
        ));
    }
    for s in per_label.values_mut() {
        s.pck = s.correct as f64 / s.evaluated as f64;
    }
    Ok(MetricReport {
        alpha,
        pck: correct as f64 / evaluated as f64,
        mean_transfer_error: if error_count > 0 {
            error_sum / error_count as f64
        } else {
            f64::INFINITY
        },
        evaluated,
        correct,
        failed,
        per_pair,
        per_label,
    })
}

pub fn pck_transfer(result: &AlignmentResult, gt: &GtAnnotations, alpha: f64) -> Result<f64> {
    evaluate(result, gt, alpha).map(|r| r.pck)
}

pub fn mean_transfer_error(result: &AlignmentResult, gt: &GtAnnotations) -> Result<f64> {
    evaluate(result, gt, 0.1).map(|r| r.mean_transfer_error)
}

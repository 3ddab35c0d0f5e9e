//! Spatial grounding reward and its two ablation variants.
//!
//! Every predicted tuple is matched to its nearest ground-truth timestamp
//! and gated on the deviation: only tuples within `tau` seconds whose
//! keyframe is annotated can earn IoU credit.
//!
//! * [`SpatialMode::ObjectAware`] additionally requires the predicted name
//!   to soft-match at least one ground-truth object, averages over the
//!   matched objects, and averages over the surviving tuples only.
//! * [`SpatialMode::MaxIoU`] takes the best IoU against any box at the frame.
//! * [`SpatialMode::AvgIoU`] averages the per-object best IoU over every
//!   ground-truth object at the frame.
//!
//! The two ablations average over all `M` tuples, so gated tuples count as 0.

use serde::{Deserialize, Serialize};

use crate::grounding::{box_iou, keyframe_at, match_timestamp, BoundingBox, GtObject, KeyframeObjects, TemporalAnnotation};
use crate::matching::soft_identity_match_with;
use crate::trace::{GroundedTuple, ParsedTrace};

use super::{RewardConfig, RewardError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    #[default]
    ObjectAware,
    #[serde(rename = "avg_iou")]
    AvgIoU,
    #[serde(rename = "max_iou")]
    MaxIoU,
}

/// Which ground-truth boxes the object-aware inner max searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxScope {
    /// Only the boxes of the matched object.
    #[default]
    MatchedObject,
    /// Every box annotated at the keyframe.
    AllFrameBoxes,
}

fn best_iou<'a>(pred: &BoundingBox, boxes: impl IntoIterator<Item = &'a BoundingBox>) -> f64 {
    boxes.into_iter().map(|b| box_iou(pred, b)).fold(0.0, f64::max)
}

/// Keyframe for a tuple if it passes the temporal gate.
fn gated_frame<'a>(
    tuple: &GroundedTuple,
    keyframes: &'a [KeyframeObjects],
    gt: &TemporalAnnotation,
    tau: f64,
) -> Result<Option<&'a KeyframeObjects>, RewardError> {
    let (matched, dt) = match_timestamp(tuple.timestamp, gt)?;
    if dt > tau {
        return Ok(None);
    }
    Ok(keyframe_at(keyframes, matched))
}

fn object_best(pred: &BoundingBox, obj: &GtObject, frame: &KeyframeObjects, scope: BoxScope) -> f64 {
    match scope {
        BoxScope::MatchedObject if !obj.boxes.is_empty() => best_iou(pred, &obj.boxes),
        _ => best_iou(pred, frame.all_boxes()),
    }
}

/// Spatial reward of `trace` under `cfg.spatial_mode`.
pub fn spatial_reward(
    trace: &ParsedTrace,
    keyframes: &[KeyframeObjects],
    gt_temporal: &TemporalAnnotation,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    let m = trace.tuples.len();
    if gt_temporal.anchor_positions().is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    if m == 0 {
        return Ok(0.0);
    }
    match cfg.spatial_mode {
        SpatialMode::ObjectAware => {
            let mut sum = 0.0;
            let mut valid = 0usize;
            for tuple in &trace.tuples {
                let Some(frame) = gated_frame(tuple, keyframes, gt_temporal, cfg.tau)? else {
                    continue;
                };
                let matched: Vec<&GtObject> = frame
                    .objects
                    .iter()
                    .filter(|o| soft_identity_match_with(&tuple.object_name, &o.name, cfg.normalize_names))
                    .collect();
                if matched.is_empty() {
                    continue;
                }
                let per_object: f64 = matched
                    .iter()
                    .map(|o| object_best(&tuple.bbox, o, frame, cfg.box_scope))
                    .sum();
                sum += per_object / matched.len() as f64;
                valid += 1;
            }
            Ok(if valid == 0 { 0.0 } else { sum / valid as f64 })
        }
        SpatialMode::MaxIoU => {
            let mut sum = 0.0;
            for tuple in &trace.tuples {
                if let Some(frame) = gated_frame(tuple, keyframes, gt_temporal, cfg.tau)? {
                    sum += best_iou(&tuple.bbox, frame.all_boxes());
                }
            }
            Ok(sum / m as f64)
        }
        SpatialMode::AvgIoU => {
            let mut sum = 0.0;
            for tuple in &trace.tuples {
                if let Some(frame) = gated_frame(tuple, keyframes, gt_temporal, cfg.tau)? {
                    if frame.objects.is_empty() {
                        continue;
                    }
                    let per_object: f64 = frame
                        .objects
                        .iter()
                        .map(|o| best_iou(&tuple.bbox, &o.boxes))
                        .sum();
                    sum += per_object / frame.objects.len() as f64;
                }
            }
            Ok(sum / m as f64)
        }
    }
}

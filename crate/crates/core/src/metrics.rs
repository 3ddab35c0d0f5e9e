//! Evaluation aggregates: chain-level AM/GM/LGM with their cross-chain
//! means, and recall-at-IoU for temporal grounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{interval_iou, Interval};

pub const DEFAULT_LGM_EPS: f64 = 1e-6;
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("LGM undefined: 1 - {component} + eps <= 0")]
    ComponentAtOne { component: f64 },
    #[error("{pred} predictions for {gt} ground-truth intervals")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("at least one chain is required")]
    NoChains,
}

/// Per-chain answer accuracy, mean temporal IoU and mean visual IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainScores {
    pub acc: f64,
    pub m_tiou: f64,
    pub m_viou: f64,
}

impl ChainScores {
    pub fn new(acc: f64, m_tiou: f64, m_viou: f64) -> Self {
        Self { acc, m_tiou, m_viou }
    }

    fn components(&self) -> [f64; 3] {
        [self.acc, self.m_tiou, self.m_viou]
    }
}

pub fn am(c: &ChainScores) -> f64 {
    c.components().iter().sum::<f64>() / 3.0
}

/// Geometric mean; collapses to 0 when any component is 0.
pub fn gm(c: &ChainScores) -> f64 {
    let p: f64 = c.components().iter().product();
    if p <= 0.0 {
        return 0.0;
    }
    p.cbrt()
}

/// `-(1/3) * sum ln(1 - x + eps)`.
pub fn lgm(c: &ChainScores, eps: f64) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for x in c.components() {
        let arg = 1.0 - x + eps;
        if arg <= 0.0 {
            return Err(MetricsError::ComponentAtOne { component: x });
        }
        sum += arg.ln();
    }
    Ok(-sum / 3.0)
}

pub fn mam(chains: &[ChainScores]) -> Result<f64, MetricsError> {
    if chains.is_empty() {
        return Err(MetricsError::NoChains);
    }
    Ok(chains.iter().map(am).sum::<f64>() / chains.len() as f64)
}

pub fn mlgm(chains: &[ChainScores], eps: f64) -> Result<f64, MetricsError> {
    if chains.is_empty() {
        return Err(MetricsError::NoChains);
    }
    let mut sum = 0.0;
    for c in chains {
        sum += lgm(c, eps)?;
    }
    Ok(sum / chains.len() as f64)
}

fn tious(pred: &[Interval], gt: &[Interval]) -> Result<Vec<f64>, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| interval_iou(p, g)).collect())
}

/// Fraction of queries whose tIoU strictly exceeds each threshold.
pub fn recall_at_iou(pred: &[Interval], gt: &[Interval], thresholds: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let ious = tious(pred, gt)?;
    Ok(recall_from_ious(&ious, thresholds))
}

pub fn recall_from_ious(ious: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&th| {
            let r = if ious.is_empty() {
                0.0
            } else {
                ious.iter().filter(|&&v| v > th).count() as f64 / ious.len() as f64
            };
            (th, r)
        })
        .collect()
}

pub fn mean_iou(pred: &[Interval], gt: &[Interval]) -> Result<f64, MetricsError> {
    let ious = tious(pred, gt)?;
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Rounds a ratio to a percentage with one decimal.
pub fn pct1(ratio: f64) -> f64 {
    (ratio * 1000.0).round() / 10.0
}

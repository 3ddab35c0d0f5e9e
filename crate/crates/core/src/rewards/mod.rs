//! Reward suite: accuracy, format, temporal and spatial components, the
//! overall sum, group-normalized advantages and grounding-density counters.

mod rouge;
mod spatial;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{interval_iou, box_iou, match_timestamp, BoundingBox, GroundingError, Interval, KeyframeObjects, TemporalAnnotation};
use crate::trace::{extract_answer, first_option_letter, parse_trace, AnswerValue, ExtractConfig, ParsedTrace, TaskKind};

pub use rouge::{lcs_len, rouge_l_f1, tokenize};
pub use spatial::{spatial_reward, BoxScope, SpatialMode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("ground truth lacks the {0} answer field")]
    MissingGroundTruth(TaskKind),
    #[error("ground truth has no temporal positions")]
    EmptyGroundTruth,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

impl From<GroundingError> for RewardError {
    fn from(e: GroundingError) -> Self {
        match e {
            GroundingError::EmptyGroundTruth => RewardError::EmptyGroundTruth,
            other => RewardError::InvalidConfig(other.to_string()),
        }
    }
}

/// Statistic used to compare prompted rollouts against the baseline mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatistic {
    /// `acc + fmt + tmp + spa`.
    OverallSum,
    /// `(acc + tmp + spa) / 3`.
    #[default]
    MeanAccTmpSpa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Gaussian falloff of the temporal reward, seconds.
    pub sigma: f64,
    /// Temporal gate of the spatial reward, seconds.
    pub tau: f64,
    pub spatial_mode: SpatialMode,
    pub box_scope: BoxScope,
    pub candidate_statistic: CandidateStatistic,
    /// Count `<t>` timestamps outside tuples in the temporal reward.
    pub include_bare_timestamps: bool,
    /// Case-fold names before soft identity matching.
    pub normalize_names: bool,
    pub extract: ExtractConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            tau: 1.0,
            spatial_mode: SpatialMode::ObjectAware,
            box_scope: BoxScope::MatchedObject,
            candidate_statistic: CandidateStatistic::MeanAccTmpSpa,
            include_bare_timestamps: true,
            normalize_names: true,
            extract: ExtractConfig::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RewardError::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.tau >= 0.0) {
            return Err(RewardError::InvalidConfig(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.extract.mcq_options.is_empty() {
            return Err(RewardError::InvalidConfig("mcq_options must not be empty".into()));
        }
        Ok(())
    }
}

/// Per-sample supervision.
///
/// Boxes are normalized. Temporal positions may be omitted, in which case
/// keyframe timestamps (then interval endpoints) serve as match anchors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_interval: Option<Interval>,
    #[serde(default)]
    pub temporal: TemporalAnnotation,
    #[serde(default)]
    pub keyframes: Vec<KeyframeObjects>,
}

impl GroundTruthAnnotation {
    /// Temporal annotation with positions filled in from keyframes when the
    /// record gives none.
    pub fn effective_temporal(&self) -> TemporalAnnotation {
        let mut t = self.temporal.clone();
        if t.positions.is_empty() && !self.keyframes.is_empty() {
            t.positions = self.keyframes.iter().map(|k| k.timestamp).collect();
        }
        t
    }

    pub fn has_answer_for(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Mcq | TaskKind::OpenEnded => self.answer.as_deref().is_some_and(|a| !a.trim().is_empty()),
            TaskKind::SpatialGrounding => self.answer_box.is_some(),
            TaskKind::TemporalGrounding => self.answer_interval.is_some(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Acc,
    Fmt,
    Tmp,
    Spa,
}

/// Scores of one rollout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub fmt: f64,
    pub tmp: f64,
    pub spa: f64,
    pub total: f64,
    pub candidate_stat: f64,
    /// Components that had no supervision and were scored 0.
    #[serde(skip)]
    pub unsupervised: Vec<Component>,
}

impl RewardBreakdown {
    pub fn from_components(acc: f64, fmt: f64, tmp: f64, spa: f64, stat: CandidateStatistic) -> Self {
        let total = acc + fmt + tmp + spa;
        Self {
            acc,
            fmt,
            tmp,
            spa,
            total,
            candidate_stat: candidate_statistic(stat, acc, fmt, tmp, spa),
            unsupervised: Vec::new(),
        }
    }
}

pub fn candidate_statistic(stat: CandidateStatistic, acc: f64, fmt: f64, tmp: f64, spa: f64) -> f64 {
    match stat {
        CandidateStatistic::OverallSum => acc + fmt + tmp + spa,
        CandidateStatistic::MeanAccTmpSpa => (acc + tmp + spa) / 3.0,
    }
}

/// Task-specific answer accuracy in `[0, 1]`. A missing or unparseable
/// prediction scores 0.
pub fn accuracy_reward(
    task: TaskKind,
    trace: &ParsedTrace,
    gt: &GroundTruthAnnotation,
    extract: &ExtractConfig,
) -> Result<f64, RewardError> {
    if !gt.has_answer_for(task) {
        return Err(RewardError::MissingGroundTruth(task));
    }
    let Ok(pred) = extract_answer(trace, task, extract) else {
        return Ok(0.0);
    };
    let score = match (task, pred) {
        (TaskKind::Mcq, AnswerValue::Choice(c)) => {
            let gt_answer = gt.answer.as_deref().unwrap_or_default();
            let gt_letter = first_option_letter(gt_answer, &extract.mcq_options)
                .or_else(|| gt_answer.trim().chars().next().map(|c| c.to_ascii_uppercase()));
            if gt_letter == Some(c) { 1.0 } else { 0.0 }
        }
        (TaskKind::OpenEnded, AnswerValue::Text(t)) => rouge_l_f1(&t, gt.answer.as_deref().unwrap_or_default()),
        (TaskKind::SpatialGrounding, AnswerValue::Box(b)) => gt.answer_box.map_or(0.0, |g| box_iou(&b, &g)),
        (TaskKind::TemporalGrounding, AnswerValue::Interval(i)) => {
            gt.answer_interval.map_or(0.0, |g| interval_iou(&i, &g))
        }
        _ => 0.0,
    };
    Ok(score)
}

/// 1 iff the text parses as a well-formed trace.
pub fn format_reward(text: &str, extract: &ExtractConfig) -> f64 {
    if parse_trace(text, extract.convention).format_ok {
        1.0
    } else {
        0.0
    }
}

/// Mean per-timestamp temporal score: 1 inside any ground-truth interval,
/// Gaussian in the deviation to the nearest position otherwise.
pub fn temporal_reward(trace: &ParsedTrace, gt: &TemporalAnnotation, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if gt.anchor_positions().is_empty() {
        return Err(RewardError::EmptyGroundTruth);
    }
    let stamps: Vec<f64> = if cfg.include_bare_timestamps {
        trace.all_timestamps().collect()
    } else {
        trace.tuples.iter().map(|t| t.timestamp).collect()
    };
    if stamps.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in &stamps {
        sum += timestamp_score(*t, gt, cfg.sigma)?;
    }
    Ok(sum / stamps.len() as f64)
}

pub(crate) fn timestamp_score(t: f64, gt: &TemporalAnnotation, sigma: f64) -> Result<f64, RewardError> {
    if gt.in_any_interval(t) {
        return Ok(1.0);
    }
    let (_, dt) = match_timestamp(t, gt)?;
    Ok((-(dt * dt) / (2.0 * sigma * sigma)).exp())
}

/// Scores one parsed rollout against a sample's ground truth.
///
/// Missing temporal or spatial supervision zeroes that component and
/// records it in [`RewardBreakdown::unsupervised`]; a missing answer for the
/// task kind is an error.
pub fn overall_reward(
    trace: &ParsedTrace,
    task: TaskKind,
    gt: &GroundTruthAnnotation,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let acc = accuracy_reward(task, trace, gt, &cfg.extract)?;
    let fmt = if trace.format_ok { 1.0 } else { 0.0 };
    let temporal = gt.effective_temporal();
    let mut unsupervised = Vec::new();
    let tmp = if temporal.anchor_positions().is_empty() {
        unsupervised.push(Component::Tmp);
        0.0
    } else {
        temporal_reward(trace, &temporal, cfg)?
    };
    let spa = if gt.keyframes.is_empty() || temporal.anchor_positions().is_empty() {
        unsupervised.push(Component::Spa);
        0.0
    } else {
        spatial_reward(trace, &gt.keyframes, &temporal, cfg)?
    };
    let mut out = RewardBreakdown::from_components(acc, fmt, tmp, spa, cfg.candidate_statistic);
    out.unsupervised = unsupervised;
    Ok(out)
}

/// Parses `text` under the configured coordinate convention and scores it.
pub fn score_text(
    text: &str,
    task: TaskKind,
    gt: &GroundTruthAnnotation,
    cfg: &RewardConfig,
) -> Result<(ParsedTrace, RewardBreakdown), RewardError> {
    let trace = parse_trace(text, cfg.extract.convention);
    let rewards = overall_reward(&trace, task, gt, cfg)?;
    Ok((trace, rewards))
}

/// `(r - mean) / std` with the population std. Zero-variance groups get
/// all-zero advantages.
pub fn group_normalize(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Rounding noise on equal inputs must not blow up into huge advantages.
    if std <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Distinct predicted object names and predicted boxes in one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub objects: usize,
    pub boxes: usize,
}

pub fn count_grounding(trace: &ParsedTrace) -> GroundingCounts {
    let names: BTreeSet<&str> = trace.tuples.iter().map(|t| t.object_name.as_str()).collect();
    GroundingCounts {
        objects: names.len(),
        boxes: trace.tuples.len(),
    }
}

/// Mean objects and boxes per trace, for grounding-density reports.
pub fn mean_grounding_counts<'a>(counts: impl IntoIterator<Item = &'a GroundingCounts>) -> (f64, f64) {
    let (mut n, mut o, mut b) = (0usize, 0usize, 0usize);
    for c in counts {
        n += 1;
        o += c.objects;
        b += c.boxes;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (o as f64 / n as f64, b as f64 / n as f64)
}

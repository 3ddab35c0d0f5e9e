//! Batch operations behind the command-line tools: scoring rollouts,
//! building coach samples from dataset records, metric reports and
//! pseudo-label runs. Batches run on a worker pool and keep input order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coach::{CoachError, CoachSample};
use crate::grounding::Interval;
use crate::io::{ChainRow, MetricsInput, SampleRecord, ScoredRecord, TraceRecord};
use crate::metrics::{mam, mean_iou, mlgm, recall_at_iou, DEFAULT_LGM_EPS, DEFAULT_RECALL_THRESHOLDS};
use crate::prompts::{list_frames, uniform_sample_frames, KeyframeBoxes};
use crate::rewards::{
    count_grounding, mean_grounding_counts, score_text, GroundTruthAnnotation, RewardBreakdown, RewardConfig, RewardError,
};
use crate::trace::TaskKind;
use crate::selector_data::{build_label, label_distribution, LabelConfig, LabelError, LabelInput, LabelOutput, LabelShare};

/// Maps `f` over `items` on `jobs` workers, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>, CoachError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CoachError::Pool(e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// Scores aligned `(text, task, gt)` triples. Same values as the `score`
/// command on the same inputs.
pub fn score_batch(
    texts: &[String],
    gts: &[(TaskKind, GroundTruthAnnotation)],
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    if texts.len() != gts.len() {
        return Err(RewardError::InvalidConfig(format!(
            "{} traces for {} ground truths",
            texts.len(),
            gts.len()
        )));
    }
    cfg.validate()?;
    texts
        .iter()
        .zip(gts)
        .map(|(t, (task, gt))| score_text(t, *task, gt, cfg).map(|(_, r)| r))
        .collect()
}

/// Scores one rollout against its sample.
pub fn score_trace(t: &TraceRecord, sample: &SampleRecord, cfg: &RewardConfig) -> Result<ScoredRecord, String> {
    let (trace, rewards) = score_text(&t.text, sample.task_kind, &sample.gt, cfg).map_err(|e| e.to_string())?;
    Ok(ScoredRecord {
        sample_id: t.sample_id.clone(),
        rollout_id: t.rollout_id,
        trace_text: t.text.clone(),
        format_ok: trace.format_ok,
        counts: count_grounding(&trace),
        unsupervised: rewards.unsupervised.clone(),
        rewards,
    })
}

/// Scores every trace; a trace whose sample is unknown or unscorable
/// yields an error message instead.
pub fn score_traces(
    traces: &[TraceRecord],
    samples: &[SampleRecord],
    cfg: &RewardConfig,
    jobs: usize,
) -> Result<Vec<Result<ScoredRecord, String>>, CoachError> {
    let by_id: HashMap<&str, &SampleRecord> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    parallel_map(traces, jobs, |t| match by_id.get(t.sample_id.as_str()) {
        Some(s) => score_trace(t, s, cfg).map_err(|e| format!("{}#{}: {e}", t.sample_id, t.rollout_id)),
        None => Err(format!("{}#{}: unknown sample", t.sample_id, t.rollout_id)),
    })
}

/// Frame index of a keyframe in the full listing.
fn keyframe_source_index(k: &crate::grounding::KeyframeObjects, fps: Option<f64>) -> Option<usize> {
    k.frame_index
        .or_else(|| fps.map(|f| (k.timestamp * f).round().max(0.0) as usize))
}

/// Turns a dataset record into a coach sample. Frames are listed from
/// `frame_dir` (a missing directory yields no frames) and uniformly sampled;
/// keyframes are mapped to the nearest sampled frame.
pub fn coach_sample(rec: &SampleRecord, frames_per_sample: usize) -> CoachSample {
    let all = if rec.frame_dir.is_dir() {
        list_frames(&rec.frame_dir).unwrap_or_else(|e| {
            log::warn!("{}: {e}", rec.sample_id);
            Vec::new()
        })
    } else {
        Vec::new()
    };
    let picked = uniform_sample_frames(all.len(), frames_per_sample).unwrap_or_default();
    let frame_paths = picked.iter().map(|&i| all[i].clone()).collect();
    let mut keyframes: Vec<KeyframeBoxes> = Vec::new();
    if !picked.is_empty() {
        for k in &rec.gt.keyframes {
            let Some(src) = keyframe_source_index(k, rec.fps) else {
                continue;
            };
            let pos = (0..picked.len())
                .min_by_key(|&p| (picked[p].abs_diff(src), p))
                .expect("picked is nonempty");
            let boxes = k.all_boxes().copied();
            match keyframes.iter_mut().find(|kb| kb.index == pos) {
                Some(kb) => kb.boxes.extend(boxes),
                None => keyframes.push(KeyframeBoxes {
                    index: pos,
                    boxes: boxes.collect(),
                }),
            }
        }
    }
    CoachSample {
        sample_id: rec.sample_id.clone(),
        task: rec.task_kind,
        question: rec.full_question(),
        frame_paths,
        keyframes,
        gt: rec.gt.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub name: String,
    pub chains: usize,
    /// Percent.
    pub mam: f64,
    /// Percent.
    pub mlgm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mam: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mlgm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub queries: usize,
    /// `(threshold, recall)` pairs, recall as a ratio.
    pub recall: Vec<(f64, f64)>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub rollouts: usize,
    pub format_ok_rate: f64,
    pub acc: f64,
    pub fmt: f64,
    pub tmp: f64,
    pub spa: f64,
    pub total: f64,
    pub mean_objects: f64,
    pub mean_boxes: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chains: Vec<ChainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardReport>,
}

fn chain_report(row: &ChainRow) -> Result<ChainReport, String> {
    let m = mam(&row.chains).map_err(|e| e.to_string())?;
    let l = mlgm(&row.chains, DEFAULT_LGM_EPS).map_err(|e| e.to_string())?;
    Ok(ChainReport {
        name: row.name.clone(),
        chains: row.chains.len(),
        mam: m * 100.0,
        mlgm: l * 100.0,
        reported_mam: row.reported_mam,
        reported_mlgm: row.reported_mlgm,
    })
}

impl MetricsReport {
    pub fn from_inputs(inputs: &[MetricsInput]) -> Result<Self, String> {
        let mut report = MetricsReport::default();
        let mut preds: Vec<Interval> = Vec::new();
        let mut gts: Vec<Interval> = Vec::new();
        let mut scored: Vec<&ScoredRecord> = Vec::new();
        for input in inputs {
            match input {
                MetricsInput::Chains(row) => report.chains.push(chain_report(row)?),
                MetricsInput::Interval(p) => {
                    preds.push(p.pred);
                    gts.push(p.gt);
                }
                MetricsInput::Scored(s) => scored.push(s),
            }
        }
        if !preds.is_empty() {
            report.temporal = Some(TemporalReport {
                queries: preds.len(),
                recall: recall_at_iou(&preds, &gts, &DEFAULT_RECALL_THRESHOLDS).map_err(|e| e.to_string())?,
                miou: mean_iou(&preds, &gts).map_err(|e| e.to_string())?,
            });
        }
        if !scored.is_empty() {
            let n = scored.len() as f64;
            let avg = |f: &dyn Fn(&ScoredRecord) -> f64| scored.iter().map(|s| f(s)).sum::<f64>() / n;
            let (mean_objects, mean_boxes) = mean_grounding_counts(scored.iter().map(|s| &s.counts));
            report.rewards = Some(RewardReport {
                rollouts: scored.len(),
                format_ok_rate: avg(&|s| if s.format_ok { 1.0 } else { 0.0 }),
                acc: avg(&|s| s.rewards.acc),
                fmt: avg(&|s| s.rewards.fmt),
                tmp: avg(&|s| s.rewards.tmp),
                spa: avg(&|s| s.rewards.spa),
                total: avg(&|s| s.rewards.total),
                mean_objects,
                mean_boxes,
            });
        }
        Ok(report)
    }

    /// Aligned plain-text rendering; percentages at one decimal.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.chains.is_empty() {
            let w = self.chains.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
            let _ = writeln!(out, "{:<w$}  {:>6}  {:>6}  {:>6}", "model", "chains", "mAM", "mLGM");
            for c in &self.chains {
                let _ = writeln!(out, "{:<w$}  {:>6}  {:>6.1}  {:>6.1}", c.name, c.chains, c.mam, c.mlgm);
            }
        }
        if let Some(t) = &self.temporal {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "{:<8}  {:>6}", "metric", "value");
            for (th, r) in &t.recall {
                let _ = writeln!(out, "{:<8}  {:>6.1}", format!("R@{th}"), r * 100.0);
            }
            let _ = writeln!(out, "{:<8}  {:>6.1}", "mIoU", t.miou * 100.0);
            let _ = writeln!(out, "{:<8}  {:>6}", "queries", t.queries);
        }
        if let Some(r) = &self.rewards {
            if !out.is_empty() {
                out.push('\n');
            }
            let rows = [
                ("acc", r.acc),
                ("fmt", r.fmt),
                ("tmp", r.tmp),
                ("spa", r.spa),
                ("total", r.total),
                ("objects", r.mean_objects),
                ("boxes", r.mean_boxes),
            ];
            let _ = writeln!(out, "{:<8}  {:>8}", "reward", "mean");
            for (k, v) in rows {
                let _ = writeln!(out, "{k:<8}  {v:>8.4}");
            }
            let _ = writeln!(out, "{:<8}  {:>8}", "rollouts", r.rollouts);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRun {
    pub labels: Vec<LabelOutput>,
    pub failures: Vec<(String, String)>,
    pub distribution: Vec<LabelShare>,
}

pub fn build_labels(inputs: &[LabelInput], cfg: &LabelConfig, jobs: usize) -> Result<LabelRun, CoachError> {
    let results: Vec<Result<LabelOutput, LabelError>> = parallel_map(inputs, jobs, |i| build_label(i, cfg))?;
    let mut labels = Vec::new();
    let mut failures = Vec::new();
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(l) => labels.push(l),
            Err(e) => {
                log::warn!("{}: {e}", input.sample_id);
                failures.push((input.sample_id.clone(), e.to_string()));
            }
        }
    }
    let kinds: Vec<_> = labels.iter().map(|l| l.label).collect();
    Ok(LabelRun {
        distribution: label_distribution(&kinds),
        labels,
        failures,
    })
}

/// True when `path` has a PNG or JPEG extension.
pub fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

//! Hard-sample coaching loop.
//!
//! For each sample the coach scores `G` baseline rollouts. A sample whose
//! mean total reward falls below `k` is hard: the selector picks a visual
//! prompt, the policy rolls out again on the prompted input, and prompted
//! rollouts that beat the baseline become self-distillation targets. The
//! output is a [`CoachDirective`] per sample for a host trainer.

mod interfaces;

use std::path::PathBuf;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{KeyframeBoxes, PromptError, PromptKind};
use crate::rewards::{group_normalize, score_text, GroundTruthAnnotation, RewardBreakdown, RewardConfig, RewardError};
use crate::trace::{ParsedTrace, TaskKind};
pub use interfaces::{
    ExternalCommand, ExternalPolicy, ExternalSelector, HintOnlyPrompter, Policy, PolicyRequest, PromptedInput,
    RenderingPrompter, ScriptedEntry, ScriptedPolicy, Selector, SelectorRequest, TableSelector, VisualPrompter,
};

#[derive(Debug, Error)]
pub enum CoachError {
    #[error("invalid coach config: {0}")]
    InvalidConfig(String),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("selector failed: {0}")]
    Selector(String),
    #[error("policy returned {got} completions, expected {expected}")]
    CompletionCount { expected: usize, got: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Which rollouts feed the policy-gradient advantages on hard samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    Baseline,
    #[default]
    Prompted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoachConfig {
    /// Rollouts per group.
    pub g: usize,
    /// Hard threshold on the mean total reward (0 to 4 scale).
    pub k: f64,
    /// Maximum number of distillation targets.
    pub n: usize,
    /// Self-distillation loss weight.
    pub alpha: f64,
    pub advantage_source: AdvantageSource,
    /// Frames uniformly sampled per video.
    pub frames_per_sample: usize,
}

impl Default for CoachConfig {
    fn default() -> Self {
        Self {
            g: 4,
            k: 2.21,
            n: 2,
            alpha: 0.1,
            advantage_source: AdvantageSource::Prompted,
            frames_per_sample: 16,
        }
    }
}

impl CoachConfig {
    pub fn validate(&self) -> Result<(), CoachError> {
        let bad = |m: &str| Err(CoachError::InvalidConfig(m.to_string()));
        if self.g < 1 {
            return bad("g must be >= 1");
        }
        if self.n < 1 {
            return bad("n must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(0.0..=4.0).contains(&self.k) {
            return bad("k must lie in [0, 4]");
        }
        if self.frames_per_sample < 1 {
            return bad("frames_per_sample must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSource {
    Baseline,
    Prompted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub text: String,
    pub trace: ParsedTrace,
    pub rewards: RewardBreakdown,
    pub source: RolloutSource,
}

/// Everything the coach needs about one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoachSample {
    pub sample_id: String,
    pub task: TaskKind,
    pub question: String,
    #[serde(default)]
    pub frame_paths: Vec<PathBuf>,
    /// Keyframe positions within `frame_paths` with their boxes.
    #[serde(default)]
    pub keyframes: Vec<KeyframeBoxes>,
    pub gt: GroundTruthAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdTarget {
    /// Index into the prompted rollouts.
    pub index: usize,
    pub text: String,
    pub acc: f64,
    pub total: f64,
    pub candidate_stat: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoachDirective {
    pub sample_id: String,
    pub hard: bool,
    /// Mean total reward of the baseline rollouts.
    pub baseline_mean: f64,
    /// Mean candidate statistic of the baseline rollouts.
    pub baseline_candidate_mean: f64,
    pub selected_prompt: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompted_question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompted_frames: Vec<PathBuf>,
    pub advantage_source: RolloutSource,
    pub advantages: Vec<f64>,
    pub baseline_rewards: Vec<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompted_rewards: Vec<RewardBreakdown>,
    /// Indices of prompted rollouts whose candidate statistic beats the
    /// baseline.
    pub candidate_set: Vec<usize>,
    pub candidate_set_size: usize,
    pub sd_targets: Vec<SdTarget>,
    pub prompted_mean: Option<f64>,
    pub prompted_candidate_mean: Option<f64>,
    /// Percent change of the mean total reward under prompting.
    pub relative_gain: Option<f64>,
    /// Same on the candidate statistic.
    pub relative_gain_candidate: Option<f64>,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

pub fn mean_total(trajs: &[Trajectory]) -> f64 {
    mean(trajs.iter().map(|t| t.rewards.total))
}

pub fn mean_candidate(trajs: &[Trajectory]) -> f64 {
    mean(trajs.iter().map(|t| t.rewards.candidate_stat))
}

/// Parses and scores completions in order.
pub fn score_rollouts(
    completions: &[String],
    source: RolloutSource,
    task: TaskKind,
    gt: &GroundTruthAnnotation,
    cfg: &RewardConfig,
) -> Result<Vec<Trajectory>, CoachError> {
    completions
        .iter()
        .map(|text| {
            let (trace, rewards) = score_text(text, task, gt, cfg)?;
            Ok(Trajectory {
                text: text.clone(),
                trace,
                rewards,
                source,
            })
        })
        .collect()
}

/// Requests `req.g` completions and scores them.
pub fn run_rollouts(
    policy: &dyn Policy,
    req: &PolicyRequest<'_>,
    source: RolloutSource,
    task: TaskKind,
    gt: &GroundTruthAnnotation,
    cfg: &RewardConfig,
) -> Result<Vec<Trajectory>, CoachError> {
    let completions = policy.complete(req).map_err(CoachError::Policy)?;
    if completions.len() != req.g {
        return Err(CoachError::CompletionCount {
            expected: req.g,
            got: completions.len(),
        });
    }
    score_rollouts(&completions, source, task, gt, cfg)
}

/// `(hard, mean total)`; hard iff the mean is strictly below `k`.
pub fn identify_hard(trajs: &[Trajectory], cfg: &CoachConfig) -> (bool, f64) {
    let m = mean_total(trajs);
    (m < cfg.k, m)
}

/// `(C, S)`: rollouts whose candidate statistic strictly exceeds
/// `baseline_candidate_mean`, and the top `n` of those by accuracy, then
/// total, then lower index.
pub fn select_distillation_set(baseline_candidate_mean: f64, prompted: &[RewardBreakdown], n: usize) -> (Vec<usize>, Vec<usize>) {
    let candidates: Vec<usize> = (0..prompted.len())
        .filter(|&i| prompted[i].candidate_stat > baseline_candidate_mean)
        .collect();
    let mut ranked = candidates.clone();
    ranked.sort_by(|&a, &b| {
        let (ra, rb) = (&prompted[a], &prompted[b]);
        rb.acc
            .total_cmp(&ra.acc)
            .then(rb.total.total_cmp(&ra.total))
            .then(a.cmp(&b))
    });
    ranked.truncate(n);
    (candidates, ranked)
}

/// `(R' - R) / R * 100`, undefined unless `R > 0`.
pub fn relative_gain(baseline: f64, prompted: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (prompted - baseline) / baseline * 100.0)
}

/// Prompted rollouts for a hard sample.
#[derive(Debug, Clone)]
pub struct PromptedRollouts {
    pub kind: PromptKind,
    pub input: PromptedInput,
    pub trajectories: Vec<Trajectory>,
}

/// Builds the directive from already-scored rollouts. Shared by
/// [`Coach::step`] and [`coach_step_with_completions`].
pub fn assemble_directive(
    sample_id: &str,
    baseline: &[Trajectory],
    prompted: Option<&PromptedRollouts>,
    cfg: &CoachConfig,
) -> CoachDirective {
    let (hard, baseline_mean) = identify_hard(baseline, cfg);
    let baseline_candidate_mean = mean_candidate(baseline);
    let baseline_rewards: Vec<RewardBreakdown> = baseline.iter().map(|t| t.rewards.clone()).collect();
    let mut d = CoachDirective {
        sample_id: sample_id.to_string(),
        hard,
        baseline_mean,
        baseline_candidate_mean,
        selected_prompt: None,
        prompted_question: None,
        prompted_frames: Vec::new(),
        advantage_source: RolloutSource::Baseline,
        advantages: group_normalize(&baseline.iter().map(|t| t.rewards.total).collect::<Vec<_>>()),
        baseline_rewards,
        prompted_rewards: Vec::new(),
        candidate_set: Vec::new(),
        candidate_set_size: 0,
        sd_targets: Vec::new(),
        prompted_mean: None,
        prompted_candidate_mean: None,
        relative_gain: None,
        relative_gain_candidate: None,
    };
    let Some(p) = prompted.filter(|_| hard) else {
        return d;
    };
    let rewards: Vec<RewardBreakdown> = p.trajectories.iter().map(|t| t.rewards.clone()).collect();
    let (candidates, selected) = select_distillation_set(baseline_candidate_mean, &rewards, cfg.n);
    let weight = if selected.is_empty() {
        0.0
    } else {
        cfg.alpha / selected.len() as f64
    };
    d.sd_targets = selected
        .iter()
        .map(|&i| SdTarget {
            index: i,
            text: p.trajectories[i].text.clone(),
            acc: rewards[i].acc,
            total: rewards[i].total,
            candidate_stat: rewards[i].candidate_stat,
            weight,
        })
        .collect();
    d.candidate_set_size = candidates.len();
    d.candidate_set = candidates;
    d.selected_prompt = Some(p.kind);
    d.prompted_question = Some(p.input.question.clone());
    d.prompted_frames = p.input.frame_paths.clone();
    let pm = mean_total(&p.trajectories);
    let pc = mean_candidate(&p.trajectories);
    d.prompted_mean = Some(pm);
    d.prompted_candidate_mean = Some(pc);
    d.relative_gain = relative_gain(baseline_mean, pm);
    d.relative_gain_candidate = relative_gain(baseline_candidate_mean, pc);
    if cfg.advantage_source == AdvantageSource::Prompted {
        d.advantage_source = RolloutSource::Prompted;
        d.advantages = group_normalize(&rewards.iter().map(|r| r.total).collect::<Vec<_>>());
    }
    d.prompted_rewards = rewards;
    d
}

/// Directive from host-generated completions. `prompted` carries the kind,
/// the prompted input and its completions; it is ignored on easy samples.
pub fn coach_step_with_completions(
    sample: &CoachSample,
    baseline: &[String],
    prompted: Option<(PromptKind, PromptedInput, &[String])>,
    cfg: &CoachConfig,
    reward: &RewardConfig,
) -> Result<CoachDirective, CoachError> {
    cfg.validate()?;
    let base = score_rollouts(baseline, RolloutSource::Baseline, sample.task, &sample.gt, reward)?;
    let prompted = match prompted {
        Some((kind, input, texts)) => Some(PromptedRollouts {
            kind,
            input,
            trajectories: score_rollouts(texts, RolloutSource::Prompted, sample.task, &sample.gt, reward)?,
        }),
        None => None,
    };
    Ok(assemble_directive(&sample.sample_id, &base, prompted.as_ref(), cfg))
}

/// One target of the self-distillation loss with the prompted context it is
/// conditioned on. The trainer applies length-normalized token NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdLossTerm {
    pub target_text: String,
    pub weight: f64,
    pub question: String,
    pub frame_paths: Vec<PathBuf>,
}

pub fn sd_loss_spec(d: &CoachDirective) -> Vec<SdLossTerm> {
    let question = d.prompted_question.clone().unwrap_or_default();
    d.sd_targets
        .iter()
        .map(|t| SdLossTerm {
            target_text: t.text.clone(),
            weight: t.weight,
            question: question.clone(),
            frame_paths: d.prompted_frames.clone(),
        })
        .collect()
}

/// Stable 64-bit FNV-1a, used to derive per-sample seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn sample_seed(base_seed: u64, sample_id: &str) -> u64 {
    let mut bytes = base_seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(sample_id.as_bytes());
    fnv1a(&bytes)
}

/// Result of one sample; failures never abort the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepOutcome {
    Ok(CoachDirective),
    Failed { sample_id: String, error: String },
}

impl StepOutcome {
    pub fn directive(&self) -> Option<&CoachDirective> {
        match self {
            StepOutcome::Ok(d) => Some(d),
            StepOutcome::Failed { .. } => None,
        }
    }
}

/// The coach engine over pluggable policy, selector and prompter.
pub struct Coach<'a> {
    pub policy: &'a dyn Policy,
    pub selector: &'a dyn Selector,
    pub prompter: &'a dyn VisualPrompter,
    pub cfg: CoachConfig,
    pub reward: RewardConfig,
    pub base_seed: u64,
    policy_lock: Mutex<()>,
    selector_lock: Mutex<()>,
}

impl<'a> Coach<'a> {
    pub fn new(
        policy: &'a dyn Policy,
        selector: &'a dyn Selector,
        prompter: &'a dyn VisualPrompter,
        cfg: CoachConfig,
        reward: RewardConfig,
        base_seed: u64,
    ) -> Result<Self, CoachError> {
        cfg.validate()?;
        reward.validate()?;
        Ok(Self {
            policy,
            selector,
            prompter,
            cfg,
            reward,
            base_seed,
            policy_lock: Mutex::new(()),
            selector_lock: Mutex::new(()),
        })
    }

    fn rollouts(&self, req: &PolicyRequest<'_>, source: RolloutSource, sample: &CoachSample) -> Result<Vec<Trajectory>, CoachError> {
        let _guard = (!self.policy.concurrent()).then(|| self.policy_lock.lock().unwrap_or_else(|e| e.into_inner()));
        run_rollouts(self.policy, req, source, sample.task, &sample.gt, &self.reward)
    }

    /// Runs the loop for one sample.
    pub fn step(&self, sample: &CoachSample) -> Result<CoachDirective, CoachError> {
        let seed = sample_seed(self.base_seed, &sample.sample_id);
        let base_req = PolicyRequest {
            sample_id: &sample.sample_id,
            frame_paths: &sample.frame_paths,
            question: &sample.question,
            prompt: PromptKind::Raw,
            g: self.cfg.g,
            seed,
        };
        let baseline = self.rollouts(&base_req, RolloutSource::Baseline, sample)?;
        let (hard, _) = identify_hard(&baseline, &self.cfg);
        if !hard {
            return Ok(assemble_directive(&sample.sample_id, &baseline, None, &self.cfg));
        }
        let kind = {
            let _guard = (!self.selector.concurrent()).then(|| self.selector_lock.lock().unwrap_or_else(|e| e.into_inner()));
            self.selector
                .select(&SelectorRequest {
                    sample_id: &sample.sample_id,
                    frame_paths: &sample.frame_paths,
                    question: &sample.question,
                })
                .map_err(CoachError::Selector)?
        };
        let input = self.prompter.prompt(sample, kind)?;
        let req = PolicyRequest {
            sample_id: &sample.sample_id,
            frame_paths: &input.frame_paths,
            question: &input.question,
            prompt: kind,
            g: self.cfg.g,
            seed: seed.wrapping_add(1),
        };
        let trajectories = self.rollouts(&req, RolloutSource::Prompted, sample)?;
        let prompted = PromptedRollouts { kind, input, trajectories };
        Ok(assemble_directive(&sample.sample_id, &baseline, Some(&prompted), &self.cfg))
    }

    pub fn step_outcome(&self, sample: &CoachSample) -> StepOutcome {
        match self.step(sample) {
            Ok(d) => StepOutcome::Ok(d),
            Err(e) => {
                log::warn!("sample {}: {e}", sample.sample_id);
                StepOutcome::Failed {
                    sample_id: sample.sample_id.clone(),
                    error: e.to_string(),
                }
            }
        }
    }

    /// Runs every sample on `jobs` workers; output keeps input order.
    pub fn run(&self, samples: &[CoachSample], jobs: usize) -> Result<Vec<StepOutcome>, CoachError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CoachError::Pool(e.to_string()))?;
        Ok(pool.install(|| samples.par_iter().map(|s| self.step_outcome(s)).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoachSummary {
    pub samples: usize,
    pub failed: usize,
    pub hard: usize,
    pub easy: usize,
    pub with_sd_targets: usize,
    pub sd_targets: usize,
    pub mean_baseline_total: f64,
    /// Mean relative gain over hard samples where it is defined.
    pub mean_relative_gain: Option<f64>,
    pub mean_relative_gain_candidate: Option<f64>,
    pub selected_prompts: Vec<crate::selector_data::LabelShare>,
}

pub fn summarize(outcomes: &[StepOutcome]) -> CoachSummary {
    let ds: Vec<&CoachDirective> = outcomes.iter().filter_map(StepOutcome::directive).collect();
    let opt_mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let hard = ds.iter().filter(|d| d.hard).count();
    let prompts: Vec<PromptKind> = ds.iter().filter_map(|d| d.selected_prompt).collect();
    CoachSummary {
        samples: outcomes.len(),
        failed: outcomes.len() - ds.len(),
        hard,
        easy: ds.len() - hard,
        with_sd_targets: ds.iter().filter(|d| !d.sd_targets.is_empty()).count(),
        sd_targets: ds.iter().map(|d| d.sd_targets.len()).sum(),
        mean_baseline_total: mean(ds.iter().map(|d| d.baseline_mean)),
        mean_relative_gain: opt_mean(ds.iter().filter_map(|d| d.relative_gain).collect()),
        mean_relative_gain_candidate: opt_mean(ds.iter().filter_map(|d| d.relative_gain_candidate).collect()),
        selected_prompts: crate::selector_data::label_distribution(&prompts),
    }
}

#[cfg(test)]
mod tests;

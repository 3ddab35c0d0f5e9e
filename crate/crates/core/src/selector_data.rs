//! Prompt-selector pseudo-labels built from proxy-reasoner outputs.
//!
//! Each candidate prompt kind gets an answer score `A` and a grounding score
//! `G` averaged over reasoners. The default rule keeps candidates that every
//! reasoner answered correctly and ranks them by `G`, falling back to
//! `argmax(A + G)` when no candidate survives the filter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{box_iou, GtObject};
use crate::matching::{hierarchical_similarity, MatchConfig};
use crate::prompts::PromptKind;
use crate::rewards::rouge_l_f1;
use crate::trace::{extract_answer, first_option_letter, parse_trace, AnswerValue, CoordinateConvention, ExtractConfig, ParsedTrace, TaskKind};

/// Scores closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("no candidates to choose from")]
    NoCandidates,
    #[error("prompt kind {0} appears more than once")]
    DuplicateKind(PromptKind),
    #[error("candidate {0} has no reasoner outputs")]
    NoReasonerOutputs(PromptKind),
    #[error("missing ground-truth answer")]
    MissingGroundTruth,
    #[error("pseudo-labels support mcq and open_ended tasks, got {0}")]
    UnsupportedTask(TaskKind),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[serde(rename = "argmax_ag")]
    ArgmaxAG,
    #[default]
    FilterThenRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub mode: LabelMode,
    /// Open-ended answers count as correct at ROUGE-L F1 at or above this.
    pub correct_threshold: f64,
    /// Box convention of the reasoner outputs.
    pub convention: CoordinateConvention,
    pub mcq_options: String,
    /// Set from the top-level matching section when loaded from a config.
    #[serde(skip)]
    pub match_cfg: MatchConfig,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            mode: LabelMode::FilterThenRank,
            correct_threshold: 0.5,
            convention: CoordinateConvention::Integer0to999,
            mcq_options: "ABCDE".to_string(),
            match_cfg: MatchConfig::default(),
        }
    }
}

/// Ground truth used for scoring reasoner outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGroundTruth {
    pub task: TaskKind,
    pub answer: String,
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasonerScore {
    /// Binary for multiple choice, ROUGE-L F1 for open-ended.
    pub answer: f64,
    pub spatial_iou: f64,
    pub object_match: f64,
}

impl ReasonerScore {
    pub fn grounding(&self) -> f64 {
        (self.spatial_iou + self.object_match) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub kind: PromptKind,
    pub per_reasoner: Vec<ReasonerScore>,
    /// `A`: mean answer score.
    pub answer_mean: f64,
    /// `G`: mean of per-reasoner `(spatial_iou + object_match) / 2`.
    pub grounding_mean: f64,
}

impl CandidateScore {
    pub fn from_reasoners(kind: PromptKind, per_reasoner: Vec<ReasonerScore>) -> Result<Self, LabelError> {
        if per_reasoner.is_empty() {
            return Err(LabelError::NoReasonerOutputs(kind));
        }
        let n = per_reasoner.len() as f64;
        let answer_mean = per_reasoner.iter().map(|r| r.answer).sum::<f64>() / n;
        let grounding_mean = per_reasoner.iter().map(ReasonerScore::grounding).sum::<f64>() / n;
        Ok(Self {
            kind,
            per_reasoner,
            answer_mean,
            grounding_mean,
        })
    }

    pub fn all_correct(&self, threshold: f64) -> bool {
        self.per_reasoner.iter().all(|r| r.answer >= threshold)
    }
}

fn answer_score(trace: &ParsedTrace, gt: &LabelGroundTruth, cfg: &LabelConfig) -> Result<f64, LabelError> {
    let extract = ExtractConfig {
        mcq_options: cfg.mcq_options.clone(),
        convention: cfg.convention,
    };
    let pred = extract_answer(trace, gt.task, &extract).ok();
    Ok(match (gt.task, pred) {
        (TaskKind::Mcq, Some(AnswerValue::Choice(c))) => {
            let letter = first_option_letter(&gt.answer, &cfg.mcq_options)
                .or_else(|| gt.answer.trim().chars().next().map(|c| c.to_ascii_uppercase()));
            if letter == Some(c) { 1.0 } else { 0.0 }
        }
        (TaskKind::OpenEnded, Some(AnswerValue::Text(t))) => rouge_l_f1(&t, &gt.answer),
        (TaskKind::Mcq | TaskKind::OpenEnded, _) => 0.0,
        (task, _) => return Err(LabelError::UnsupportedTask(task)),
    })
}

/// Answer, spatial and object scores of one reasoner output. Spatial IoU is
/// the mean over predicted tuples of the best IoU against any ground-truth
/// box; object match is the mean over tuples of the best hierarchical
/// similarity against any ground-truth name. No tuples scores 0 for both.
pub fn score_reasoner(trace: &ParsedTrace, gt: &LabelGroundTruth, cfg: &LabelConfig) -> Result<ReasonerScore, LabelError> {
    if gt.answer.trim().is_empty() {
        return Err(LabelError::MissingGroundTruth);
    }
    let answer = answer_score(trace, gt, cfg)?;
    let n = trace.tuples.len();
    if n == 0 {
        return Ok(ReasonerScore {
            answer,
            spatial_iou: 0.0,
            object_match: 0.0,
        });
    }
    let mut iou_sum = 0.0;
    let mut name_sum = 0.0;
    for t in &trace.tuples {
        iou_sum += gt
            .objects
            .iter()
            .flat_map(|o| o.boxes.iter())
            .map(|b| box_iou(&t.bbox, b))
            .fold(0.0, f64::max);
        name_sum += gt
            .objects
            .iter()
            .map(|o| hierarchical_similarity(&t.object_name, &o.name, &cfg.match_cfg))
            .fold(0.0, f64::max);
    }
    Ok(ReasonerScore {
        answer,
        spatial_iou: iou_sum / n as f64,
        object_match: name_sum / n as f64,
    })
}

pub fn score_candidate(
    kind: PromptKind,
    outputs: &[ParsedTrace],
    gt: &LabelGroundTruth,
    cfg: &LabelConfig,
) -> Result<CandidateScore, LabelError> {
    let per = outputs
        .iter()
        .map(|t| score_reasoner(t, gt, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    CandidateScore::from_reasoners(kind, per)
}

#[derive(Deserialize)]
struct ProxyReply {
    reasoning: String,
    answer: serde_json::Value,
}

/// Accepts either a tagged trace or a proxy reply
/// `{"reasoning": ..., "answer": ...}` and returns tagged trace text.
pub fn proxy_to_trace_text(raw: &str) -> String {
    let trimmed = raw.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    match serde_json::from_str::<ProxyReply>(body.trim()) {
        Ok(r) => {
            let answer = match r.answer {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            format!("<think>{}</think><answer>{}</answer>", r.reasoning, answer)
        }
        Err(_) => raw.to_string(),
    }
}

fn argmax_by_priority(cands: &[&CandidateScore], score: impl Fn(&CandidateScore) -> f64) -> PromptKind {
    let mut ordered: Vec<&CandidateScore> = cands.to_vec();
    ordered.sort_by_key(|c| c.kind.priority());
    let mut best = ordered[0];
    for c in &ordered[1..] {
        if score(c) > score(best) + TIE_TOLERANCE {
            best = c;
        }
    }
    best.kind
}

/// Picks the pseudo-label. Exact ties (within [`TIE_TOLERANCE`]) go to the
/// least invasive kind: raw, numpro, circle, darken, api_prompt.
pub fn select_pseudo_label(cands: &[CandidateScore], mode: LabelMode, correct_threshold: f64) -> Result<PromptKind, LabelError> {
    if cands.is_empty() {
        return Err(LabelError::NoCandidates);
    }
    let mut seen = Vec::new();
    for c in cands {
        if seen.contains(&c.kind) {
            return Err(LabelError::DuplicateKind(c.kind));
        }
        if c.per_reasoner.is_empty() {
            return Err(LabelError::NoReasonerOutputs(c.kind));
        }
        seen.push(c.kind);
    }
    let all: Vec<&CandidateScore> = cands.iter().collect();
    if mode == LabelMode::FilterThenRank {
        let passing: Vec<&CandidateScore> = all.iter().copied().filter(|c| c.all_correct(correct_threshold)).collect();
        if !passing.is_empty() {
            return Ok(argmax_by_priority(&passing, |c| c.grounding_mean));
        }
    }
    Ok(argmax_by_priority(&all, |c| c.answer_mean + c.grounding_mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub kind: PromptKind,
    pub count: usize,
    pub percent: f64,
}

/// Count and percentage per kind, in tie-break order, omitting kinds with
/// no labels.
pub fn label_distribution(labels: &[PromptKind]) -> Vec<LabelShare> {
    let mut counts: BTreeMap<PromptKind, usize> = BTreeMap::new();
    for k in labels {
        *counts.entry(*k).or_default() += 1;
    }
    let total = labels.len() as f64;
    PromptKind::ALL
        .into_iter()
        .filter_map(|k| {
            counts.get(&k).map(|&count| LabelShare {
                kind: k,
                count,
                percent: count as f64 / total * 100.0,
            })
        })
        .collect()
}

/// One line of `build-labels` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInput {
    pub sample_id: String,
    #[serde(default)]
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default = "default_task")]
    pub task_kind: TaskKind,
    pub gt_answer: String,
    #[serde(default)]
    pub gt_boxes: Vec<GtObject>,
    /// Raw reasoner outputs per prompt kind, one entry per reasoner.
    pub reasoner_outputs: BTreeMap<PromptKind, Vec<String>>,
}

fn default_task() -> TaskKind {
    TaskKind::Mcq
}

/// One line of `build-labels` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOutput {
    pub sample_id: String,
    pub label: PromptKind,
    pub scores: Vec<CandidateScore>,
}

pub fn build_label(input: &LabelInput, cfg: &LabelConfig) -> Result<LabelOutput, LabelError> {
    let gt = LabelGroundTruth {
        task: input.task_kind,
        answer: input.gt_answer.clone(),
        objects: input.gt_boxes.clone(),
    };
    let mut scores = Vec::with_capacity(input.reasoner_outputs.len());
    for (kind, outputs) in &input.reasoner_outputs {
        let traces: Vec<ParsedTrace> = outputs
            .iter()
            .map(|o| parse_trace(&proxy_to_trace_text(o), cfg.convention))
            .collect();
        scores.push(score_candidate(*kind, &traces, &gt, cfg)?);
    }
    scores.sort_by_key(|c| c.kind.priority());
    let label = select_pseudo_label(&scores, cfg.mode, cfg.correct_threshold)?;
    Ok(LabelOutput {
        sample_id: input.sample_id.clone(),
        label,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::BoundingBox;
    use proptest::prelude::*;

    fn rs(answer: f64, spatial_iou: f64, object_match: f64) -> ReasonerScore {
        ReasonerScore {
            answer,
            spatial_iou,
            object_match,
        }
    }

    fn cand(kind: PromptKind, rows: &[(f64, f64, f64)]) -> CandidateScore {
        CandidateScore::from_reasoners(kind, rows.iter().map(|&(a, s, o)| rs(a, s, o)).collect()).unwrap()
    }

    fn mcq_gt() -> LabelGroundTruth {
        LabelGroundTruth {
            task: TaskKind::Mcq,
            answer: "B".into(),
            objects: vec![GtObject {
                name: "red cup".into(),
                boxes: vec![BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap()],
            }],
        }
    }

    fn parse999(text: &str) -> ParsedTrace {
        parse_trace(text, CoordinateConvention::Integer0to999)
    }

    #[test]
    fn perfect_reasoners_score_one() {
        let cfg = LabelConfig::default();
        let t = parse999("<think><obj>red cup</obj><box>[99.9, 99.9, 499.5, 499.5]</box>at<t>1</t>s</think><answer>B</answer>");
        let c = score_candidate(PromptKind::RedCircle, &[t.clone(), t.clone(), t], &mcq_gt(), &cfg).unwrap();
        assert_eq!(c.answer_mean, 1.0);
        assert!((c.grounding_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_of_three_correct() {
        let cfg = LabelConfig::default();
        let ok = parse999("<think>x</think><answer>B</answer>");
        let bad = parse999("<think>x</think><answer>C</answer>");
        let c = score_candidate(PromptKind::Raw, &[ok.clone(), ok, bad], &mcq_gt(), &cfg).unwrap();
        assert!((c.answer_mean - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.grounding_mean, 0.0);
        assert!(c.per_reasoner.iter().all(|r| r.spatial_iou == 0.0 && r.object_match == 0.0));
    }

    #[test]
    fn spatial_and_object_scores_average_over_tuples() {
        let cfg = LabelConfig::default();
        let t = parse999(
            "<think><obj>red cup</obj><box>[99.9, 99.9, 499.5, 499.5]</box>at<t>1</t>s \
             <obj>zebra</obj><box>[900, 900, 999, 999]</box>at<t>2</t>s</think><answer>B</answer>",
        );
        let r = score_reasoner(&t, &mcq_gt(), &cfg).unwrap();
        assert!((r.spatial_iou - 0.5).abs() < 1e-12);
        let zebra = hierarchical_similarity("zebra", "red cup", &cfg.match_cfg);
        assert!((r.object_match - (1.0 + zebra) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn open_ended_uses_rouge() {
        let cfg = LabelConfig::default();
        let gt = LabelGroundTruth {
            task: TaskKind::OpenEnded,
            answer: "the man opens the door".into(),
            objects: vec![],
        };
        let t = parse999("<think>x</think><answer>the man opens the door</answer>");
        assert_eq!(score_reasoner(&t, &gt, &cfg).unwrap().answer, 1.0);
        let t = parse999("<think>x</think><answer>a woman sits</answer>");
        assert_eq!(score_reasoner(&t, &gt, &cfg).unwrap().answer, 0.0);
        let grounding = LabelGroundTruth {
            task: TaskKind::SpatialGrounding,
            ..gt.clone()
        };
        assert_eq!(score_reasoner(&t, &grounding, &cfg), Err(LabelError::UnsupportedTask(TaskKind::SpatialGrounding)));
        let empty = LabelGroundTruth { answer: " ".into(), ..gt };
        assert_eq!(score_reasoner(&t, &empty, &cfg), Err(LabelError::MissingGroundTruth));
    }

    #[test]
    fn proxy_json_becomes_trace() {
        let raw = r#"{"reasoning": "The <obj>cup</obj><box>[1, 2, 3, 4]</box>at<t>5</t>s moves.", "answer": "C"}"#;
        let text = proxy_to_trace_text(raw);
        assert_eq!(text, "<think>The <obj>cup</obj><box>[1, 2, 3, 4]</box>at<t>5</t>s moves.</think><answer>C</answer>");
        let fenced = format!("```json\n{raw}\n```");
        assert_eq!(proxy_to_trace_text(&fenced), text);
        assert_eq!(proxy_to_trace_text("<think>a</think><answer>B</answer>"), "<think>a</think><answer>B</answer>");
        assert_eq!(proxy_to_trace_text("not json"), "not json");
    }

    #[test]
    fn worked_examples() {
        use PromptKind::*;
        let only = [cand(Raw, &[(1.0, 0.2, 0.2)]), cand(Darken, &[(0.0, 1.0, 1.0)])];
        assert_eq!(select_pseudo_label(&only, LabelMode::FilterThenRank, 0.5).unwrap(), Raw);

        let two = [cand(RedCircle, &[(1.0, 0.8, 0.8)]), cand(Darken, &[(1.0, 0.6, 0.6)])];
        assert_eq!(select_pseudo_label(&two, LabelMode::FilterThenRank, 0.5).unwrap(), RedCircle);

        // A + G = 1.1 for raw and 1.4 for darken, nobody all-correct.
        let fallback = [
            cand(Raw, &[(1.0, 0.1, 0.1), (0.0, 0.1, 0.1)]),
            cand(Darken, &[(1.0, 0.9, 0.9), (0.0, 0.9, 0.9)]),
        ];
        assert!((fallback[0].answer_mean + fallback[0].grounding_mean - 0.6).abs() < 1e-12);
        let fallback = [
            cand(Raw, &[(1.0, 0.6, 0.6), (0.0, 0.6, 0.6)]),
            cand(Darken, &[(1.0, 0.9, 0.9), (0.0, 0.9, 0.9)]),
        ];
        assert!((fallback[0].answer_mean + fallback[0].grounding_mean - 1.1).abs() < 1e-12);
        assert!((fallback[1].answer_mean + fallback[1].grounding_mean - 1.4).abs() < 1e-12);
        assert_eq!(select_pseudo_label(&fallback, LabelMode::FilterThenRank, 0.5).unwrap(), Darken);
    }

    #[test]
    fn ties_prefer_least_invasive() {
        use PromptKind::*;
        let tied = [cand(AttentionOverlay, &[(1.0, 0.5, 0.5)]), cand(Darken, &[(1.0, 0.5, 0.5)]), cand(FrameNumber, &[(1.0, 0.5, 0.5)])];
        assert_eq!(select_pseudo_label(&tied, LabelMode::FilterThenRank, 0.5).unwrap(), FrameNumber);
        assert_eq!(select_pseudo_label(&tied, LabelMode::ArgmaxAG, 0.5).unwrap(), FrameNumber);
    }

    #[test]
    fn select_errors() {
        assert_eq!(select_pseudo_label(&[], LabelMode::ArgmaxAG, 0.5), Err(LabelError::NoCandidates));
        let dup = [cand(PromptKind::Raw, &[(1.0, 0.0, 0.0)]), cand(PromptKind::Raw, &[(0.0, 0.0, 0.0)])];
        assert_eq!(select_pseudo_label(&dup, LabelMode::ArgmaxAG, 0.5), Err(LabelError::DuplicateKind(PromptKind::Raw)));
        assert_eq!(
            CandidateScore::from_reasoners(PromptKind::Raw, vec![]),
            Err(LabelError::NoReasonerOutputs(PromptKind::Raw))
        );
    }

    #[test]
    fn distribution_examples() {
        use PromptKind::*;
        let d = label_distribution(&[Raw, Raw, Darken]);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].kind, d[0].count), (Raw, 2));
        assert!((d[0].percent - 200.0 / 3.0).abs() < 1e-9);
        assert!((d[1].percent - 100.0 / 3.0).abs() < 1e-9);
        assert!(label_distribution(&[]).is_empty());
        assert_eq!(label_distribution(&[RedCircle])[0].percent, 100.0);
    }

    #[test]
    fn build_label_end_to_end() {
        let line = r#"{"sample_id":"s1","question":"Which?","gt_answer":"B",
            "gt_boxes":[{"name":"cup","boxes":[[0.1,0.1,0.5,0.5]]}],
            "reasoner_outputs":{
              "raw":["{\"reasoning\":\"none\",\"answer\":\"B\"}","{\"reasoning\":\"none\",\"answer\":\"A\"}"],
              "circle":["{\"reasoning\":\"<obj>cup</obj><box>[100, 100, 500, 500]</box>at<t>1</t>s\",\"answer\":\"B\"}",
                        "{\"reasoning\":\"<obj>cup</obj><box>[100, 100, 500, 500]</box>at<t>1</t>s\",\"answer\":\"B\"}"]}}"#;
        let input: LabelInput = serde_json::from_str(line).unwrap();
        let out = build_label(&input, &LabelConfig::default()).unwrap();
        assert_eq!(out.label, PromptKind::RedCircle);
        assert_eq!(out.scores.iter().map(|c| c.kind).collect::<Vec<_>>(), vec![PromptKind::Raw, PromptKind::RedCircle]);
        assert_eq!(out.scores[0].answer_mean, 0.5);
        let back: LabelOutput = serde_json::from_str(&serde_json::to_string(&out).unwrap()).unwrap();
        assert_eq!(back, out);
    }

    fn arb_cands() -> impl Strategy<Value = Vec<CandidateScore>> {
        let row = (prop::bool::ANY, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(ok, s, o)| rs(if ok { 1.0 } else { 0.0 }, s, o));
        prop::collection::vec(prop::collection::vec(row, 1..4), 1..6).prop_map(|rows| {
            rows.into_iter()
                .zip(PromptKind::ALL)
                .map(|(r, k)| CandidateScore::from_reasoners(k, r).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn selection_is_permutation_invariant(cands in arb_cands(), k in 0usize..6) {
            let mut rot = cands.clone();
            let n = rot.len();
            rot.rotate_left(k % n);
            for mode in [LabelMode::ArgmaxAG, LabelMode::FilterThenRank] {
                prop_assert_eq!(select_pseudo_label(&cands, mode, 0.5), select_pseudo_label(&rot, mode, 0.5));
            }
        }

        #[test]
        fn all_correct_reduces_to_argmax_g(cands in arb_cands()) {
            let cands: Vec<CandidateScore> = cands
                .into_iter()
                .map(|c| {
                    let per = c.per_reasoner.iter().map(|r| rs(1.0, r.spatial_iou, r.object_match)).collect();
                    CandidateScore::from_reasoners(c.kind, per).unwrap()
                })
                .collect();
            let ftr = select_pseudo_label(&cands, LabelMode::FilterThenRank, 0.5).unwrap();
            let ag = select_pseudo_label(&cands, LabelMode::ArgmaxAG, 0.5).unwrap();
            prop_assert_eq!(ftr, ag);
            let best_g = cands.iter().map(|c| c.grounding_mean).fold(f64::MIN, f64::max);
            let chosen = cands.iter().find(|c| c.kind == ftr).unwrap();
            prop_assert!(chosen.grounding_mean >= best_g - TIE_TOLERANCE);
        }

        #[test]
        fn means_match_recomputation(cands in arb_cands()) {
            for c in &cands {
                let n = c.per_reasoner.len() as f64;
                let a: f64 = c.per_reasoner.iter().map(|r| r.answer).sum::<f64>() / n;
                let g: f64 = c.per_reasoner.iter().map(|r| (r.spatial_iou + r.object_match) / 2.0).sum::<f64>() / n;
                prop_assert!((c.answer_mean - a).abs() < 1e-12);
                prop_assert!((c.grounding_mean - g).abs() < 1e-12);
            }
        }
    }
}

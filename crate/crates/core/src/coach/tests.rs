use std::sync::atomic::{AtomicUsize, Ordering};

use super::*;
use crate::grounding::{BoundingBox, GtObject, KeyframeObjects, TemporalAnnotation};
use crate::prompts::PromptConfig;
use proptest::prelude::*;

const PERFECT: &str = "<think><obj>cup</obj><box>[0.1, 0.1, 0.5, 0.5]</box>at<t>2</t>s</think><answer>A</answer>";
const RIGHT: &str = "<think>guess</think><answer>A</answer>";
const WRONG: &str = "<think>guess</think><answer>B</answer>";

fn gt() -> GroundTruthAnnotation {
    GroundTruthAnnotation {
        answer: Some("A".into()),
        temporal: TemporalAnnotation {
            positions: vec![2.0],
            intervals: vec![],
        },
        keyframes: vec![KeyframeObjects {
            timestamp: 2.0,
            frame_index: None,
            objects: vec![GtObject {
                name: "cup".into(),
                boxes: vec![BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap()],
            }],
        }],
        ..Default::default()
    }
}

fn sample(id: &str) -> CoachSample {
    CoachSample {
        sample_id: id.into(),
        task: TaskKind::Mcq,
        question: "Which cup?".into(),
        frame_paths: vec![],
        keyframes: vec![],
        gt: gt(),
    }
}

fn rb(acc: f64, total: f64, stat: f64) -> RewardBreakdown {
    RewardBreakdown {
        acc,
        fmt: 0.0,
        tmp: 0.0,
        spa: 0.0,
        total,
        candidate_stat: stat,
        unsupervised: vec![],
    }
}

fn traj(total: f64) -> Trajectory {
    Trajectory {
        text: String::new(),
        trace: ParsedTrace::default(),
        rewards: rb(0.0, total, 0.0),
        source: RolloutSource::Baseline,
    }
}

struct SpySelector {
    kind: PromptKind,
    calls: AtomicUsize,
}

impl Selector for SpySelector {
    fn select(&self, _req: &SelectorRequest<'_>) -> Result<PromptKind, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.kind)
    }
}

fn entry(id: &str, baseline: &[&str], prompted: &[&str]) -> ScriptedEntry {
    ScriptedEntry {
        sample_id: id.into(),
        baseline: baseline.iter().map(|s| s.to_string()).collect(),
        prompted: prompted.iter().map(|s| s.to_string()).collect(),
        by_kind: Default::default(),
    }
}

#[test]
fn config_validation() {
    assert!(CoachConfig::default().validate().is_ok());
    for bad in [
        CoachConfig { g: 0, ..Default::default() },
        CoachConfig { n: 0, ..Default::default() },
        CoachConfig { alpha: -0.1, ..Default::default() },
        CoachConfig { k: 4.5, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn identify_hard_examples() {
    let cfg = CoachConfig::default();
    let t: Vec<_> = [1.0, 2.0, 3.0, 2.0].into_iter().map(traj).collect();
    assert_eq!(identify_hard(&t, &cfg), (true, 2.0));
    let t: Vec<_> = [4.0; 4].into_iter().map(traj).collect();
    assert_eq!(identify_hard(&t, &cfg), (false, 4.0));
    let at_k = CoachConfig { k: 2.0, ..cfg };
    let t: Vec<_> = [2.0; 4].into_iter().map(traj).collect();
    assert!(!identify_hard(&t, &at_k).0);
}

#[test]
fn distillation_set_examples() {
    let p = [rb(1.0, 2.5, 2.5), rb(1.0, 1.0, 1.0), rb(0.5, 3.0, 3.0)];
    assert_eq!(select_distillation_set(2.0, &p, 2), (vec![0, 2], vec![0, 2]));
    assert_eq!(select_distillation_set(5.0, &p, 2), (vec![], vec![]));
    assert_eq!(select_distillation_set(2.8, &p, 2), (vec![2], vec![2]));
    // Equal accuracy falls back to total, then index.
    let p = [rb(1.0, 2.0, 3.0), rb(1.0, 3.0, 3.0), rb(1.0, 3.0, 3.0)];
    assert_eq!(select_distillation_set(0.0, &p, 2).1, vec![1, 2]);
}

#[test]
fn relative_gain_examples() {
    assert!((relative_gain(2.0, 3.2).unwrap() - 60.0).abs() < 1e-12);
    assert_eq!(relative_gain(2.0, 2.0), Some(0.0));
    assert_eq!(relative_gain(0.0, 1.0), None);
}

#[test]
fn run_rollouts_scores_in_order() {
    let policy = ScriptedPolicy::new([entry("s", &[PERFECT, WRONG, ""], &[])]);
    let req = PolicyRequest {
        sample_id: "s",
        frame_paths: &[],
        question: "q",
        prompt: PromptKind::Raw,
        g: 3,
        seed: 0,
    };
    let t = run_rollouts(&policy, &req, RolloutSource::Baseline, TaskKind::Mcq, &gt(), &RewardConfig::default()).unwrap();
    assert_eq!(t.iter().map(|x| x.rewards.total).collect::<Vec<_>>(), vec![4.0, 1.0, 0.0]);
    assert_eq!(t[2].rewards.acc + t[2].rewards.fmt + t[2].rewards.tmp + t[2].rewards.spa, 0.0);
    let one = PolicyRequest { g: 1, ..req.clone() };
    assert_eq!(run_rollouts(&policy, &one, RolloutSource::Baseline, TaskKind::Mcq, &gt(), &RewardConfig::default()).unwrap().len(), 1);
    let short = |_: &PolicyRequest<'_>| Ok(vec!["x".to_string()]);
    assert!(matches!(
        run_rollouts(&short, &req, RolloutSource::Baseline, TaskKind::Mcq, &gt(), &RewardConfig::default()),
        Err(CoachError::CompletionCount { expected: 3, got: 1 })
    ));
}

#[test]
fn easy_sample_skips_selector() {
    let policy = ScriptedPolicy::new([entry("easy", &[PERFECT], &[WRONG])]);
    let spy = SpySelector {
        kind: PromptKind::Darken,
        calls: AtomicUsize::new(0),
    };
    let prompter = HintOnlyPrompter::default();
    let coach = Coach::new(&policy, &spy, &prompter, CoachConfig::default(), RewardConfig::default(), 1).unwrap();
    let d = coach.step(&sample("easy")).unwrap();
    assert!(!d.hard);
    assert!(d.sd_targets.is_empty());
    assert_eq!(d.selected_prompt, None);
    assert_eq!(d.advantage_source, RolloutSource::Baseline);
    assert_eq!(d.advantages, vec![0.0; 4]);
    assert_eq!(spy.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn hard_sample_with_improving_prompt() {
    let policy = ScriptedPolicy::new([entry("hard", &[WRONG, RIGHT], &[PERFECT, RIGHT])]);
    let spy = SpySelector {
        kind: PromptKind::RedCircle,
        calls: AtomicUsize::new(0),
    };
    let prompter = HintOnlyPrompter::default();
    let coach = Coach::new(&policy, &spy, &prompter, CoachConfig::default(), RewardConfig::default(), 1).unwrap();
    let d = coach.step(&sample("hard")).unwrap();
    assert!(d.hard);
    assert_eq!(spy.calls.load(Ordering::SeqCst), 1);
    assert!((d.baseline_mean - 1.5).abs() < 1e-12);
    // Baseline stats are 0 and 1/3, so the candidate mean is 1/6. Prompted
    // PERFECT has stat 1 and RIGHT 1/3; all four prompted rollouts beat it.
    assert_eq!(d.candidate_set, vec![0, 1, 2, 3]);
    assert_eq!(d.sd_targets.len(), 2);
    assert_eq!(d.sd_targets.iter().map(|t| t.index).collect::<Vec<_>>(), vec![0, 2]);
    assert!(d.sd_targets.iter().all(|t| t.text == PERFECT && (t.weight - 0.05).abs() < 1e-15));
    assert_eq!(d.selected_prompt, Some(PromptKind::RedCircle));
    assert_eq!(d.advantage_source, RolloutSource::Prompted);
    assert!((d.prompted_mean.unwrap() - 3.0).abs() < 1e-12);
    assert!((d.relative_gain.unwrap() - 100.0).abs() < 1e-9);
    let q = d.prompted_question.clone().unwrap();
    assert!(q.starts_with("Which cup?\n") && q.contains("red circles"));

    let spec = sd_loss_spec(&d);
    assert_eq!(spec.len(), 2);
    assert!(spec.iter().all(|s| s.weight == 0.05 && s.question == q));
}

#[test]
fn hard_sample_without_improvement() {
    let policy = ScriptedPolicy::new([entry("h", &[WRONG, RIGHT], &[WRONG])]);
    let prompter = HintOnlyPrompter::default();
    let coach = Coach::new(&policy, &PromptKind::Darken, &prompter, CoachConfig::default(), RewardConfig::default(), 1).unwrap();
    let d = coach.step(&sample("h")).unwrap();
    assert!(d.hard);
    assert!(d.sd_targets.is_empty());
    assert_eq!(d.candidate_set_size, 0);
    assert!(sd_loss_spec(&d).is_empty());
}

#[test]
fn baseline_advantage_switch() {
    let cfg = CoachConfig {
        advantage_source: AdvantageSource::Baseline,
        ..Default::default()
    };
    let s = sample("x");
    let input = PromptedInput {
        frame_paths: vec![],
        question: "q'".into(),
    };
    let base = [WRONG.to_string(), RIGHT.to_string()];
    let prompted = [PERFECT.to_string(), RIGHT.to_string()];
    let d = coach_step_with_completions(&s, &base, Some((PromptKind::Darken, input, &prompted)), &cfg, &RewardConfig::default()).unwrap();
    assert_eq!(d.advantage_source, RolloutSource::Baseline);
    assert_eq!(d.advantages, vec![-1.0, 1.0]);
    assert_eq!(d.sd_targets.len(), 2);
}

#[test]
fn host_parity_matches_engine() {
    let policy = ScriptedPolicy::new([entry("p", &[WRONG, RIGHT, WRONG, PERFECT], &[PERFECT, RIGHT, WRONG, RIGHT])]);
    let prompter = HintOnlyPrompter::default();
    let coach = Coach::new(&policy, &PromptKind::Darken, &prompter, CoachConfig::default(), RewardConfig::default(), 9).unwrap();
    let s = sample("p");
    let engine = coach.step(&s).unwrap();
    let input = prompter.prompt(&s, PromptKind::Darken).unwrap();
    let base: Vec<String> = [WRONG, RIGHT, WRONG, PERFECT].iter().map(|x| x.to_string()).collect();
    let pr: Vec<String> = [PERFECT, RIGHT, WRONG, RIGHT].iter().map(|x| x.to_string()).collect();
    let host = coach_step_with_completions(&s, &base, Some((PromptKind::Darken, input, &pr)), &CoachConfig::default(), &RewardConfig::default()).unwrap();
    assert_eq!(engine, host);
    let easy_host = coach_step_with_completions(&s, &[PERFECT.to_string()], None, &CoachConfig::default(), &RewardConfig::default()).unwrap();
    assert!(!easy_host.hard);
}

#[test]
fn failures_are_isolated_and_order_is_kept() {
    let policy = ScriptedPolicy::new((0..20).map(|i| entry(&format!("s{i}"), &[if i % 2 == 0 { PERFECT } else { WRONG }], &[PERFECT])));
    let prompter = HintOnlyPrompter::default();
    let coach = Coach::new(&policy, &PromptKind::RedCircle, &prompter, CoachConfig::default(), RewardConfig::default(), 3).unwrap();
    let mut samples: Vec<CoachSample> = (0..20).map(|i| sample(&format!("s{i}"))).collect();
    samples.insert(5, sample("missing"));
    let one = coach.run(&samples, 1).unwrap();
    let many = coach.run(&samples, 8).unwrap();
    assert_eq!(one, many);
    assert!(matches!(&one[5], StepOutcome::Failed { sample_id, .. } if sample_id == "missing"));
    let ids: Vec<&str> = one.iter().filter_map(|o| o.directive()).map(|d| d.sample_id.as_str()).collect();
    assert_eq!(ids.len(), 20);
    assert_eq!(ids[5], "s5");
    let s = summarize(&one);
    assert_eq!((s.samples, s.failed, s.hard, s.easy), (21, 1, 10, 10));
    assert_eq!(s.with_sd_targets, 10);
    assert_eq!(s.selected_prompts[0].kind, PromptKind::RedCircle);
    let json = serde_json::to_string(&one[5]).unwrap();
    assert!(json.contains("\"error\""));
    let back: Vec<StepOutcome> = one.iter().map(|o| serde_json::from_str(&serde_json::to_string(o).unwrap()).unwrap()).collect();
    assert_eq!(back, one);
}

#[test]
fn seeds_are_stable_and_distinct() {
    assert_eq!(sample_seed(7, "a"), sample_seed(7, "a"));
    assert_ne!(sample_seed(7, "a"), sample_seed(8, "a"));
    assert_ne!(sample_seed(7, "a"), sample_seed(7, "b"));
    assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
    assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
}

#[test]
fn scripted_and_table_fixtures_parse() {
    let p = ScriptedPolicy::from_jsonl(&format!(
        "{}\n\n{}\n",
        serde_json::to_string(&entry("a", &[RIGHT], &[PERFECT])).unwrap(),
        r#"{"sample_id":"b","baseline":["x"],"by_kind":{"darken":["y"]}}"#
    ))
    .unwrap();
    assert_eq!(p.len(), 2);
    let req = PolicyRequest {
        sample_id: "b",
        frame_paths: &[],
        question: "",
        prompt: PromptKind::Darken,
        g: 3,
        seed: 0,
    };
    assert_eq!(p.complete(&req).unwrap(), vec!["y"; 3]);
    assert!(p.complete(&PolicyRequest { prompt: PromptKind::RedCircle, ..req.clone() }).is_err());
    assert!(ScriptedPolicy::from_jsonl("{").is_err());

    let t = TableSelector::from_jsonl("{\"sample_id\":\"a\",\"label\":\"numpro\",\"scores\":[]}\n", None).unwrap();
    let r = SelectorRequest {
        sample_id: "a",
        frame_paths: &[],
        question: "",
    };
    assert_eq!(t.select(&r).unwrap(), PromptKind::FrameNumber);
    assert!(t.select(&SelectorRequest { sample_id: "z", ..r }).is_err());
}

#[test]
fn external_commands_round_trip() {
    let sel = ExternalCommand::spawn("sh", &["-c".into(), r#"while read l; do echo '{"prompt":"darken"}'; done"#.into()]).unwrap();
    let sel = ExternalSelector(sel);
    let r = SelectorRequest {
        sample_id: "a",
        frame_paths: &[],
        question: "",
    };
    assert_eq!(sel.select(&r).unwrap(), PromptKind::Darken);
    assert_eq!(sel.select(&r).unwrap(), PromptKind::Darken);

    let pol = ExternalCommand::spawn("sh", &["-c".into(), r#"while read l; do echo '{"completions":["a","b"]}'; done"#.into()]).unwrap();
    let pol = ExternalPolicy(pol);
    let req = PolicyRequest {
        sample_id: "a",
        frame_paths: &[],
        question: "",
        prompt: PromptKind::Raw,
        g: 2,
        seed: 0,
    };
    assert_eq!(pol.complete(&req).unwrap(), vec!["a", "b"]);
    assert!(!pol.concurrent());

    let failing = ExternalCommand::spawn("sh", &["-c".into(), r#"read l; echo '{"error":"boom"}'"#.into()]).unwrap();
    assert_eq!(ExternalPolicy(failing).complete(&req), Err("boom".to_string()));
    let dead = ExternalCommand::spawn("true", &[]).unwrap();
    assert!(ExternalPolicy(dead).complete(&req).is_err());
    assert!(ExternalCommand::spawn("/nonexistent/binary", &[]).is_err());
}

#[test]
fn rendering_prompter_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames = vec![image::RgbImage::from_pixel(32, 24, image::Rgb([200, 200, 200])); 3];
    let paths = crate::prompts::save_frames(&frames, &dir.path().join("in")).unwrap();
    let mut s = sample("r1");
    s.frame_paths = paths.clone();
    s.keyframes = vec![KeyframeBoxes {
        index: 1,
        boxes: vec![BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()],
    }];
    let p = RenderingPrompter::new(PromptConfig::default(), dir.path().join("out"), None);
    let raw = p.prompt(&s, PromptKind::Raw).unwrap();
    assert_eq!(raw.frame_paths, paths);
    let out = p.prompt(&s, PromptKind::Darken).unwrap();
    assert_eq!(out.frame_paths.len(), 3);
    assert!(out.frame_paths[0].starts_with(dir.path().join("out").join("r1").join("darken")));
    let loaded = crate::prompts::load_frames(&out.frame_paths).unwrap();
    assert_eq!(loaded[0], frames[0]);
    assert_eq!(loaded[1].get_pixel(31, 23).0, [60; 3]);
    assert!(matches!(p.prompt(&s, PromptKind::AttentionOverlay), Err(PromptError::MissingRelevanceProvider)));
}

proptest! {
    #[test]
    fn raising_k_never_reduces_hard_count(
        groups in prop::collection::vec(prop::collection::vec(0.0..4.0f64, 1..6), 1..30),
        k1 in 0.0..4.0f64,
        dk in 0.0..2.0f64,
    ) {
        let k2 = (k1 + dk).min(4.0);
        let count = |k: f64| {
            let cfg = CoachConfig { k, ..Default::default() };
            groups.iter().filter(|g| {
                let t: Vec<Trajectory> = g.iter().map(|&x| traj(x)).collect();
                identify_hard(&t, &cfg).0
            }).count()
        };
        prop_assert!(count(k2) >= count(k1));
    }

    #[test]
    fn sd_targets_beat_baseline(stats in prop::collection::vec((0.0..1.0f64, 0.0..4.0f64, 0.0..1.0f64), 1..8), base in 0.0..1.0f64, n in 1usize..4) {
        let p: Vec<RewardBreakdown> = stats.iter().map(|&(a, t, s)| rb(a, t, s)).collect();
        let (c, s) = select_distillation_set(base, &p, n);
        prop_assert!(s.len() <= n && s.len() == c.len().min(n));
        prop_assert!(s.iter().all(|i| c.contains(i) && p[*i].candidate_stat > base));
        let min_sel = s.iter().map(|&i| p[i].acc).fold(f64::INFINITY, f64::min);
        prop_assert!(c.iter().filter(|i| !s.contains(i)).all(|&i| p[i].acc <= min_sel));
    }
}

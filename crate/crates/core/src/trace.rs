//! Grounded reasoning traces: grammar, parser and answer extraction.
//!
//! A well-formed trace is
//!
//! ```text
//! <think> ... </think><answer> ... </answer>
//! ```
//!
//! where the reasoning may cite evidence with grounded tuples
//!
//! ```text
//! <obj>OBJECT</obj><box>[x1, y1, x2, y2]</box>at<t>TIME</t>s
//! ```
//!
//! and bare `<t>TIME</t>` timestamps. A `<box>` tag on its own (e.g. a box
//! answer) is legal; an `<obj>` that is not followed by a box and a timestamp
//! is not.
//!
//! Parsing is total: malformed constructs are skipped, recorded as
//! [`Diagnostic`]s and clear [`ParsedTrace::format_ok`].

use std::fmt;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::grounding::BoundingBox;
use crate::grounding::Interval;

/// Clamping that moves a coordinate further than this is a format violation.
const CLAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("no {0} answer found in answer text")]
    NoAnswerFound(TaskKind),
}

/// How box numbers in a trace are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateConvention {
    /// Already in `[0, 1]`.
    #[default]
    Normalized,
    /// Integers in `[0, 999]`, divided by 999.
    #[serde(rename = "integer0to999")]
    Integer0to999,
    /// Pixel coordinates of a `width x height` frame.
    Pixel { width: u32, height: u32 },
}

impl CoordinateConvention {
    fn scale(&self) -> (f64, f64) {
        match *self {
            CoordinateConvention::Normalized => (1.0, 1.0),
            CoordinateConvention::Integer0to999 => (999.0, 999.0),
            CoordinateConvention::Pixel { width, height } => {
                (f64::from(width.max(1)), f64::from(height.max(1)))
            }
        }
    }
}

/// Supervision shape a sample asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mcq,
    OpenEnded,
    SpatialGrounding,
    TemporalGrounding,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Mcq => "multiple-choice",
            TaskKind::OpenEnded => "open-ended",
            TaskKind::SpatialGrounding => "spatial-grounding",
            TaskKind::TemporalGrounding => "temporal-grounding",
        };
        f.write_str(s)
    }
}

/// One `(object, timestamp, box)` triple cited in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedTuple {
    pub object_name: String,
    pub timestamp: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// Missing, misplaced or repeated `<think>`/`<answer>` blocks.
    Structure,
    DuplicateAnswer,
    MalformedTag,
    IncompleteTuple,
    StrayTag,
    /// A coordinate fell outside `[0, 1]` after scaling and was clamped.
    Clamped,
    /// `x1 > x2` or `y1 > y2`; corners were swapped.
    SwappedCorners,
}

/// Structured parser diagnostic. `offset` is a byte offset into the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub offset: usize,
    pub kind: DiagnosticKind,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{} {:?}: {}", self.offset, self.kind, self.detail)
    }
}

/// Structured decomposition of a model output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedTrace {
    pub think_text: String,
    pub answer_text: String,
    pub tuples: Vec<GroundedTuple>,
    /// Timestamps from `<t>` tags that are not part of a tuple.
    pub bare_timestamps: Vec<f64>,
    pub format_ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedTrace {
    /// Reassembles the trace as `<think>..</think><answer>..</answer>`.
    pub fn to_text(&self) -> String {
        format!(
            "<think>{}</think><answer>{}</answer>",
            self.think_text, self.answer_text
        )
    }

    /// Tuple timestamps followed by bare timestamps.
    pub fn all_timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.tuples
            .iter()
            .map(|t| t.timestamp)
            .chain(self.bare_timestamps.iter().copied())
    }
}

/// Canonical text of one tuple in normalized coordinates.
pub fn render_tuple(t: &GroundedTuple) -> String {
    let b = &t.bbox;
    format!(
        "<obj>{}</obj><box>[{}, {}, {}, {}]</box>at<t>{}</t>s",
        t.object_name, b.x1, b.y1, b.x2, b.y2, t.timestamp
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    Answer,
    Obj,
    Box,
    T,
}

impl Tag {
    fn is_structural(self) -> bool {
        matches!(self, Tag::Think | Tag::Answer)
    }
}

const TAGS: [(&str, Tag, bool); 10] = [
    ("<think>", Tag::Think, true),
    ("</think>", Tag::Think, false),
    ("<answer>", Tag::Answer, true),
    ("</answer>", Tag::Answer, false),
    ("<obj>", Tag::Obj, true),
    ("</obj>", Tag::Obj, false),
    ("<box>", Tag::Box, true),
    ("</box>", Tag::Box, false),
    ("<t>", Tag::T, true),
    ("</t>", Tag::T, false),
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum TokKind<'a> {
    Open(Tag),
    Close(Tag),
    Text(&'a str),
}

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    kind: TokKind<'a>,
    span: (usize, usize),
}

fn tokenize(text: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut text_start = 0;
    let mut pos = 0;
    while let Some(rel) = text[pos..].find('<') {
        let at = pos + rel;
        let hit = TAGS
            .iter()
            .find(|(lit, _, _)| text[at..].starts_with(lit));
        match hit {
            Some((lit, tag, open)) => {
                if text_start < at {
                    toks.push(Tok {
                        kind: TokKind::Text(&text[text_start..at]),
                        span: (text_start, at),
                    });
                }
                let end = at + lit.len();
                toks.push(Tok {
                    kind: if *open {
                        TokKind::Open(*tag)
                    } else {
                        TokKind::Close(*tag)
                    },
                    span: (at, end),
                });
                pos = end;
                text_start = end;
            }
            None => pos = at + 1,
        }
    }
    if text_start < text.len() {
        toks.push(Tok {
            kind: TokKind::Text(&text[text_start..]),
            span: (text_start, text.len()),
        });
    }
    toks
}

/// A grounding construct recognized in the source, with its byte span.
#[derive(Debug, Clone)]
enum Construct {
    Tuple(GroundedTuple),
    BareTimestamp(f64),
}

struct Parser<'a> {
    text: &'a str,
    toks: Vec<Tok<'a>>,
    convention: CoordinateConvention,
    diagnostics: Vec<Diagnostic>,
    format_ok: bool,
    constructs: Vec<(Range<usize>, Construct)>,
}

impl<'a> Parser<'a> {
    fn diag(&mut self, offset: usize, kind: DiagnosticKind, detail: impl Into<String>, fatal: bool) {
        if fatal {
            self.format_ok = false;
        }
        self.diagnostics.push(Diagnostic {
            offset,
            kind,
            detail: detail.into(),
        });
    }

    fn kind(&self, i: usize) -> Option<TokKind<'a>> {
        self.toks.get(i).map(|t| t.kind)
    }

    fn offset(&self, i: usize) -> usize {
        self.toks.get(i).map_or(self.text.len(), |t| t.span.0)
    }

    fn end_of(&self, i: usize) -> usize {
        self.toks[i].span.1
    }

    /// Checks the `<think>..</think><answer>..</answer>` skeleton and
    /// extracts the two block bodies.
    fn structure(&mut self) -> (String, String) {
        let structural: Vec<(usize, TokKind<'a>)> = self
            .toks
            .iter()
            .enumerate()
            .filter(|(_, t)| match t.kind {
                TokKind::Open(tag) | TokKind::Close(tag) => tag.is_structural(),
                TokKind::Text(_) => false,
            })
            .map(|(i, t)| (i, t.kind))
            .collect();

        let body = |parser: &Self, tag: Tag| -> Option<(usize, Option<usize>)> {
            let open = parser
                .toks
                .iter()
                .position(|t| t.kind == TokKind::Open(tag))?;
            let close = parser.toks[open + 1..]
                .iter()
                .position(|t| t.kind == TokKind::Close(tag))
                .map(|p| p + open + 1);
            Some((open, close))
        };
        let slice = |parser: &Self, range: Option<(usize, Option<usize>)>| -> String {
            match range {
                None => String::new(),
                Some((open, close)) => {
                    let start = parser.end_of(open);
                    let end = close.map_or(parser.text.len(), |c| parser.toks[c].span.0);
                    parser.text[start..end.max(start)].trim().to_string()
                }
            }
        };
        let think = body(self, Tag::Think);
        let answer = body(self, Tag::Answer);
        let think_text = slice(self, think);
        let answer_text = slice(self, answer);

        let opens = |tag: Tag| {
            structural
                .iter()
                .filter(|(_, k)| *k == TokKind::Open(tag))
                .count()
        };
        if opens(Tag::Answer) > 1 {
            let off = structural
                .iter()
                .filter(|(_, k)| *k == TokKind::Open(Tag::Answer))
                .nth(1)
                .map_or(0, |(i, _)| self.offset(*i));
            self.diag(off, DiagnosticKind::DuplicateAnswer, "more than one <answer> block; using the first", true);
        }

        let expected = [
            TokKind::Open(Tag::Think),
            TokKind::Close(Tag::Think),
            TokKind::Open(Tag::Answer),
            TokKind::Close(Tag::Answer),
        ];
        let kinds: Vec<TokKind<'a>> = structural.iter().map(|(_, k)| *k).collect();
        if kinds != expected {
            if opens(Tag::Answer) <= 1 {
                let detail = if think.is_none() {
                    "missing <think> block"
                } else if answer.is_none() {
                    "missing <answer> block"
                } else if answer.is_some_and(|(_, c)| c.is_none()) {
                    "unclosed <answer> block"
                } else {
                    "expected exactly one <think> block followed by one <answer> block"
                };
                let off = structural.first().map_or(0, |(i, _)| self.offset(*i));
                self.diag(off, DiagnosticKind::Structure, detail, true);
            } else {
                self.format_ok = false;
            }
            return (think_text, answer_text);
        }

        // Only whitespace may sit outside the blocks and between them.
        let idx: Vec<usize> = structural.iter().map(|(i, _)| *i).collect();
        let gaps = [
            (0, self.toks[idx[0]].span.0),
            (self.toks[idx[1]].span.1, self.toks[idx[2]].span.0),
            (self.toks[idx[3]].span.1, self.text.len()),
        ];
        for (s, e) in gaps {
            if !self.text[s..e].trim().is_empty() {
                self.diag(s, DiagnosticKind::Structure, "content outside <think>/<answer> blocks", true);
                break;
            }
        }
        (think_text, answer_text)
    }

    fn text_at(&self, i: usize) -> Option<&'a str> {
        match self.kind(i) {
            Some(TokKind::Text(s)) => Some(s),
            _ => None,
        }
    }

    /// Parses `<tag>TEXT</tag>` starting at `i`; returns the inner text and
    /// the index after the closing tag.
    fn simple_tag(&self, i: usize, tag: Tag) -> Option<(&'a str, usize)> {
        if self.kind(i) != Some(TokKind::Open(tag)) {
            return None;
        }
        let inner = self.text_at(i + 1)?;
        if self.kind(i + 2) != Some(TokKind::Close(tag)) {
            return None;
        }
        Some((inner, i + 3))
    }

    fn skip_whitespace(&self, i: usize) -> usize {
        match self.text_at(i) {
            Some(s) if s.trim().is_empty() => i + 1,
            _ => i,
        }
    }

    fn parse_box_at(&mut self, i: usize) -> Result<(BoundingBox, usize), usize> {
        let Some((inner, next)) = self.simple_tag(i, Tag::Box) else {
            self.diag(self.offset(i), DiagnosticKind::MalformedTag, "unterminated or empty <box> tag", true);
            return Err(i + 1);
        };
        match parse_box_numbers(inner) {
            Some(nums) => {
                let off = self.offset(i);
                Ok((self.canonical_box(nums, off), next))
            }
            None => {
                self.diag(
                    self.offset(i),
                    DiagnosticKind::MalformedTag,
                    format!("<box> needs [x1, y1, x2, y2], got {inner:?}"),
                    true,
                );
                Err(next)
            }
        }
    }

    fn parse_time_at(&mut self, i: usize) -> Result<(f64, usize), usize> {
        let Some((inner, next)) = self.simple_tag(i, Tag::T) else {
            self.diag(self.offset(i), DiagnosticKind::MalformedTag, "unterminated or empty <t> tag", true);
            return Err(i + 1);
        };
        match parse_seconds(inner) {
            Some(t) => Ok((t, next)),
            None => {
                self.diag(
                    self.offset(i),
                    DiagnosticKind::MalformedTag,
                    format!("<t> needs non-negative seconds, got {inner:?}"),
                    true,
                );
                Err(next)
            }
        }
    }

    fn canonical_box(&mut self, raw: [f64; 4], offset: usize) -> BoundingBox {
        let (sx, sy) = self.convention.scale();
        let scaled = [raw[0] / sx, raw[1] / sy, raw[2] / sx, raw[3] / sy];
        let mut v = scaled;
        let mut moved = 0.0f64;
        for c in v.iter_mut() {
            let clamped = c.clamp(0.0, 1.0);
            moved = moved.max((clamped - *c).abs());
            *c = clamped;
        }
        if moved > 0.0 {
            let fatal = moved > CLAMP_TOLERANCE;
            self.diag(offset, DiagnosticKind::Clamped, format!("coordinate clamped by {moved:e}"), fatal);
        }
        if v[0] > v[2] || v[1] > v[3] {
            self.diag(offset, DiagnosticKind::SwappedCorners, "box corners swapped", false);
        }
        BoundingBox {
            x1: v[0].min(v[2]),
            y1: v[1].min(v[3]),
            x2: v[0].max(v[2]),
            y2: v[1].max(v[3]),
        }
    }

    fn tuple_at(&mut self, i: usize) -> usize {
        let start = self.offset(i);
        let Some((name, mut j)) = self.simple_tag(i, Tag::Obj) else {
            self.diag(start, DiagnosticKind::MalformedTag, "unterminated or empty <obj> tag", true);
            return i + 1;
        };
        let name = name.trim();
        if name.is_empty() {
            self.diag(start, DiagnosticKind::MalformedTag, "empty object name", true);
            return j;
        }
        j = self.skip_whitespace(j);
        if self.kind(j) != Some(TokKind::Open(Tag::Box)) {
            self.diag(start, DiagnosticKind::IncompleteTuple, format!("<obj>{name}</obj> is not followed by a <box>"), true);
            return j;
        }
        let (bbox, after_box) = match self.parse_box_at(j) {
            Ok(v) => v,
            Err(resume) => return resume,
        };
        j = after_box;
        if let Some(s) = self.text_at(j) {
            let s = s.trim();
            if s.is_empty() || s == "at" {
                j += 1;
            }
        }
        if self.kind(j) != Some(TokKind::Open(Tag::T)) {
            self.diag(start, DiagnosticKind::IncompleteTuple, format!("<obj>{name}</obj><box> is not followed by a <t>"), true);
            return j;
        }
        let (timestamp, after_t) = match self.parse_time_at(j) {
            Ok(v) => v,
            Err(resume) => return resume,
        };
        let mut end = self.offset(after_t);
        if let Some(s) = self.text_at(after_t) {
            if s.starts_with('s') {
                end += 1;
            }
        }
        let tuple = GroundedTuple {
            object_name: name.to_string(),
            timestamp,
            bbox,
        };
        self.constructs.push((start..end, Construct::Tuple(tuple)));
        after_t
    }

    fn grounding(&mut self) {
        let mut i = 0;
        while i < self.toks.len() {
            match self.toks[i].kind {
                TokKind::Open(Tag::Obj) => i = self.tuple_at(i),
                TokKind::Open(Tag::Box) => {
                    i = match self.parse_box_at(i) {
                        Ok((_, next)) => next,
                        Err(resume) => resume,
                    }
                }
                TokKind::Open(Tag::T) => {
                    let start = self.offset(i);
                    i = match self.parse_time_at(i) {
                        Ok((t, next)) => {
                            let mut end = self.offset(next);
                            if self.text_at(next).is_some_and(|s| s.starts_with('s')) {
                                end += 1;
                            }
                            self.constructs.push((start..end, Construct::BareTimestamp(t)));
                            next
                        }
                        Err(resume) => resume,
                    }
                }
                TokKind::Close(tag) if !tag.is_structural() => {
                    let off = self.offset(i);
                    self.diag(off, DiagnosticKind::StrayTag, format!("unmatched closing {tag:?} tag"), true);
                    i += 1;
                }
                _ => i += 1,
            }
        }
    }
}

fn parse_box_numbers(inner: &str) -> Option<[f64; 4]> {
    let body = inner.trim().strip_prefix('[')?.strip_suffix(']')?;
    let nums: Vec<f64> = body
        .split(',')
        .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()?;
    nums.try_into().ok()
}

fn parse_seconds(inner: &str) -> Option<f64> {
    let s = inner.trim();
    let s = s.strip_suffix('s').unwrap_or(s).trim_end();
    let v = s.parse::<f64>().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

fn run_parser(text: &str, convention: CoordinateConvention) -> (ParsedTrace, Vec<(Range<usize>, Construct)>) {
    let mut p = Parser {
        text,
        toks: tokenize(text),
        convention,
        diagnostics: Vec::new(),
        format_ok: true,
        constructs: Vec::new(),
    };
    let (think_text, answer_text) = p.structure();
    p.grounding();
    let mut tuples = Vec::new();
    let mut bare_timestamps = Vec::new();
    for (_, c) in &p.constructs {
        match c {
            Construct::Tuple(t) => tuples.push(t.clone()),
            Construct::BareTimestamp(t) => bare_timestamps.push(*t),
        }
    }
    let trace = ParsedTrace {
        think_text,
        answer_text,
        tuples,
        bare_timestamps,
        format_ok: p.format_ok,
        diagnostics: p.diagnostics,
    };
    (trace, p.constructs)
}

/// Parses raw model text. Never fails; see the module docs for the grammar.
pub fn parse_trace(text: &str, convention: CoordinateConvention) -> ParsedTrace {
    run_parser(text, convention).0
}

/// Rewrites every recognized tuple and bare timestamp in `text` into the
/// canonical normalized form, leaving everything else untouched.
pub fn canonicalize(text: &str, convention: CoordinateConvention) -> String {
    let (_, constructs) = run_parser(text, convention);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, c) in constructs {
        out.push_str(&text[last..range.start]);
        match c {
            Construct::Tuple(t) => out.push_str(&render_tuple(&t)),
            Construct::BareTimestamp(t) => out.push_str(&format!("<t>{t}</t>s")),
        }
        last = range.end;
    }
    out.push_str(&text[last..]);
    out
}

/// Typed final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Choice(char),
    Text(String),
    Box(BoundingBox),
    Interval(Interval),
}

/// Options for [`extract_answer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Letters accepted as multiple-choice options.
    pub mcq_options: String,
    pub convention: CoordinateConvention,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            mcq_options: "ABCDE".to_string(),
            convention: CoordinateConvention::Normalized,
        }
    }
}

static NUM: &str = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?";

static BOX_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\[\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*\]"
    ))
    .expect("box regex")
});

static INTERVAL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)({NUM})\s*(?:s|sec|secs|seconds)?\s*(?:,|-|–|~|to|and|until)\s*({NUM})"
    ))
    .expect("interval regex")
});

/// First standalone option letter in `text`.
pub fn first_option_letter(text: &str, options: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    chars.iter().enumerate().find_map(|(i, &c)| {
        let standalone = options.contains(c)
            && (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        standalone.then_some(c)
    })
}

/// Pulls the task-specific answer out of the `<answer>` body.
pub fn extract_answer(trace: &ParsedTrace, task: TaskKind, cfg: &ExtractConfig) -> Result<AnswerValue, TraceError> {
    let text = trace.answer_text.as_str();
    let found = match task {
        TaskKind::Mcq => first_option_letter(text, &cfg.mcq_options).map(AnswerValue::Choice),
        TaskKind::OpenEnded => {
            let t = text.trim();
            (!t.is_empty()).then(|| AnswerValue::Text(t.to_string()))
        }
        TaskKind::SpatialGrounding => BOX_RE.captures(text).and_then(|c| {
            let nums: Vec<f64> = (1..=4).map(|k| c[k].parse::<f64>().unwrap_or(f64::NAN)).collect();
            if nums.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let (sx, sy) = cfg.convention.scale();
            let v = [
                (nums[0] / sx).clamp(0.0, 1.0),
                (nums[1] / sy).clamp(0.0, 1.0),
                (nums[2] / sx).clamp(0.0, 1.0),
                (nums[3] / sy).clamp(0.0, 1.0),
            ];
            Some(AnswerValue::Box(BoundingBox {
                x1: v[0].min(v[2]),
                y1: v[1].min(v[3]),
                x2: v[0].max(v[2]),
                y2: v[1].max(v[3]),
            }))
        }),
        TaskKind::TemporalGrounding => INTERVAL_RE.captures(text).and_then(|c| {
            let a = c[1].parse::<f64>().ok()?;
            let b = c[2].parse::<f64>().ok()?;
            Interval::new(a.min(b), a.max(b)).ok().map(AnswerValue::Interval)
        }),
    };
    found.ok_or(TraceError::NoAnswerFound(task))
}

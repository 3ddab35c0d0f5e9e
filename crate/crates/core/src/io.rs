//! JSONL records and streaming readers.
//!
//! Every file is one JSON object per line. A dataset file may start with a
//! header record `{"format": "groundcoach", "version": 1, "box_convention": ...}`
//! declaring how box numbers in its traces are scaled. Malformed or invalid
//! lines are skipped with a line-numbered warning and counted; only an I/O
//! failure or an incompatible header is fatal.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::Interval;
use crate::metrics::ChainScores;
use crate::rewards::{Component, GroundTruthAnnotation, GroundingCounts, RewardBreakdown};
use crate::trace::{CoordinateConvention, TaskKind};

pub const FORMAT_NAME: &str = "groundcoach";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub box_convention: CoordinateConvention,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            box_convention: CoordinateConvention::Normalized,
        }
    }
}

/// Records that can reject themselves after parsing.
pub trait Validate {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub frame_dir: PathBuf,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub task_kind: TaskKind,
    pub gt: GroundTruthAnnotation,
    /// Frame rate of `frame_dir`, used to place keyframes given only by
    /// timestamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl SampleRecord {
    /// Question text with options appended one per line.
    pub fn full_question(&self) -> String {
        match &self.options {
            Some(opts) if !opts.is_empty() => format!("{}\n{}", self.question, opts.join("\n")),
            _ => self.question.clone(),
        }
    }
}

impl Validate for SampleRecord {
    fn validate(&self) -> Result<(), String> {
        if self.sample_id.trim().is_empty() {
            return Err("empty sample_id".into());
        }
        if !self.gt.has_answer_for(self.task_kind) {
            let field = match self.task_kind {
                TaskKind::Mcq | TaskKind::OpenEnded => "gt.answer",
                TaskKind::SpatialGrounding => "gt.answer_box",
                TaskKind::TemporalGrounding => "gt.answer_interval",
            };
            return Err(format!("{} sample {} lacks {field}", self.task_kind, self.sample_id));
        }
        if let Some(fps) = self.fps {
            if !(fps > 0.0 && fps.is_finite()) {
                return Err(format!("fps must be positive, got {fps}"));
            }
        }
        Ok(())
    }
}

/// One rollout to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_id: String,
    #[serde(default)]
    pub rollout_id: usize,
    #[serde(alias = "trace_text")]
    pub text: String,
}

impl Validate for TraceRecord {}

/// Output of `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub sample_id: String,
    pub rollout_id: usize,
    pub trace_text: String,
    pub format_ok: bool,
    pub rewards: RewardBreakdown,
    pub counts: GroundingCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unsupervised: Vec<Component>,
}

impl Validate for ScoredRecord {}

/// Named set of per-chain scores, one row of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub name: String,
    pub chains: Vec<ChainScores>,
    /// Published aggregates in percent, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mam: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_mlgm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPair {
    pub pred: Interval,
    pub gt: Interval,
}

/// Any line `metrics` understands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsInput {
    Chains(ChainRow),
    Interval(IntervalPair),
    Scored(ScoredRecord),
}

impl Validate for MetricsInput {
    fn validate(&self) -> Result<(), String> {
        if let MetricsInput::Chains(row) = self {
            if row.chains.is_empty() {
                return Err(format!("row {} has no chains", row.name));
            }
            for c in &row.chains {
                for v in [c.acc, c.m_tiou, c.m_viou] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(format!("row {}: chain score {v} outside [0, 1]", row.name));
                    }
                }
            }
        }
        Ok(())
    }
}

impl Validate for crate::selector_data::LabelInput {
    fn validate(&self) -> Result<(), String> {
        if self.reasoner_outputs.is_empty() {
            return Err(format!("sample {} has no reasoner outputs", self.sample_id));
        }
        Ok(())
    }
}

impl Validate for crate::coach::ScriptedEntry {}

/// A skipped line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

/// Streaming JSONL reader. Yields valid records; bad lines are logged,
/// recorded in [`JsonlStream::diagnostics`] and skipped.
pub struct JsonlStream<R, T> {
    path: PathBuf,
    lines: io::Lines<BufReader<R>>,
    line_no: usize,
    pending: Option<(usize, String)>,
    header: Option<DatasetHeader>,
    diagnostics: Vec<LineDiagnostic>,
    _marker: PhantomData<T>,
}

fn is_header(v: &serde_json::Value) -> bool {
    v.as_object().is_some_and(|o| o.contains_key("format") && o.contains_key("version"))
}

impl<R: io::Read, T: DeserializeOwned + Validate> JsonlStream<R, T> {
    /// Reads an optional header from the first non-blank line.
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Result<Self, IoError> {
        let mut s = Self {
            path: path.into(),
            lines: BufReader::new(reader).lines(),
            line_no: 0,
            pending: None,
            header: None,
            diagnostics: Vec::new(),
            _marker: PhantomData,
        };
        while let Some((n, line)) = s.next_line()? {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<serde_json::Value>(&line) {
                Ok(v) if is_header(&v) => {
                    let h: DatasetHeader = serde_json::from_value(v).map_err(|e| s.schema(n, format!("bad header: {e}")))?;
                    if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                        return Err(s.schema(
                            n,
                            format!(
                                "unsupported header {} v{} (expected {FORMAT_NAME} v{FORMAT_VERSION})",
                                h.format, h.version
                            ),
                        ));
                    }
                    s.header = Some(h);
                }
                _ => s.pending = Some((n, line)),
            }
            break;
        }
        Ok(s)
    }

    fn schema(&self, line: usize, message: String) -> IoError {
        IoError::Schema {
            path: self.path.clone(),
            line,
            message,
        }
    }

    fn next_line(&mut self) -> Result<Option<(usize, String)>, IoError> {
        match self.lines.next() {
            None => Ok(None),
            Some(Ok(l)) => {
                self.line_no += 1;
                Ok(Some((self.line_no, l)))
            }
            Some(Err(e)) => Err(IoError::Io {
                path: self.path.clone(),
                source: e,
            }),
        }
    }

    pub fn header(&self) -> Option<&DatasetHeader> {
        self.header.as_ref()
    }

    /// Box convention declared by the header, if any.
    pub fn box_convention(&self) -> Option<CoordinateConvention> {
        self.header.as_ref().map(|h| h.box_convention)
    }

    pub fn diagnostics(&self) -> &[LineDiagnostic] {
        &self.diagnostics
    }

    pub fn skipped(&self) -> usize {
        self.diagnostics.len()
    }

    fn skip(&mut self, line: usize, message: String) {
        log::warn!("{}:{line}: skipped: {message}", self.path.display());
        self.diagnostics.push(LineDiagnostic { line, message });
    }
}

impl<R: io::Read, T: DeserializeOwned + Validate> Iterator for JsonlStream<R, T> {
    type Item = Result<T, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (n, line) = match self.pending.take() {
                Some(p) => p,
                None => match self.next_line() {
                    Ok(Some(p)) => p,
                    Ok(None) => return None,
                    Err(e) => return Some(Err(e)),
                },
            };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<T>(&line) {
                Ok(rec) => match rec.validate() {
                    Ok(()) => return Some(Ok(rec)),
                    Err(m) => self.skip(n, m),
                },
                Err(e) => self.skip(n, e.to_string()),
            }
        }
    }
}

pub fn open_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<JsonlStream<File, T>, IoError> {
    let f = File::open(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    JsonlStream::new(f, path)
}

/// Everything from a JSONL file, with its header and skipped-line count.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub header: Option<DatasetHeader>,
    pub records: Vec<T>,
    pub diagnostics: Vec<LineDiagnostic>,
}

pub fn read_all<T: DeserializeOwned + Validate>(path: &Path) -> Result<Loaded<T>, IoError> {
    let mut stream = open_jsonl::<T>(path)?;
    let mut records = Vec::new();
    for r in stream.by_ref() {
        records.push(r?);
    }
    Ok(Loaded {
        header: stream.header.take(),
        records,
        diagnostics: std::mem::take(&mut stream.diagnostics),
    })
}

pub fn load_dataset(path: &Path) -> Result<Loaded<SampleRecord>, IoError> {
    read_all(path)
}

/// Writes one compact JSON object per line.
pub fn write_jsonl_to<W: Write, T: Serialize>(mut w: W, header: Option<&DatasetHeader>, records: &[T]) -> io::Result<()> {
    if let Some(h) = header {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&DatasetHeader>, records: &[T]) -> Result<(), IoError> {
    let io_err = |e| IoError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let f = File::create(path).map_err(io_err)?;
    write_jsonl_to(BufWriter::new(f), header, records).map_err(io_err)
}

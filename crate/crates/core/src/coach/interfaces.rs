//! Policy, selector and prompter interfaces with reference implementations.
//!
//! External commands speak line-delimited JSON over stdin/stdout, one
//! request line answered by one response line:
//!
//! ```text
//! > {"type":"policy","sample_id":"s1","frame_paths":[...],"question":"...","prompt":"raw","g":4,"seed":7}
//! < {"completions":["<think>...</think><answer>A</answer>", ...]}
//! > {"type":"selector","sample_id":"s1","frame_paths":[...],"question":"..."}
//! < {"prompt":"darken"}
//! ```
//!
//! Either side may answer `{"error":"..."}` instead.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::CoachSample;
use crate::prompts::{
    build_prompted_sample, load_frames, save_frames, PromptConfig, PromptError, PromptInput, PromptKind, RelevanceProvider,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRequest<'a> {
    pub sample_id: &'a str,
    pub frame_paths: &'a [PathBuf],
    pub question: &'a str,
    pub prompt: PromptKind,
    pub g: usize,
    pub seed: u64,
}

pub trait Policy: Send + Sync {
    /// Exactly `req.g` completions for the given input.
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<Vec<String>, String>;

    /// Whether the coach may call this from several workers at once.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<F> Policy for F
where
    F: Fn(&PolicyRequest<'_>) -> Result<Vec<String>, String> + Send + Sync,
{
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<Vec<String>, String> {
        self(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectorRequest<'a> {
    pub sample_id: &'a str,
    pub frame_paths: &'a [PathBuf],
    pub question: &'a str,
}

pub trait Selector: Send + Sync {
    fn select(&self, req: &SelectorRequest<'_>) -> Result<PromptKind, String>;

    fn concurrent(&self) -> bool {
        true
    }
}

/// A constant selector.
impl Selector for PromptKind {
    fn select(&self, _req: &SelectorRequest<'_>) -> Result<PromptKind, String> {
        Ok(*self)
    }
}

impl<F> Selector for F
where
    F: Fn(&SelectorRequest<'_>) -> Result<PromptKind, String> + Send + Sync,
{
    fn select(&self, req: &SelectorRequest<'_>) -> Result<PromptKind, String> {
        self(req)
    }
}

/// Looks the prompt up by sample id.
#[derive(Debug, Clone, Default)]
pub struct TableSelector {
    pub table: HashMap<String, PromptKind>,
    pub fallback: Option<PromptKind>,
}

#[derive(Deserialize)]
struct TableRow {
    sample_id: String,
    label: PromptKind,
}

impl TableSelector {
    /// Reads JSONL rows carrying `sample_id` and `label`, the shape written
    /// by pseudo-label building. Blank lines are ignored.
    pub fn from_jsonl(text: &str, fallback: Option<PromptKind>) -> Result<Self, String> {
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: TableRow = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            table.insert(row.sample_id, row.label);
        }
        Ok(Self { table, fallback })
    }
}

impl Selector for TableSelector {
    fn select(&self, req: &SelectorRequest<'_>) -> Result<PromptKind, String> {
        self.table
            .get(req.sample_id)
            .copied()
            .or(self.fallback)
            .ok_or_else(|| format!("no prompt for sample {}", req.sample_id))
    }
}

/// Fixture row for [`ScriptedPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub sample_id: String,
    pub baseline: Vec<String>,
    #[serde(default)]
    pub prompted: Vec<String>,
    /// Overrides `prompted` for specific kinds.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_kind: BTreeMap<PromptKind, Vec<String>>,
}

/// Replays fixed completions per sample, cycling when fewer than `g` are
/// scripted. Raw requests get `baseline`, prompted ones `by_kind` or
/// `prompted`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    entries: HashMap<String, ScriptedEntry>,
}

impl ScriptedPolicy {
    pub fn new(entries: impl IntoIterator<Item = ScriptedEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.sample_id.clone(), e)).collect(),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str::<ScriptedEntry>(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Policy for ScriptedPolicy {
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<Vec<String>, String> {
        let e = self
            .entries
            .get(req.sample_id)
            .ok_or_else(|| format!("no scripted completions for {}", req.sample_id))?;
        let list = match req.prompt {
            PromptKind::Raw => &e.baseline,
            k => e.by_kind.get(&k).unwrap_or(&e.prompted),
        };
        if list.is_empty() {
            return Err(format!("no scripted {} completions for {}", req.prompt, req.sample_id));
        }
        Ok(list.iter().cycle().take(req.g).cloned().collect())
    }
}

struct Pipe {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A long-lived subprocess answering one JSON line per request line.
/// Calls are serialized.
pub struct ExternalCommand {
    program: String,
    pipe: Mutex<Pipe>,
}

impl ExternalCommand {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot start {program}: {e}"))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().ok_or("child has no stdout")?);
        Ok(Self {
            program: program.to_string(),
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }

    pub fn call(&self, request: &serde_json::Value) -> Result<serde_json::Value, String> {
        let mut pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        let stdin = pipe.stdin.as_mut().ok_or("stdin closed")?;
        let line = serde_json::to_string(request).map_err(|e| e.to_string())?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| format!("{}: write failed: {e}", self.program))?;
        let mut reply = String::new();
        let n = pipe
            .stdout
            .read_line(&mut reply)
            .map_err(|e| format!("{}: read failed: {e}", self.program))?;
        if n == 0 {
            return Err(format!("{} exited without replying", self.program));
        }
        let value: serde_json::Value =
            serde_json::from_str(reply.trim()).map_err(|e| format!("{}: bad reply: {e}", self.program))?;
        if let Some(err) = value.get("error") {
            return Err(match err.as_str() {
                Some(s) => s.to_string(),
                None => err.to_string(),
            });
        }
        Ok(value)
    }
}

impl Drop for ExternalCommand {
    fn drop(&mut self) {
        let pipe = self.pipe.get_mut().unwrap_or_else(|e| e.into_inner());
        // Closing stdin lets well-behaved children exit on EOF.
        pipe.stdin.take();
        if pipe.child.wait().is_err() {
            let _ = pipe.child.kill();
        }
    }
}

fn tagged(kind: &str, req: &impl Serialize) -> Result<serde_json::Value, String> {
    let mut v = serde_json::to_value(req).map_err(|e| e.to_string())?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("type".into(), kind.into());
    }
    Ok(v)
}

pub struct ExternalPolicy(pub ExternalCommand);

impl Policy for ExternalPolicy {
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<Vec<String>, String> {
        let reply = self.0.call(&tagged("policy", req)?)?;
        serde_json::from_value(reply.get("completions").cloned().unwrap_or_default())
            .map_err(|e| format!("reply lacks a completions list: {e}"))
    }

    fn concurrent(&self) -> bool {
        false
    }
}

pub struct ExternalSelector(pub ExternalCommand);

impl Selector for ExternalSelector {
    fn select(&self, req: &SelectorRequest<'_>) -> Result<PromptKind, String> {
        let reply = self.0.call(&tagged("selector", req)?)?;
        let token = reply
            .get("prompt")
            .and_then(|p| p.as_str())
            .ok_or("reply lacks a prompt token")?;
        token.parse().map_err(|e: PromptError| e.to_string())
    }

    fn concurrent(&self) -> bool {
        false
    }
}

/// The prompted input `(x', q')` handed to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedInput {
    pub frame_paths: Vec<PathBuf>,
    pub question: String,
}

pub trait VisualPrompter: Send + Sync {
    fn prompt(&self, sample: &CoachSample, kind: PromptKind) -> Result<PromptedInput, PromptError>;
}

/// Appends the hint and leaves frames alone; for policies that render the
/// prompt themselves or ignore pixels.
#[derive(Debug, Clone, Default)]
pub struct HintOnlyPrompter {
    pub cfg: PromptConfig,
}

impl VisualPrompter for HintOnlyPrompter {
    fn prompt(&self, sample: &CoachSample, kind: PromptKind) -> Result<PromptedInput, PromptError> {
        Ok(PromptedInput {
            frame_paths: sample.frame_paths.clone(),
            question: self.cfg.prompted_question(&sample.question, kind),
        })
    }
}

/// Renders prompted frames to `<out_dir>/<sample_id>/<kind>/`.
pub struct RenderingPrompter {
    pub cfg: PromptConfig,
    pub out_dir: PathBuf,
    pub provider: Option<Box<dyn RelevanceProvider>>,
}

impl RenderingPrompter {
    pub fn new(cfg: PromptConfig, out_dir: impl AsRef<Path>, provider: Option<Box<dyn RelevanceProvider>>) -> Self {
        Self {
            cfg,
            out_dir: out_dir.as_ref().to_path_buf(),
            provider,
        }
    }
}

impl VisualPrompter for RenderingPrompter {
    fn prompt(&self, sample: &CoachSample, kind: PromptKind) -> Result<PromptedInput, PromptError> {
        if kind == PromptKind::Raw {
            return Ok(PromptedInput {
                frame_paths: sample.frame_paths.clone(),
                question: sample.question.clone(),
            });
        }
        let frames = load_frames(&sample.frame_paths)?;
        let input = PromptInput {
            sample_id: &sample.sample_id,
            frames: &frames,
            question: &sample.question,
            keyframes: &sample.keyframes,
        };
        let out = build_prompted_sample(&input, kind, self.provider.as_deref(), &self.cfg)?;
        let dir = self.out_dir.join(&sample.sample_id).join(kind.token());
        Ok(PromptedInput {
            frame_paths: save_frames(&out.frames, &dir)?,
            question: out.question,
        })
    }
}

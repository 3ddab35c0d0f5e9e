//! Visual prompts: pixel edits on keyframes plus a question hint.

mod glyphs;
pub mod relevance;
pub mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::BoundingBox;
pub use glyphs::{render_digits, GLYPH_H, GLYPH_W};
pub use relevance::{FileRelevanceProvider, GaussianBumpProvider, RelevanceMap, RelevanceProvider, RelevanceQuery};
pub use render::{RED, 
    apply_attention_overlay, apply_darken, apply_frame_numbers, apply_red_circle, glyph_scale, heat_color,
    stroke_width,
};

const DEFAULT_HINTS: &str = include_str!("../../assets/hints.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt kind {0} needs keyframe boxes but none were given")]
    MissingBoxes(PromptKind),
    #[error("attention overlay needs a relevance provider")]
    MissingRelevanceProvider,
    #[error("keyframe index {index} out of range for {frames} frames")]
    KeyframeOutOfRange { index: usize, frames: usize },
    #[error("video has no frames")]
    EmptyVideo,
    #[error("frames differ in size: {0}")]
    InconsistentFrames(String),
    #[error("unknown prompt kind {0:?}")]
    UnknownKind(String),
    #[error("relevance grid: {0}")]
    RelevanceFormat(String),
    #[error("hint templates: {0}")]
    Hints(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "numpro")]
    FrameNumber,
    #[serde(rename = "circle")]
    RedCircle,
    #[serde(rename = "darken")]
    Darken,
    #[serde(rename = "api_prompt")]
    AttentionOverlay,
}

impl PromptKind {
    /// Tie-break order, least invasive first.
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Raw,
        PromptKind::FrameNumber,
        PromptKind::RedCircle,
        PromptKind::Darken,
        PromptKind::AttentionOverlay,
    ];

    pub fn token(self) -> &'static str {
        match self {
            PromptKind::Raw => "raw",
            PromptKind::FrameNumber => "numpro",
            PromptKind::RedCircle => "circle",
            PromptKind::Darken => "darken",
            PromptKind::AttentionOverlay => "api_prompt",
        }
    }

    /// Position in the tie-break order; lower wins.
    pub fn priority(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap_or(usize::MAX)
    }

    pub fn needs_boxes(self) -> bool {
        matches!(self, PromptKind::RedCircle | PromptKind::Darken)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|k| k.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| PromptError::UnknownKind(s.to_string()))
    }
}

/// Parses a `kind = "hint"` TOML table.
pub fn parse_hints(text: &str) -> Result<BTreeMap<PromptKind, String>, PromptError> {
    let table: BTreeMap<String, String> = toml::from_str(text).map_err(|e| PromptError::Hints(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (k, v) in table {
        let kind: PromptKind = k.parse()?;
        if kind != PromptKind::Raw {
            out.insert(kind, v);
        }
    }
    Ok(out)
}

pub fn default_hints() -> BTreeMap<PromptKind, String> {
    parse_hints(DEFAULT_HINTS).expect("bundled hints.toml is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Extra ellipse size relative to the box.
    pub circle_margin: f64,
    /// Stroke width as a fraction of the frame diagonal.
    pub stroke_fraction: f64,
    pub min_stroke_px: f64,
    pub darken_factor: f64,
    pub overlay_weight: f64,
    pub glyph_height_fraction: f64,
    /// Label frames that are not keyframes too.
    pub number_all_frames: bool,
    #[serde(skip)]
    pub hints: BTreeMap<PromptKind, String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            circle_margin: 0.10,
            stroke_fraction: 0.004,
            min_stroke_px: 2.0,
            darken_factor: 0.3,
            overlay_weight: 0.5,
            glyph_height_fraction: 0.06,
            number_all_frames: true,
            hints: default_hints(),
        }
    }
}

impl PromptConfig {
    pub fn hint(&self, kind: PromptKind) -> Option<&str> {
        if kind == PromptKind::Raw {
            return None;
        }
        self.hints.get(&kind).map(String::as_str)
    }

    /// `q ⊕ hint(v)`; the question is returned unchanged for raw or a kind
    /// with no template.
    pub fn prompted_question(&self, question: &str, kind: PromptKind) -> String {
        match self.hint(kind) {
            Some(h) if !h.is_empty() => format!("{question}\n{h}"),
            _ => question.to_string(),
        }
    }
}

/// Indices `floor(i * len / n)`; shorter videos repeat the last frame.
pub fn uniform_sample_frames(len: usize, n: usize) -> Result<Vec<usize>, PromptError> {
    if len == 0 || n == 0 {
        return Err(PromptError::EmptyVideo);
    }
    if len < n {
        return Ok((0..n).map(|i| i.min(len - 1)).collect());
    }
    Ok((0..n).map(|i| i * len / n).collect())
}

/// A keyframe position in the frame list and its annotated boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeBoxes {
    pub index: usize,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct PromptInput<'a> {
    pub sample_id: &'a str,
    pub frames: &'a [RgbImage],
    pub question: &'a str,
    pub keyframes: &'a [KeyframeBoxes],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptedSample {
    pub frames: Vec<RgbImage>,
    pub question: String,
    pub applied: PromptKind,
    pub keyframe_indices: Vec<usize>,
}

/// Builds `(x', q')` for one prompt kind. Only keyframes are edited, except
/// frame numbering which labels every frame.
pub fn build_prompted_sample(
    input: &PromptInput<'_>,
    kind: PromptKind,
    provider: Option<&dyn RelevanceProvider>,
    cfg: &PromptConfig,
) -> Result<PromptedSample, PromptError> {
    if input.frames.is_empty() {
        return Err(PromptError::EmptyVideo);
    }
    let dims = input.frames[0].dimensions();
    if let Some(f) = input.frames.iter().find(|f| f.dimensions() != dims) {
        return Err(PromptError::InconsistentFrames(format!("{:?} vs {:?}", f.dimensions(), dims)));
    }
    let mut keyframe_indices = Vec::new();
    for kf in input.keyframes {
        if kf.index >= input.frames.len() {
            return Err(PromptError::KeyframeOutOfRange {
                index: kf.index,
                frames: input.frames.len(),
            });
        }
        if !keyframe_indices.contains(&kf.index) {
            keyframe_indices.push(kf.index);
        }
    }
    let boxes_for = |i: usize| -> Vec<BoundingBox> {
        input
            .keyframes
            .iter()
            .filter(|k| k.index == i)
            .flat_map(|k| k.boxes.iter().copied())
            .collect()
    };
    if kind.needs_boxes() && input.keyframes.iter().all(|k| k.boxes.is_empty()) {
        return Err(PromptError::MissingBoxes(kind));
    }
    let mut frames = input.frames.to_vec();
    match kind {
        PromptKind::Raw => {}
        PromptKind::RedCircle => {
            for &i in &keyframe_indices {
                frames[i] = apply_red_circle(&frames[i], &boxes_for(i), cfg);
            }
        }
        PromptKind::Darken => {
            for &i in &keyframe_indices {
                frames[i] = apply_darken(&frames[i], &boxes_for(i), cfg.darken_factor);
            }
        }
        PromptKind::FrameNumber => {
            frames = apply_frame_numbers(&frames, &keyframe_indices, cfg);
        }
        PromptKind::AttentionOverlay => {
            let provider = provider.ok_or(PromptError::MissingRelevanceProvider)?;
            for &i in &keyframe_indices {
                let query = RelevanceQuery {
                    sample_id: input.sample_id,
                    frame_index: i,
                    question: input.question,
                    width: dims.0,
                    height: dims.1,
                };
                let map = provider.relevance(&query)?;
                frames[i] = apply_attention_overlay(&frames[i], &map, cfg.overlay_weight);
            }
        }
    }
    Ok(PromptedSample {
        frames,
        question: cfg.prompted_question(input.question, kind),
        applied: kind,
        keyframe_indices,
    })
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files in `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, PromptError> {
    let io_err = |e| PromptError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let p = entry.map_err(io_err)?.path();
        if p.is_file() && is_image_file(&p) {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_frames(paths: &[PathBuf]) -> Result<Vec<RgbImage>, PromptError> {
    paths
        .iter()
        .map(|p| {
            image::open(p).map(|img| img.to_rgb8()).map_err(|e| PromptError::Image {
                path: p.clone(),
                source: e,
            })
        })
        .collect()
}

/// Writes frames as `frame_0000.png`, ... and returns the paths.
pub fn save_frames(frames: &[RgbImage], dir: &Path) -> Result<Vec<PathBuf>, PromptError> {
    std::fs::create_dir_all(dir).map_err(|e| PromptError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("frame_{i:04}.png"));
            f.save(&path).map_err(|e| PromptError::Image {
                path: path.clone(),
                source: e,
            })?;
            Ok(path)
        })
        .collect()
}

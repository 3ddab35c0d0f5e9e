//! Relevance grids for the attention overlay and the providers that supply
//! them.
//!
//! Grid file format (UTF-8 text, `#` starts a comment line):
//!
//! ```text
//! # optional comments
//! ROWS COLS
//! v00 v01 ... (ROWS * COLS non-negative numbers, any whitespace layout)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::PromptError;

/// Non-negative 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl RelevanceMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, PromptError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(PromptError::RelevanceFormat(format!(
                "{rows}x{cols} grid needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(PromptError::RelevanceFormat(format!("relevance must be finite and >= 0, got {v}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Min-max normalized copy, or `None` for a constant grid.
    pub fn normalized(&self) -> Option<RelevanceMap> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if !(span > 0.0) {
            return None;
        }
        Some(RelevanceMap {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| (v - min) / span).collect(),
        })
    }

    /// Bilinear sample at fractional grid coordinates (cell centers at
    /// integers), clamped to the grid.
    pub fn sample_bilinear(&self, gx: f64, gy: f64) -> f64 {
        let gx = gx.clamp(0.0, (self.cols - 1) as f64);
        let gy = gy.clamp(0.0, (self.rows - 1) as f64);
        let (c0, r0) = (gx.floor() as usize, gy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.cols - 1), (r0 + 1).min(self.rows - 1));
        let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
        let top = self.get(r0, c0) * (1.0 - fx) + self.get(r0, c1) * fx;
        let bottom = self.get(r1, c0) * (1.0 - fx) + self.get(r1, c1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        let mut dim = |what: &str| -> Result<usize, PromptError> {
            tokens
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| PromptError::RelevanceFormat(format!("missing or invalid {what}")))
        };
        let rows = dim("row count")?;
        let cols = dim("column count")?;
        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| PromptError::RelevanceFormat(format!("not a number: {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows, cols, values)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// What a provider is asked for.
#[derive(Debug, Clone)]
pub struct RelevanceQuery<'a> {
    pub sample_id: &'a str,
    pub frame_index: usize,
    pub question: &'a str,
    pub width: u32,
    pub height: u32,
}

/// Supplies query-conditioned relevance grids for keyframes.
pub trait RelevanceProvider: Send + Sync {
    fn relevance(&self, query: &RelevanceQuery<'_>) -> Result<RelevanceMap, PromptError>;
}

/// Reads precomputed grids from `<root>/<sample_id>/<frame_index>.txt`.
#[derive(Debug, Clone)]
pub struct FileRelevanceProvider {
    root: PathBuf,
}

impl FileRelevanceProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, sample_id: &str, frame_index: usize) -> PathBuf {
        self.root.join(sample_id).join(format!("{frame_index}.txt"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl RelevanceProvider for FileRelevanceProvider {
    fn relevance(&self, query: &RelevanceQuery<'_>) -> Result<RelevanceMap, PromptError> {
        let path = self.path_for(query.sample_id, query.frame_index);
        let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
            path: path.clone(),
            source: e,
        })?;
        RelevanceMap::parse(&text)
    }
}

/// Synthetic single Gaussian bump, for tests and dry runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBumpProvider {
    /// Bump center in normalized frame coordinates.
    pub center: (f64, f64),
    /// Standard deviation in normalized units.
    pub sigma: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for GaussianBumpProvider {
    fn default() -> Self {
        Self {
            center: (0.5, 0.5),
            sigma: 0.15,
            rows: 24,
            cols: 24,
        }
    }
}

impl RelevanceProvider for GaussianBumpProvider {
    fn relevance(&self, _query: &RelevanceQuery<'_>) -> Result<RelevanceMap, PromptError> {
        let mut values = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let x = (c as f64 + 0.5) / self.cols as f64 - self.center.0;
                let y = (r as f64 + 0.5) / self.rows as f64 - self.center.1;
                values.push((-(x * x + y * y) / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        RelevanceMap::new(self.rows, self.cols, values)
    }
}

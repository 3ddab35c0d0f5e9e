//! Object-name identity predicates.
//!
//! [`soft_identity_match`] is the binary exact-or-substring test used inside
//! the spatial reward. [`hierarchical_similarity`] is the graded score used
//! when building prompt-selector pseudo-labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Minimum normalized edit similarity for the fuzzy tier.
    pub fuzzy_threshold: f64,
    /// Minimum token-set Jaccard for the word-overlap tier.
    pub jaccard_threshold: f64,
    /// Lowercase, trim and collapse whitespace before comparing.
    pub normalize: bool,
    pub substring_score: f64,
    pub fuzzy_cap: f64,
    pub jaccard_cap: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            fuzzy_threshold: 0.8,
            jaccard_threshold: 0.5,
            normalize: true,
            substring_score: 0.9,
            fuzzy_cap: 0.85,
            jaccard_cap: 0.7,
        }
    }
}

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn prepare(s: &str, normalize: bool) -> String {
    if normalize {
        normalize_name(s)
    } else {
        s.to_string()
    }
}

/// Exact match or substring inclusion in either direction, after
/// normalization. Empty names never match.
pub fn soft_identity_match(pred: &str, gt: &str) -> bool {
    soft_identity_match_with(pred, gt, true)
}

pub fn soft_identity_match_with(pred: &str, gt: &str, normalize: bool) -> bool {
    let p = prepare(pred, normalize);
    let g = prepare(gt, normalize);
    if p.is_empty() || g.is_empty() {
        return false;
    }
    p == g || p.contains(&g) || g.contains(&p)
}

/// `1 - levenshtein / max(len)` over characters.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / len as f64
}

/// Jaccard index of the whitespace token sets.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = a.split_whitespace().collect();
    let sb: BTreeSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Tiered name similarity: exact, substring, fuzzy, word overlap, else 0.
pub fn hierarchical_similarity(pred: &str, gt: &str, cfg: &MatchConfig) -> f64 {
    let p = prepare(pred, cfg.normalize);
    let g = prepare(gt, cfg.normalize);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    if p == g {
        return 1.0;
    }
    if p.contains(&g) || g.contains(&p) {
        return cfg.substring_score;
    }
    let fuzzy = edit_similarity(&p, &g);
    if fuzzy >= cfg.fuzzy_threshold {
        return fuzzy.min(cfg.fuzzy_cap);
    }
    let jac = token_jaccard(&p, &g);
    if jac >= cfg.jaccard_threshold {
        return jac.min(cfg.jaccard_cap);
    }
    0.0
}

//! Run configuration: a TOML file with `[reward]`, `[coach]`, `[matching]`,
//! `[prompts]`, `[labels]` and `[hints]` sections, overridable from the
//! environment.
//!
//! `GROUNDCOACH_<SECTION>_<KEY>=value` sets `key` in `section`; a double
//! underscore descends into a nested table, so
//! `GROUNDCOACH_REWARD_EXTRACT__MCQ_OPTIONS=ABCD` sets
//! `reward.extract.mcq_options`. Values are parsed as TOML when possible and
//! taken as strings otherwise.
//!
//! ```toml
//! [reward]
//! sigma = 2.0
//! tau = 1.0
//! spatial_mode = "object_aware"     # or "avg_iou", "max_iou"
//! candidate_statistic = "mean_acc_tmp_spa"
//!
//! [coach]
//! g = 4
//! k = 2.21
//! n = 2
//! alpha = 0.1
//!
//! [hints]
//! darken = "Look at the bright part."
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::coach::CoachConfig;
use crate::matching::MatchConfig;
use crate::prompts::{parse_hints, PromptConfig};
use crate::rewards::RewardConfig;
use crate::selector_data::LabelConfig;

pub const ENV_PREFIX: &str = "GROUNDCOACH_";
const SECTIONS: [&str; 6] = ["reward", "coach", "matching", "prompts", "labels", "hints"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("unknown config section {0:?}")]
    UnknownSection(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub reward: RewardConfig,
    pub coach: CoachConfig,
    pub matching: MatchConfig,
    pub prompts: PromptConfig,
    pub labels: LabelConfig,
    /// Hint template overrides keyed by prompt token.
    pub hints: BTreeMap<String, String>,
}

impl Config {
    /// Parses TOML text and applies env overrides from `env`.
    pub fn from_sources<I, K, V>(text: Option<&str>, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => Table::new(),
        };
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownSection(key.clone()));
            }
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        env.sort();
        for (k, v) in env {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            if !SECTIONS.contains(&section) {
                continue;
            }
            let path: Vec<&str> = std::iter::once(section).chain(key.split("__")).collect();
            set_path(&mut table, &path, parse_value(&v))?;
        }
        let mut cfg: Config = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.finish()?;
        Ok(cfg)
    }

    /// Loads `path` (if given) and the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.display().to_string(),
                source: e,
            })?),
            None => None,
        };
        Self::from_sources(text.as_deref(), std::env::vars())
    }

    fn finish(&mut self) -> Result<(), ConfigError> {
        self.labels.match_cfg = self.matching.clone();
        if !self.hints.is_empty() {
            let text = toml::to_string(&self.hints).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let parsed = parse_hints(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            self.prompts.hints.extend(parsed);
        }
        self.reward.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.coach.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, path: &[&str], value: Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("path has a section and a key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

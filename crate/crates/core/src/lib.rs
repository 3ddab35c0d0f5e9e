//! Spatio-temporal grounding rewards and visual-prompt coaching for video
//! reasoning RL.
//!
//! The crate is organized bottom-up:
//!
//! * [`trace`] parses `<think>/<answer>` traces with `<obj>/<box>/<t>` grounding.
//! * [`grounding`] and [`matching`] hold the geometry and name-matching primitives.
//! * [`rewards`] scores rollouts; [`coach`] runs the hard-sample prompting loop.
//! * [`prompts`] renders visual prompts onto frames.
//! * [`selector_data`] builds prompt-selector pseudo-labels.
//! * [`metrics`] computes evaluation aggregates; [`io`] and [`config`] handle files.

pub mod coach;
pub mod config;
pub mod grounding;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod matching;
pub mod rewards;
pub mod selector_data;
pub mod trace;

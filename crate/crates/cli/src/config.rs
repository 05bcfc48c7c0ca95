//! Flat `key=value` configuration.
//!
//! `--config` takes either a file of `key=value` lines (`#` starts a
//! comment) or a single inline `key=value`; it may be repeated and later
//! values win. Keys are the flattened field names of the target struct,
//! with nested structs joined by `_` (`freeze_vision_encoder`).

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use uivlm_core::eval::Aggregation;
use uivlm_core::MatchConfig;
use uivlm_model::TrainConfig;

/// Short names accepted for common keys.
const ALIASES: &[(&str, &str)] = &[("lr", "learning_rate")];

/// Raised for unreadable or invalid configuration; maps to the usage exit
/// code.
#[derive(Debug)]
pub struct ConfigProblem(pub String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn problem(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigProblem(msg.into()))
}

/// Collects the `(key, value)` pairs of every `--config` argument in order.
pub fn read_sources(sources: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for src in sources {
        let path = Path::new(src);
        if path.is_file() {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading config {src}"))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                pairs.push(split_pair(line).map_err(|e| problem(format!("{src}:{}: {e}", i + 1)))?);
            }
        } else if src.contains('=') {
            pairs.push(split_pair(src).map_err(problem)?);
        } else {
            bail!(ConfigProblem(format!(
                "--config {src}: neither a file nor key=value"
            )));
        }
    }
    Ok(pairs)
}

fn split_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let k = k.trim();
    let k = ALIASES
        .iter()
        .find(|(a, _)| *a == k)
        .map_or(k, |(_, full)| full);
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_owned(), v.trim().to_owned()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}_{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_owned(), other.clone())),
    }
}

/// Sets the flattened `key` inside `v`, returning false if no such leaf.
fn set_leaf(v: &mut Map<String, Value>, key: &str, new: Value) -> bool {
    if let Some(slot) = v.get_mut(key) {
        if !slot.is_object() {
            *slot = new;
            return true;
        }
    }
    for (name, child) in v.iter_mut() {
        if let (Some(rest), Value::Object(m)) = (
            key.strip_prefix(name.as_str())
                .and_then(|r| r.strip_prefix('_')),
            child,
        ) {
            if set_leaf(m, rest, new.clone()) {
                return true;
            }
        }
    }
    false
}

/// Overlays `pairs` on `defaults`. Values are read as JSON scalars where
/// possible and as strings otherwise.
pub fn apply<T: Serialize + DeserializeOwned>(
    defaults: &T,
    pairs: &[(String, String)],
) -> Result<T> {
    let Value::Object(mut root) = serde_json::to_value(defaults)? else {
        unreachable!("configs serialize to objects")
    };
    for (k, raw) in pairs {
        let value =
            serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        if !set_leaf(&mut root, k, value) {
            let mut known = Vec::new();
            flatten("", &Value::Object(root.clone()), &mut known);
            let names: Vec<_> = known.into_iter().map(|(k, _)| k).collect();
            bail!(ConfigProblem(format!(
                "unknown config key {k:?}; known keys: {}",
                names.join(", ")
            )));
        }
    }
    serde_json::from_value(Value::Object(root)).map_err(|e| problem(format!("invalid config: {e}")))
}

/// One `key=value` line per leaf, in a form [`read_sources`] accepts.
pub fn render<T: Serialize>(cfg: &T) -> String {
    let mut leaves = Vec::new();
    flatten(
        "",
        &serde_json::to_value(cfg).expect("config serializes"),
        &mut leaves,
    );
    leaves
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

pub fn train_config(sources: &[String]) -> Result<TrainConfig> {
    let cfg = apply(&TrainConfig::default(), &read_sources(sources)?)?;
    cfg.validate().map_err(|e| problem(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub tap_distance_threshold: f64,
    pub bbox_expansion_factor: f64,
    pub tap_threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            tap_distance_threshold: m.tap_distance_threshold,
            bbox_expansion_factor: m.bbox_expansion_factor,
            tap_threshold: m.tap_threshold,
            aggregation: Aggregation::StepWeighted,
        }
    }
}

impl ScoreConfig {
    pub fn matcher(&self) -> MatchConfig {
        MatchConfig {
            tap_distance_threshold: self.tap_distance_threshold,
            bbox_expansion_factor: self.bbox_expansion_factor,
            tap_threshold: self.tap_threshold,
        }
    }
}

pub fn score_config(sources: &[String]) -> Result<ScoreConfig> {
    let cfg = apply(&ScoreConfig::default(), &read_sources(sources)?)?;
    cfg.matcher().validate().map_err(problem)?;
    Ok(cfg)
}

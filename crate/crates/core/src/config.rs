//! Plain-text run configuration.
//!
//! One `section.key = value` per line, `#` starts a comment. Values are
//! JSON literals (`0.5`, `true`, `[5, 10]`, `"end"`); anything that does not
//! parse as JSON is taken as a bare string. Every key must already exist in
//! the defaults and keep its type.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conformal::{DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_WINDOW};
use crate::dslob::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::physics::PhysicsConfig;
use crate::train::{AblationVariant, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub alpha: f64,
    /// Rolling window of the adaptive quantile.
    pub window: usize,
    /// Risk aversion of the allocation.
    pub gamma: f64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, window: DEFAULT_WINDOW, gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4], variants: AblationVariant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub dslob: SyntheticDatasetSpec,
    pub train: TrainConfig,
    pub physics: PhysicsConfig,
    pub conformal: ConformalConfig,
    pub ablation: AblationConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn same_kind(old: &Value, new: &Value) -> bool {
    matches!(
        (old, new),
        (Value::Null, _)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
    ) || (!matches!(old, Value::Object(_)) && new.is_null())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| config_err(format!("unknown key `{key}`")))?;
        let child = obj.get_mut(*p).ok_or_else(|| config_err(format!("unknown key `{key}`")))?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(config_err(format!("`{key}` is a section, not a value")));
            }
            if !same_kind(child, &value) {
                return Err(config_err(format!("`{key}` expects a value like {child}, got {value}")));
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("loop returns on the last part")
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `key = value` → `(key, value)`.
fn split_assignment(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("expected `key = value`, got `{line}`")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(config_err(format!("expected `key = value`, got `{line}`")));
    }
    Ok((k, v))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Defaults, then the file's assignments, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| config_err(format!("line {}: {e}", n + 1)))?;
            set_path(&mut root, k, parse_value(v))?;
        }
        for o in overrides {
            let (k, v) = split_assignment(o)?;
            set_path(&mut root, k, parse_value(v))?;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| config_err(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dslob.validate()?;
        self.train.validate()?;
        self.physics.validate()?;
        let c = &self.conformal;
        if !(c.alpha > 0.0 && c.alpha < 1.0) || c.window == 0 || !(c.gamma > 0.0) {
            return Err(config_err("conformal: need 0 < alpha < 1, window >= 1, gamma > 0"));
        }
        if self.ablation.seeds.is_empty() || self.ablation.variants.is_empty() {
            return Err(config_err("ablation needs at least one seed and one variant"));
        }
        Ok(())
    }

    /// Every key with its effective value, sorted; parses back to `self`.
    pub fn echo(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut pairs = Vec::new();
        flatten("", &v, &mut pairs);
        pairs.sort();
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.echo())?;
        Ok(())
    }
}

/// Keys of the default configuration, for help text.
pub fn known_keys() -> Vec<String> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut pairs = Vec::new();
    flatten("", &v, &mut pairs);
    pairs.into_iter().map(|(k, _)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let text = "train.lr = 0.01 # comment\n\n# full line\nphysics.kappa = 3\n";
        let c = RunConfig::from_text(text, &["train.lr=0.002".into(), "dslob.n_steps = 800".into()]).unwrap();
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.physics.kappa, 3.0);
        assert_eq!(c.dslob.n_steps, 800);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        for bad in ["train.lrr = 1", "nope = 1", "train = 1", "train.lr = fast", "train.epochs = -1", "train.lr"] {
            assert!(matches!(RunConfig::from_text(bad, &[]), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::from_text("", &["dslob..seed=1".into()]).is_err());
    }

    #[test]
    fn strings_enums_and_lists() {
        let c = RunConfig::from_text(
            "train.anchor = start\ntrain.library.ma_windows = [3, 7]\nablation.variants = [\"A0_Full\", \"A4_NoPhysics\"]\ntrain.library.channels = [0, 1]",
            &[],
        )
        .unwrap();
        assert_eq!(c.train.anchor, crate::train::Anchor::Start);
        assert_eq!(c.train.library.ma_windows, vec![3, 7]);
        assert_eq!(c.ablation.variants, vec![AblationVariant::A0Full, AblationVariant::A4NoPhysics]);
        assert_eq!(c.train.library.channels, Some(vec![0, 1]));
        assert!(RunConfig::from_text("train.anchor = middle", &[]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_text("train.lr = 0.0123\ndslob.seed = 18446744073709551615\ntrain.weights_unused = 1", &[]);
        assert!(c.is_err());
        let c = RunConfig::from_text("train.lr = 0.0123\ndslob.seed = 18446744073709551615", &[]).unwrap();
        let echo = c.echo();
        assert!(echo.contains("train.lr = 0.0123\n"));
        assert!(echo.contains("train.lambda1 = 0.1\n"));
        assert_eq!(RunConfig::from_text(&echo, &[]).unwrap(), c);
        assert!(known_keys().iter().any(|k| k == "physics.n_coll"));
    }
}

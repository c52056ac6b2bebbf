//! Run configuration addressed by flat dotted keys such as `loss.alpha`.
//!
//! Sources merge in the order defaults, `REGION_DISTILL_SEED`, config file,
//! command-line overrides; later sources win.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::ril::LabelMode;
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;
use crate::trainer::{EvalConfig, EvalSplit, TrainConfig};

pub const SEED_ENV: &str = "REGION_DISTILL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub split: EvalSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RilSection {
    pub crops: usize,
    pub topk: usize,
    pub mode: LabelMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub cost_multiplier: usize,
    pub reads: usize,
    pub repetitions: usize,
    pub readers: usize,
    /// Comma-separated K values for the sweep.
    pub ks: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub loss: LossConfig,
    pub student: StudentConfig,
    pub teacher: TeacherConfig,
    pub ril: RilSection,
    pub eval: EvalConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            train: TrainSection {
                shots: t.shots,
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: t.lr,
                momentum: t.momentum,
                seed: t.seed,
                split: t.split,
            },
            loss: t.loss,
            student: StudentConfig::default(),
            teacher: TeacherConfig::default(),
            ril: RilSection {
                crops: 50,
                topk: 3,
                mode: LabelMode::Mr,
                seed: 0,
            },
            eval: EvalConfig::default(),
            bench: BenchSection {
                cost_multiplier: 50,
                reads: 500,
                repetitions: 3,
                readers: 1,
                ks: "1,2,3,5,7".into(),
            },
        }
    }
}

fn flatten(value: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    if let Value::Object(sections) = value {
        for (section, fields) in sections {
            if let Value::Object(fields) = fields {
                for (k, v) in fields {
                    out.insert(format!("{section}.{k}"), v.clone());
                }
            }
        }
    }
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let (section, field) = key.split_once('.').expect("flat keys are dotted");
        root.entry(section)
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("section object")
            .insert(field.to_string(), v.clone());
    }
    Value::Object(root)
}

fn same_kind(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Number(a), Value::Number(b)) => !(a.is_u64() && !b.is_u64()),
        (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_)) => true,
        _ => false,
    }
}

impl RunConfig {
    /// Dotted key → value, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Effective configuration as a flat JSON object, for provenance.
    pub fn to_json(&self) -> Value {
        Value::Object(self.to_flat().into_iter().collect())
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    /// Applies `key = value` pairs; unknown keys and type changes are errors.
    pub fn apply<I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, Value)>,
    {
        let mut flat = self.to_flat();
        for (key, value) in pairs {
            let slot = flat
                .get_mut(&key)
                .ok_or_else(|| Error::config(format!("unknown configuration key {key:?}")))?;
            if !same_kind(slot, &value) {
                return Err(Error::config(format!("{key}: expected a value like {slot}, got {value}")));
            }
            *slot = value;
        }
        *self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    /// `key=value` with the value read as JSON, or as a bare string.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} must look like key=value")))?;
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        self.apply([(key.trim().to_string(), value)])
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(Error::config(format!("{}: expected a JSON object of dotted keys", path.display())));
        };
        self.apply(map)
    }

    /// Seed override from the environment; affects the training and crop
    /// seeds.
    pub fn apply_env_seed(&mut self, raw: Option<&str>) -> Result<()> {
        let Some(raw) = raw else { return Ok(()) };
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        self.train.seed = seed;
        self.ril.seed = seed;
        Ok(())
    }

    /// Defaults, then the environment seed, then `file`, then `overrides`.
    pub fn resolve(env_seed: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        c.apply_env_seed(env_seed)?;
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for o in overrides {
            c.apply_assignment(o)?;
        }
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shots: self.train.shots,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            seed: self.train.seed,
            loss: self.loss,
            split: self.train.split.clone(),
        }
    }

    pub fn sweep_ks(&self) -> Result<Vec<usize>> {
        self.bench
            .ks
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::config(format!("bench.ks: bad K {s:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_hyperparameter_is_addressable() {
        let keys = RunConfig::keys();
        for k in [
            "loss.alpha",
            "loss.delta",
            "loss.lambda_neg",
            "loss.lambda_diff1",
            "loss.lambda_diff2",
            "train.shots",
            "train.epochs",
            "train.batch_size",
            "train.lr",
            "train.momentum",
            "train.seed",
            "train.split",
            "student.tau",
            "student.context_len",
        ] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let mut c = RunConfig::default();
        c.apply_assignment("loss.alpha=2.5").unwrap();
        c.apply_assignment("ril.mode=ms").unwrap();
        c.apply_assignment("train.split=0-3/4-7").unwrap();
        c.apply_assignment("train.epochs=3").unwrap();
        assert_eq!(c.loss.alpha, 2.5);
        assert_eq!(c.ril.mode, LabelMode::Ms);
        assert_eq!(c.train.split.base, vec![0, 1, 2, 3]);
        assert_eq!(c.train.epochs, 3);
        assert!(c.apply_assignment("loss.beta=1").is_err());
        assert!(c.apply_assignment("train.epochs=1.5").is_err());
        assert!(c.apply_assignment("train.epochs=many").is_err());
        assert!(c.apply_assignment("ril.mode=huge").is_err());
        assert!(c.apply_assignment("no-equals").is_err());
    }

    #[test]
    fn precedence_is_env_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"train.seed": 7, "loss.delta": 0.2}"#).unwrap();
        let c = RunConfig::resolve(Some("3"), None, &[]).unwrap();
        assert_eq!((c.train.seed, c.ril.seed), (3, 3));
        let c = RunConfig::resolve(Some("3"), Some(&f), &[]).unwrap();
        assert_eq!((c.train.seed, c.ril.seed, c.loss.delta), (7, 3, 0.2));
        let c = RunConfig::resolve(Some("3"), Some(&f), &["train.seed=9".into()]).unwrap();
        assert_eq!(c.train.seed, 9);
        assert!(RunConfig::resolve(Some("x"), None, &[]).is_err());
        std::fs::write(&f, r#"{"train.sed": 7}"#).unwrap();
        assert!(RunConfig::resolve(None, Some(&f), &[]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_assignment("student.tau=0.05").unwrap();
        let mut d = RunConfig::default();
        d.apply(c.to_flat()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.sweep_ks().unwrap(), vec![1, 2, 3, 5, 7]);
    }
}

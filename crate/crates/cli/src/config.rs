//! Run configuration: defaults, a TOML file of flat dotted keys, and
//! command-line overrides, merged in that order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use dastgcn_core::ingest::{ParseOptions, ResampleConfig, SceneConfig};
use dastgcn_core::model::ModelConfig;
use dastgcn_core::numerics::GradCheckConfig;
use dastgcn_core::synth::{ScenarioKind, SyntheticSpec};
use dastgcn_core::traineval::{EvalConfig, LayerGridConfig, MetricUnits, Protocol, SplitFractions, TrainConfig};
use dastgcn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: String,
    pub out_dir: String,
    pub checkpoint: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: String::new(),
            out_dir: "out".into(),
            checkpoint: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub clip_grad: bool,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            lr_after: t.lr_after,
            lr_switch_epoch: t.lr_switch_epoch,
            clip_grad: t.clip_grad,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `mean` or `best_of_k`.
    pub protocol: String,
    pub k: usize,
    /// `raw` or `normalized`.
    pub units: String,
    /// Which partition to score: `train`, `val`, `test` or `all`.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: "mean".into(),
            k: 20,
            units: "raw".into(),
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub step_seconds: i64,
    pub gap_limit: i64,
    pub alt_in_feet: bool,
    pub stride: usize,
    pub min_aircraft: usize,
    pub shard_size: usize,
}

impl Default for PrepareSection {
    fn default() -> Self {
        let r = ResampleConfig::default();
        let s = SceneConfig::default();
        Self {
            step_seconds: r.step,
            gap_limit: r.gap_limit,
            alt_in_feet: false,
            stride: s.stride,
            min_aircraft: s.min_aircraft,
            shard_size: dastgcn_core::store::DEFAULT_SHARD_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: String,
    pub aircraft: usize,
    pub noise: f64,
    pub duration_steps: usize,
    pub instances: usize,
    /// Also write the generated reports as `tracks.csv`.
    pub write_csv: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            kind: "crossing".into(),
            aircraft: 4,
            noise: 0.0,
            duration_steps: 20,
            instances: 50,
            write_csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub nodes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Margin, in perturbation sizes, around relu kinks that excludes a coordinate.
    pub kink_factor: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            nodes: 3,
            step: 1e-4,
            tolerance: 1e-3,
            kink_factor: GradCheckConfig::default().kink_factor,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub split: SplitFractions,
    pub eval: EvalSection,
    pub prepare: PrepareSection,
    pub synth: SynthSection,
    pub grid: LayerGridConfig,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            lr_after: t.lr_after,
            lr_switch_epoch: t.lr_switch_epoch,
            clip_grad: t.clip_grad,
            clip_norm: t.clip_norm,
            seed: self.seed,
            split: self.split,
            model: self.model.clone(),
        }
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let protocol = match self.eval.protocol.as_str() {
            "mean" => Protocol::Mean,
            "best_of_k" if self.eval.k > 0 => Protocol::BestOfK(self.eval.k),
            other => return Err(Error::Config(format!("eval.protocol must be mean or best_of_k (k > 0), got {other:?}"))),
        };
        let units = match self.eval.units.as_str() {
            "raw" => MetricUnits::Raw,
            "normalized" => MetricUnits::Normalized,
            other => return Err(Error::Config(format!("eval.units must be raw or normalized, got {other:?}"))),
        };
        Ok(EvalConfig { protocol, units, seed: self.seed })
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            t_obs: self.model.t_obs,
            t_pred: self.model.t_pred,
            stride: self.prepare.stride,
            min_aircraft: self.prepare.min_aircraft,
        }
    }

    pub fn resample_config(&self) -> ResampleConfig {
        ResampleConfig {
            step: self.prepare.step_seconds,
            gap_limit: self.prepare.gap_limit,
        }
    }

    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            alt_in_feet: self.prepare.alt_in_feet,
            ..ParseOptions::default()
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = &self.synth;
        Ok(SyntheticSpec {
            kind: s.kind.parse::<ScenarioKind>()?,
            aircraft: s.aircraft,
            noise: s.noise,
            duration_steps: s.duration_steps,
            seed: self.seed,
            instances: s.instances,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }

    fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval_config()?;
        if !["train", "val", "test", "all"].contains(&self.eval.split.as_str()) {
            return Err(Error::Config(format!("eval.split must be train, val, test or all, got {:?}", self.eval.split)));
        }
        if self.paths.out_dir.is_empty() {
            return Err(Error::Config("paths.out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Flat `key = value` TOML, one line per key.
    pub fn to_flat_toml(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in flatten(&to_table(self)?) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        Ok(out)
    }
}

fn to_table(config: &RunConfig) -> Result<Table> {
    Table::try_from(config).map_err(|e| Error::Config(e.to_string()))
}

/// Leaf values keyed by their dotted path.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("split yields at least one part");
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("dotted prefixes are tables");
        }
        table.insert(leaf.to_string(), value.clone());
    }
    root
}

/// Every accepted key with its default value.
pub fn default_keys() -> BTreeMap<String, Value> {
    flatten(&to_table(&RunConfig::default()).expect("defaults serialize"))
}

pub fn key_help() -> String {
    let mut s = String::from("Configuration keys (--config file or --set key=value):\n");
    for (k, v) in default_keys() {
        writeln!(s, "  {k} = {v}").expect("writing to a String");
    }
    s
}

fn coerce(key: &str, value: Value, default: &Value) -> Result<Value> {
    match (default, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(Error::Config(format!(
            "{key}: expected a {}, got {}",
            d.type_str(),
            v.type_str()
        ))),
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value,
/// falling back to a bare string.
fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

#[derive(Default)]
pub struct Overrides<'a> {
    /// Text of the `--config` file.
    pub file: Option<&'a str>,
    /// Typed values from dedicated flags.
    pub flags: &'a [(String, Value)],
    /// Raw `key=value` pairs from `--set`.
    pub sets: &'a [(String, String)],
}

/// Merges defaults, the config file text, and `key=value` overrides.
pub fn merge(overrides: Overrides<'_>) -> Result<RunConfig> {
    let defaults = default_keys();
    let mut merged = defaults.clone();
    let mut apply = |key: &str, value: Value| -> Result<()> {
        let default = defaults
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        merged.insert(key.to_string(), coerce(key, value, default)?);
        Ok(())
    };
    if let Some(text) = overrides.file {
        let table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in flatten(&table) {
            apply(&k, v)?;
        }
    }
    for (k, v) in overrides.flags {
        apply(k, v.clone())?;
    }
    for (k, v) in overrides.sets {
        apply(k, parse_value(v))?;
    }
    let config: RunConfig = Value::Table(unflatten(&merged))
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_sets(file: Option<&str>, pairs: &[(&str, &str)]) -> Result<RunConfig> {
        let sets: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        merge(Overrides { file, sets: &sets, ..Default::default() })
    }

    #[test]
    fn defaults_merge_to_defaults() {
        assert_eq!(with_sets(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_then_flags_then_sets() {
        let file = "train.epochs = 10\ntrain.lr_switch_epoch = 5\nmodel.txp_layers = 3\nseed = 1\n";
        let flags = [("seed".to_string(), Value::Integer(2))];
        let sets = [("train.epochs".to_string(), "12".to_string()), ("train.lr".to_string(), "1".to_string())];
        let c = merge(Overrides { file: Some(file), flags: &flags, sets: &sets }).unwrap();
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.train.lr, 1.0);
        assert_eq!(c.model.txp_layers, 3);
        assert_eq!(c.seed, 2);
    }

    #[test]
    fn nested_tables_are_accepted() {
        let c = with_sets(Some("[model]\ngat_heads = 2\n"), &[]).unwrap();
        assert_eq!(c.model.gat_heads, 2);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let err = with_sets(Some("model.widht = 3"), &[]).unwrap_err();
        assert!(err.to_string().contains("model.widht"));
        assert!(with_sets(None, &[("nope", "1")]).is_err());
    }

    #[test]
    fn type_mismatch_is_fatal() {
        assert!(with_sets(None, &[("train.epochs", "many")]).is_err());
    }

    #[test]
    fn invalid_values_are_fatal() {
        assert!(with_sets(None, &[("model.txp_layers", "4")]).is_err());
        assert!(with_sets(None, &[("eval.units", "\"miles\"")]).is_err());
    }

    #[test]
    fn bare_strings_are_accepted() {
        assert_eq!(with_sets(None, &[("synth.kind", "merge")]).unwrap().synth.kind, "merge");
    }

    #[test]
    fn flat_echo_round_trips() {
        let c = with_sets(None, &[("seed", "9"), ("model.disable_gat", "true"), ("grid.txp_layers", "[1, 5]")]).unwrap();
        let echoed = c.to_flat_toml().unwrap();
        assert_eq!(with_sets(Some(&echoed), &[]).unwrap(), c);
    }
}

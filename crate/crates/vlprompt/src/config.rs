//! Layered run configuration: built-in defaults, then a YAML/JSON file, then
//! `--set dotted.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use vlprompt_core::augment::AugmentConfig;
use vlprompt_core::backbone::ToyBackboneConfig;
use vlprompt_core::features::FeaturesConfig;
use vlprompt_core::losses::LossConfig;
use vlprompt_core::model::ModelConfig;
use vlprompt_core::projectors::PvConfig;
use vlprompt_core::promptlearner::RhoConfig;
use vlprompt_core::protocol::ProtocolKind;
use vlprompt_core::trainer::TrainConfig;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Toy,
    Adapter,
}

/// A pretrained dual encoder loaded from disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub weights: Option<String>,
    /// 1-based encoder blocks exposed as feature layers.
    pub layer_taps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub toy: ToyBackboneConfig,
    pub adapter: AdapterConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            toy: ToyBackboneConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Builtin name (`toy2`, `toy4`, `toy4-shift`), manifest file, or a
    /// folder-per-class directory.
    pub source: String,
    pub targets: Vec<String>,
    pub protocol: ProtocolKind,
    /// JSON object renaming target class names onto source class names.
    pub class_map: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "toy2".into(),
            targets: Vec::new(),
            protocol: ProtocolKind::BaseToNew,
            class_map: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub features: FeaturesConfig,
    pub rho: RhoConfig,
    pub pv: PvConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            features: self.features.clone(),
            rho: self.rho.clone(),
            pv: self.pv.clone(),
        }
    }

    /// Checks everything that does not need the encoders.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.rho.context_length == 0 {
            return Err(Error::Config("rho.context_length must be at least 1".into()));
        }
        if self.features.frg_trainable {
            return Err(Error::Config(
                "features.frg_trainable=true is not supported; the rescaling layer is fixed".into(),
            ));
        }
        match self.data.protocol {
            ProtocolKind::BaseToNew if !self.data.targets.is_empty() => Err(Error::Config(
                "data.targets must be empty for the base_to_new protocol".into(),
            )),
            ProtocolKind::CrossDataset | ProtocolKind::DomainGeneralization if self.data.targets.is_empty() => {
                Err(Error::Config(format!(
                    "protocol {} needs at least one entry in data.targets",
                    self.data.protocol.label()
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        hash_value(&self.to_value())
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })
    }
}

pub fn hash_value(v: &Value) -> String {
    let s = serde_json::to_string(v).expect("json value serializes");
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Parses YAML (a superset of JSON) into a JSON value.
pub fn parse_document(text: &str, origin: &str) -> Result<Value> {
    let y: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    let v = serde_json::to_value(y).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    Ok(if v.is_null() { Value::Object(Map::new()) } else { v })
}

/// Interprets an override value as a YAML scalar or collection.
fn parse_scalar(raw: &str) -> Value {
    match serde_yaml::from_str::<serde_yaml::Value>(raw) {
        Ok(y) => serde_json::to_value(y).unwrap_or_else(|_| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Records every key of `overlay` without a counterpart object key in `base`.
fn unknown_paths(base: &Value, overlay: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(b), Value::Object(o)) = (base, overlay) {
        for (k, v) in o {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                None => out.push(path),
                Some(bv) => unknown_paths(bv, v, &path, out),
            }
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(bv) if bv.is_object() && v.is_object() => merge(bv, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Splits `a.b.c=value` into a nested object `{a: {b: {c: value}}}`.
pub fn override_value(spec: &str) -> Result<Value> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let mut v = parse_scalar(raw.trim());
    for seg in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(seg.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Defaults, then `doc`, then each override in order. Every unknown key in
/// any layer is reported together.
pub fn resolve_value(doc: Option<Value>, overrides: &[String]) -> Result<RunConfig> {
    let defaults = RunConfig::default().to_value();
    let mut layers = Vec::new();
    if let Some(d) = doc {
        if !d.is_object() {
            return Err(Error::Config("configuration document must be a mapping".into()));
        }
        layers.push(d);
    }
    for o in overrides {
        layers.push(override_value(o)?);
    }
    let mut unknown = Vec::new();
    for l in &layers {
        unknown_paths(&defaults, l, "", &mut unknown);
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownKeys(unknown));
    }
    let mut merged = defaults;
    for l in layers {
        merge(&mut merged, l);
    }
    let cfg = RunConfig::from_value(merged)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
            Some(parse_document(&text, &p.display().to_string())?)
        }
        None => None,
    };
    resolve_value(doc, overrides)
}

/// Applies `overrides` on top of an already resolved configuration.
pub fn with_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    resolve_value(Some(cfg.to_value()), overrides)
}

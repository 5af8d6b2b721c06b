use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DEFAULT_SPEC: &str = include_str!("default_params.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Continuous,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub min: f64,
    pub max: f64,
    pub default: f64,
    #[serde(default)]
    pub description: String,
}

impl ParamEntry {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max && (self.kind == ParamKind::Continuous || v.fract() == 0.0)
    }

    /// Nearest admissible value.
    pub fn clamp(&self, v: f64) -> f64 {
        match self.kind {
            ParamKind::Continuous => v.clamp(self.min, self.max),
            ParamKind::Integer => (v + 0.5).floor().clamp(self.min.ceil(), self.max.floor()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    param: Vec<ParamEntry>,
}

/// Ordered, immutable description of the calibratable parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    entries: Vec<ParamEntry>,
}

impl ParamSpec {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate parameter `{}`", e.name)));
            }
            if !(e.min.is_finite() && e.max.is_finite() && e.min < e.max) {
                return Err(Error::InvalidSpec(format!(
                    "`{}`: need finite min < max, got [{}, {}]",
                    e.name, e.min, e.max
                )));
            }
            if e.kind == ParamKind::Integer && e.min.ceil() > e.max.floor() {
                return Err(Error::InvalidSpec(format!("`{}`: integer range is empty", e.name)));
            }
            if !e.contains(e.default) {
                return Err(Error::InvalidSpec(format!(
                    "`{}`: default {} outside [{}, {}]",
                    e.name, e.default, e.min, e.max
                )));
            }
        }
        let spec = Self { entries };
        for name in super::CORE_PARAMS {
            if spec.index_of(name).is_none() {
                return Err(Error::InvalidSpec(format!("missing core parameter `{name}`")));
            }
        }
        Ok(spec)
    }

    /// The built-in parameter space.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_SPEC).expect("built-in parameter spec is valid")
    }

    pub fn builtin_toml() -> &'static str {
        DEFAULT_SPEC
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let f: SpecFile = toml::from_str(s).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Self::new(f.param)
    }

    /// Loads a `.toml` or `.json` spec file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let f: SpecFile = serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            Self::new(f.param)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SpecFile {
            param: self.entries.clone(),
        })
        .expect("spec serializes")
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// SHA-256 over names, kinds and bounds, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(format!("{}|{:?}|{:e}|{:e};", e.name, e.kind, e.min, e.max).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn defaults(&self) -> ParamVector {
        ParamVector {
            values: self.entries.iter().map(|e| e.default).collect(),
        }
    }
}

/// One concrete point of a [`ParamSpec`], values in spec order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: &ParamSpec, values: Vec<f64>) -> Result<Self> {
        let v = Self { values };
        v.validate(spec)?;
        Ok(v)
    }

    pub fn validate(&self, spec: &ParamSpec) -> Result<()> {
        if self.values.len() != spec.len() {
            return Err(Error::InvalidParams(format!(
                "expected {} values, got {}",
                spec.len(),
                self.values.len()
            )));
        }
        for (e, &v) in spec.entries().iter().zip(&self.values) {
            if !e.contains(v) {
                return Err(Error::InvalidParams(format!(
                    "`{}` = {v} outside [{}, {}]{}",
                    e.name,
                    e.min,
                    e.max,
                    if e.kind == ParamKind::Integer { " (integer)" } else { "" }
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, spec: &ParamSpec, name: &str) -> Option<f64> {
        spec.index_of(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, spec: &ParamSpec, name: &str, value: f64) -> Result<()> {
        let i = spec
            .index_of(name)
            .ok_or_else(|| Error::InvalidParams(format!("unknown parameter `{name}`")))?;
        self.values[i] = value;
        Ok(())
    }

    pub fn to_map(&self, spec: &ParamSpec) -> BTreeMap<String, f64> {
        spec.entries()
            .iter()
            .zip(&self.values)
            .map(|(e, &v)| (e.name.clone(), v))
            .collect()
    }

    /// Builds a vector from a name→value map; every spec entry must be
    /// present and no unknown names are allowed.
    pub fn from_map(spec: &ParamSpec, map: &BTreeMap<String, f64>) -> Result<Self> {
        if let Some(unknown) = map.keys().find(|k| spec.index_of(k).is_none()) {
            return Err(Error::InvalidParams(format!("unknown parameter `{unknown}`")));
        }
        let values = spec
            .entries()
            .iter()
            .map(|e| {
                map.get(&e.name)
                    .copied()
                    .ok_or_else(|| Error::InvalidParams(format!("missing parameter `{}`", e.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(spec, values)
    }
}

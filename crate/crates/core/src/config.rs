//! Run configuration: a TOML file of `key = value` lines grouped in
//! sections, plus dotted-key overrides such as `train.iters=500`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Vec3};
use crate::training::TrainConfig;

/// How depth maps are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    Pfm,
    Png16,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 => "png",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub rgb: PathBuf,
    /// `.pfm` is read verbatim; anything else as 16-bit PNG times `depth_scale`.
    pub depth: PathBuf,
    pub mask: Option<PathBuf>,
    /// Meters per unit of a 16-bit PNG depth value.
    pub depth_scale: f64,
    /// Capture position of the input panorama.
    pub pose: Vec3,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            rgb: PathBuf::from("input/rgb.png"),
            depth: PathBuf::from("input/depth.pfm"),
            mask: None,
            depth_scale: 0.001,
            pose: Vec3::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub depth_format: DepthFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            depth_format: DepthFormat::Pfm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub output: OutputConfig,
    pub train: TrainConfig,
}

/// Keys whose default is "unset" and therefore absent from a serialized
/// default config.
const OPTIONAL_KEYS: &[&str] = &["input.mask", "train.far", "train.semantic.radius"];

/// File name of the resolved config written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.input.depth_scale > 0.0 && self.input.depth_scale.is_finite()) {
            return Err(Error::Config("input.depth_scale must be positive".into()));
        }
        if !self.input.pose.is_finite() {
            return Err(Error::Config("input.pose must be finite".into()));
        }
        self.train.validate()
    }

    /// Fails unless every input file exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![&self.input.rgb, &self.input.depth];
        paths.extend(self.input.mask.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn input_pose(&self) -> Result<CameraPose> {
        CameraPose::new(self.input.pose)
    }

    /// Every settable dotted key with its default rendered as TOML.
    pub fn keys() -> Vec<(String, String)> {
        let value = Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        for k in OPTIONAL_KEYS {
            out.push((k.to_string(), String::new()));
        }
        out.sort();
        out
    }

    /// Sets one dotted key. The value is parsed as a TOML value (numbers,
    /// booleans, arrays) and falls back to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let known = Self::keys();
        if !known.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let mut root = Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let value = parse_value(raw);
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` is not a table path")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` is not a table path")))?;
        let last = parts[parts.len() - 1];
        // Keep integers integral and floats floating where the schema expects it.
        let value = match (table.get(last), value) {
            (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(last.to_string(), value);
        let next: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", one_line(&e.to_string()))))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

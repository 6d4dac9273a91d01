//! Run configuration as a flat JSON object with dotted keys, e.g.
//! `{"renderer": "single_surface", "robust.enabled": true, "optim.lr": 0.01}`.
//! Command-line flags are applied on top with the same keys.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Every accepted key.
pub const KEYS: [&str; 23] = [
    "renderer",
    "eta",
    "base",
    "normalize_weights",
    "samples.coarse",
    "samples.fine",
    "robust.enabled",
    "robust.t_r",
    "robust.quantile",
    "dgs.enabled",
    "dgs.t_h",
    "dgs.force_open",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "early_stop.interval",
    "batch.rays",
    "batch.patches",
    "iterations",
    "seed",
    "field.resolution",
    "log.every",
];

fn type_error(key: &str, expected: &str, got: &Value) -> Error {
    Error::Schema {
        path: key.to_string(),
        detail: format!("expected {expected}, got {got}"),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| type_error(key, "a number", v))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| type_error(key, "a nonnegative integer", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "true or false", v))
}

/// Sets one dotted key.
pub fn apply(cfg: &mut TrainConfig, key: &str, v: &Value) -> Result<()> {
    match key {
        "renderer" => {
            let s = v.as_str().ok_or_else(|| type_error(key, "a string", v))?;
            cfg.renderer = s.parse().map_err(|e: Error| Error::Schema {
                path: key.into(),
                detail: e.to_string(),
            })?;
        }
        "eta" => cfg.surface.eta = as_f64(key, v)?,
        "base" => cfg.surface.base = as_f64(key, v)?,
        "normalize_weights" => cfg.surface.normalize_weights = as_bool(key, v)?,
        "samples.coarse" => cfg.coarse_samples = as_usize(key, v)?,
        "samples.fine" => cfg.fine_samples = as_usize(key, v)?,
        "robust.enabled" => cfg.robust.enabled = as_bool(key, v)?,
        "robust.t_r" => cfg.robust.t_r = as_f64(key, v)?,
        "robust.quantile" => cfg.robust.quantile = as_f64(key, v)?,
        "dgs.enabled" => cfg.dgs.enabled = as_bool(key, v)?,
        "dgs.t_h" => cfg.dgs.t_h = as_f64(key, v)?,
        "dgs.force_open" => cfg.dgs.force_open = as_bool(key, v)?,
        "optim.lr" => cfg.optim.lr = as_f64(key, v)?,
        "optim.beta1" => cfg.optim.beta1 = as_f64(key, v)?,
        "optim.beta2" => cfg.optim.beta2 = as_f64(key, v)?,
        "optim.eps" => cfg.optim.eps = as_f64(key, v)?,
        "early_stop.interval" => cfg.early_stop_interval = as_usize(key, v)?,
        "batch.rays" => cfg.batch_rays = as_usize(key, v)?,
        "batch.patches" => cfg.batch_patches = as_usize(key, v)?,
        "iterations" => cfg.iterations = as_usize(key, v)?,
        "seed" => cfg.seed = v.as_u64().ok_or_else(|| type_error(key, "a nonnegative integer", v))?,
        "field.resolution" => {
            cfg.field_resolution = match v {
                Value::Array(items) if items.len() == 3 => {
                    let mut r = [0; 3];
                    for (a, item) in items.iter().enumerate() {
                        r[a] = as_usize(key, item)?;
                    }
                    r
                }
                other => [as_usize(key, other).map_err(|_| type_error(key, "an integer or [x, y, z]", other))?; 3],
            }
        }
        "log.every" => cfg.log_every = as_usize(key, v)?,
        other => return Err(Error::UnknownKey(other.to_string())),
    }
    Ok(())
}

pub fn apply_map(cfg: &mut TrainConfig, map: &Map<String, Value>) -> Result<()> {
    for (k, v) in map {
        apply(cfg, k, v)?;
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<Map<String, Value>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: String::new(),
        detail: e.to_string(),
    })?;
    match value {
        Value::Object(map) => Ok(map),
        other => Err(Error::Schema {
            path: String::new(),
            detail: format!("config must be a JSON object, got {other}"),
        }),
    }
}

/// Reads a config file on top of the defaults.
pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
        path: path.into(),
        detail: e.to_string(),
    })?;
    let mut cfg = TrainConfig::default();
    apply_map(&mut cfg, &parse(&text)?)?;
    Ok(cfg)
}

/// The fully resolved configuration in the same flat form, keys sorted.
pub fn to_flat(cfg: &TrainConfig) -> Map<String, Value> {
    let entries: [(&str, Value); 23] = [
        ("renderer", cfg.renderer.to_string().into()),
        ("eta", cfg.surface.eta.into()),
        ("base", cfg.surface.base.into()),
        ("normalize_weights", cfg.surface.normalize_weights.into()),
        ("samples.coarse", cfg.coarse_samples.into()),
        ("samples.fine", cfg.fine_samples.into()),
        ("robust.enabled", cfg.robust.enabled.into()),
        ("robust.t_r", cfg.robust.t_r.into()),
        ("robust.quantile", cfg.robust.quantile.into()),
        ("dgs.enabled", cfg.dgs.enabled.into()),
        ("dgs.t_h", cfg.dgs.t_h.into()),
        ("dgs.force_open", cfg.dgs.force_open.into()),
        ("optim.lr", cfg.optim.lr.into()),
        ("optim.beta1", cfg.optim.beta1.into()),
        ("optim.beta2", cfg.optim.beta2.into()),
        ("optim.eps", cfg.optim.eps.into()),
        ("early_stop.interval", cfg.early_stop_interval.into()),
        ("batch.rays", cfg.batch_rays.into()),
        ("batch.patches", cfg.batch_patches.into()),
        ("iterations", cfg.iterations.into()),
        ("seed", cfg.seed.into()),
        ("field.resolution", Value::from(cfg.field_resolution.to_vec())),
        ("log.every", cfg.log_every.into()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn to_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(&Value::Object(to_flat(cfg))).expect("config serializes")
}

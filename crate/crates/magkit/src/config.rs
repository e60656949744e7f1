//! Training config files with command-line and environment overrides.
//!
//! Precedence, highest first: `--key=value` arguments, the `MAGKIT_SEED`
//! environment variable, the config file, built-in defaults. Keys inside
//! `weights` may be given bare (`--lambda3=0`) or dotted
//! (`--weights.lambda3=0`).

use std::path::Path;

use magkit_core::pipeline::TrainConfig;
use toml::{Table, Value};

use crate::error::{io, Error, Result};

pub const SEED_ENV: &str = "MAGKIT_SEED";

const WEIGHT_KEYS: [&str; 5] = ["lambda1", "lambda2", "lambda3", "gp_lambda", "cycle_weight"];

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let path: Vec<&str> = match key.split_once('.') {
        Some((head, tail)) => vec![head, tail],
        None if WEIGHT_KEYS.contains(&key) => vec!["weights", key],
        None => vec![key],
    };
    match path.as_slice() {
        [k] => {
            table.insert(k.to_string(), value);
        }
        [outer, inner] => {
            let sub = table.entry(outer.to_string()).or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(sub) = sub else {
                return Err(Error::Config(format!("{outer} is not a table")));
            };
            sub.insert(inner.to_string(), value);
        }
        _ => unreachable!("split yields one or two parts"),
    }
    Ok(())
}

/// Splits `--key=value` (or `key=value`) into its parts.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    match body.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.replace('-', "_"), v.to_string())),
        _ => Err(Error::Config(format!("override {arg:?} is not of the form --key=value"))),
    }
}

/// Builds a config from optional file text, an optional seed from the
/// environment and overrides.
pub fn build_config(file: Option<&str>, env_seed: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table: Table = match file {
        Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        None => Table::new(),
    };
    if let Some(seed) = env_seed {
        let v: i64 = seed.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
        set(&mut table, "seed", Value::Integer(v))?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set(&mut table, &k, parse_value(&v))?;
    }
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (when given) and applies `MAGKIT_SEED` and `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = path.map(|p| std::fs::read_to_string(p).map_err(io(p))).transpose()?;
    let env = std::env::var(SEED_ENV).ok();
    build_config(text.as_deref(), env.as_deref(), overrides)
}

pub fn config_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

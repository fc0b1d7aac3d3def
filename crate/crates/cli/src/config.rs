//! Layered settings: command-line flags over a TOML file over built-in
//! defaults. `SPANDMD_SEED` replaces the default seed only.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "SPANDMD_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Comma-separated values where `a..b` (or `a..=b`) expands to the
/// inclusive integer range.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let item = |text: &str| text.parse::<T>().map_err(|e| format!("{text:?}: {e}"));
        let mut out = Vec::new();
        for piece in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match piece.split_once("..") {
                Some((a, b)) => {
                    let b = b.strip_prefix('=').unwrap_or(b);
                    let bound = |v: &str| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| format!("bad range {piece:?}"))
                    };
                    let (a, b) = (bound(a)?, bound(b)?);
                    if a > b {
                        return Err(format!("empty range {piece:?}"));
                    }
                    for v in a..=b {
                        out.push(item(&v.to_string())?);
                    }
                }
                None => out.push(item(piece)?),
            }
        }
        if out.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(out))
    }
}

impl<T: Serialize> Serialize for List<T> {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(ser)
    }
}

impl<'de, T> Deserialize<'de> for List<T>
where
    T: Deserialize<'de> + FromStr,
    T::Err: Display,
{
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr<T> {
            Text(String),
            Items(Vec<T>),
            One(T),
        }
        match Repr::<T>::deserialize(de)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Items(v) => Ok(List(v)),
            Repr::One(t) => Ok(List(vec![t])),
        }
    }
}

/// Scalar keys at the top of the file, overridden by those in each nested
/// table along `sections` (e.g. `["sweep", "headline"]`).
pub fn file_layer(path: Option<&Path>, sections: &[&str]) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    let Some(path) = path else {
        return Ok(out);
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut level = serde_json::to_value(table)?;
    let mut absorb = |v: &Value| {
        if let Value::Object(m) = v {
            for (k, v) in m {
                if !v.is_object() {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
    };
    absorb(&level);
    for s in sections {
        level = match level.get(*s) {
            Some(v) if v.is_object() => v.clone(),
            _ => break,
        };
        absorb(&level);
    }
    Ok(out)
}

/// Overlays the set flags on the file layer and fills the rest with defaults.
pub fn resolve<C: DeserializeOwned>(flags: &impl Serialize, file: Map<String, Value>) -> Result<C> {
    let mut merged = file;
    if let Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    if !merged.contains_key("seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    serde_json::from_value(Value::Object(merged)).context("invalid configuration")
}

pub fn default_seed() -> u64 {
    DEFAULT_SEED
}

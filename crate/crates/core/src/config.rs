//! Flat, dotted-key configuration files layered over typed defaults.
//!
//! Any `Serialize + Deserialize + Default` struct works: its default value
//! defines the set of legal keys (`reward.sigmoid_slope`, `grip.k`, ...) and
//! their types. Files may use dotted keys or `[section]` tables; both flatten
//! to the same keys.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects {expected}, got `{got}`")]
    Type { key: String, expected: String, got: String },
    #[error("override `{0}` must look like key=value")]
    Override(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(p.to_string(), value);
            return;
        }
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => unreachable!("leaf keys never prefix other keys"),
        };
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Coerces `v` to the type of `default`, allowing integers where floats are
/// expected (and inside arrays).
fn coerce(key: &str, default: &Value, v: Value) -> Result<Value, ConfigError> {
    let mismatch = |v: &Value| ConfigError::Type {
        key: key.to_string(),
        expected: type_name(default).to_string(),
        got: v.to_string(),
    };
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(d), Value::Array(items)) => {
            let Some(proto) = d.first() else {
                return Ok(Value::Array(items));
            };
            items
                .into_iter()
                .map(|x| coerce(key, proto, x))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}

/// A typed config plus its flattened key map.
#[derive(Debug, Clone, PartialEq)]
pub struct Layered<T> {
    pub value: T,
    flat: BTreeMap<String, Value>,
}

impl<T: Serialize + DeserializeOwned + Default> Layered<T> {
    pub fn defaults() -> Self {
        let value = T::default();
        let flat = flat_of(&value);
        Self { value, flat }
    }

    /// Parses TOML text over the defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        let mut user = BTreeMap::new();
        flatten("", &table, &mut user);
        let mut out = Self::defaults();
        for (k, v) in user {
            out.set_value(&k, v)?;
        }
        out.rebuild()?;
        Ok(out)
    }

    /// Applies `key=value` overrides; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self, ConfigError> {
        for o in overrides {
            let (k, v) = split_override(o.as_ref())?;
            let key = self.resolve_key(k)?;
            self.set_value(&key, parse_literal(v))?;
        }
        self.rebuild()?;
        Ok(self)
    }

    /// Resolves a key given in full or as an unambiguous final segment
    /// (`k` for `grip.k`).
    pub fn resolve_key(&self, key: &str) -> Result<String, ConfigError> {
        if self.flat.contains_key(key) {
            return Ok(key.to_string());
        }
        let suffix = format!(".{key}");
        let hits: Vec<&String> = self.flat.keys().filter(|k| k.ends_with(&suffix)).collect();
        match hits.as_slice() {
            [one] => Ok((*one).clone()),
            _ => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    fn set_value(&mut self, key: &str, v: Value) -> Result<(), ConfigError> {
        let default = self
            .flat
            .get(key)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let v = coerce(key, default, v)?;
        self.flat.insert(key.to_string(), v);
        Ok(())
    }

    fn rebuild(&mut self) -> Result<(), ConfigError> {
        let mut table = Table::new();
        for (k, v) in &self.flat {
            set_path(&mut table, k, v.clone());
        }
        self.value = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid {
                key: String::new(),
                message: e.message().to_string(),
            })?;
        // canonicalize through the typed value (e.g. enum spellings)
        self.flat = flat_of(&self.value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.flat.get(key)
    }

    /// Every key with its effective value, one `key = value` line each,
    /// sorted. The text parses back to the same config.
    pub fn resolved_text(&self) -> String {
        self.flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short SHA-256 digest of the resolved config, leaving out `exclude`
    /// keys (typically the seed, which gets its own directory level).
    pub fn hash(&self, exclude: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.flat.iter().filter(|(k, _)| !exclude.contains(&k.as_str())) {
            h.update(format!("{k} = {v}\n").as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl<T: Serialize> Layered<T> {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.flat.keys().map(String::as_str)
    }
}

fn flat_of<T: Serialize>(value: &T) -> BTreeMap<String, Value> {
    let Value::Table(t) = Value::try_from(value).expect("config types serialize to a table") else {
        panic!("config root must be a table");
    };
    let mut flat = BTreeMap::new();
    flatten("", &t, &mut flat);
    flat
}

pub fn split_override(s: &str) -> Result<(&str, &str), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(s.to_string()))
}

pub fn parse_literal(s: &str) -> Value {
    format!("v = {s}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        slope: f64,
        window: usize,
        lags: Vec<usize>,
        mode: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        seed: u64,
        flag: bool,
        inner: Inner,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self {
                seed: 0,
                flag: false,
                inner: Inner {
                    slope: 0.3,
                    window: 5,
                    lags: vec![8],
                    mode: "a".into(),
                },
            }
        }
    }

    #[test]
    fn dotted_and_sectioned_keys_agree() {
        let a = Layered::<Demo>::from_toml("inner.slope = 0.5\nflag = true\n").unwrap();
        let b = Layered::<Demo>::from_toml("flag = true\n[inner]\nslope = 0.5\n").unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.value.inner.slope, 0.5);
        assert_eq!(a.value.inner.window, 5);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = Layered::<Demo>::from_toml("inner.slop = 1.0").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("inner.slop".into()));
        assert!(e.to_string().contains("inner.slop"));
        // a table where a leaf belongs is unknown too
        let e = Layered::<Demo>::from_toml("inner.slope.x = 1").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("inner.slope.x".into()));
    }

    #[test]
    fn types_are_checked_and_ints_widen() {
        assert_eq!(
            Layered::<Demo>::from_toml("inner.slope = 2").unwrap().value.inner.slope,
            2.0
        );
        let e = Layered::<Demo>::from_toml("inner.window = \"five\"").unwrap_err();
        assert!(matches!(e, ConfigError::Type { ref key, .. } if key == "inner.window"));
        assert!(matches!(
            Layered::<Demo>::from_toml("seed = ["),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn resolved_text_round_trips_and_lists_every_key() {
        let c = Layered::<Demo>::from_toml("inner.lags = [3, 8]").unwrap();
        let text = c.resolved_text();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("inner.lags = [3, 8]\n"));
        assert!(text.contains("inner.mode = \"a\"\n"));
        assert_eq!(Layered::<Demo>::from_toml(&text).unwrap(), c);
        assert_eq!(Layered::<Demo>::from_toml("").unwrap(), Layered::defaults());
    }

    #[test]
    fn overrides_resolve_suffixes() {
        let c = Layered::<Demo>::defaults()
            .with_overrides(&["window=7", "inner.mode=b", "flag=true"])
            .unwrap();
        assert_eq!(c.value.inner.window, 7);
        assert_eq!(c.value.inner.mode, "b");
        assert!(c.value.flag);
        assert!(matches!(
            Layered::<Demo>::defaults().with_overrides(&["nope=1"]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Layered::<Demo>::defaults().with_overrides(&["window"]),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn hash_ignores_excluded_keys_only() {
        let a = Layered::<Demo>::from_toml("seed = 1").unwrap();
        let b = Layered::<Demo>::from_toml("seed = 2").unwrap();
        let c = Layered::<Demo>::from_toml("seed = 1\nflag = true").unwrap();
        assert_eq!(a.hash(&["seed"]), b.hash(&["seed"]));
        assert_ne!(a.hash(&[]), b.hash(&[]));
        assert_ne!(a.hash(&["seed"]), c.hash(&["seed"]));
        assert_eq!(a.hash(&["seed"]).len(), 16);
    }
}

//! Run configuration as flat dotted keys: defaults, then a JSON file, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub type Flat = BTreeMap<String, Value>;

pub fn flatten(v: &Value) -> Flat {
    fn walk(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Flat::new();
    walk("", v, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Flag overrides keep their order; a later one wins.
pub type Overrides = Vec<(String, Value)>;

fn apply(flat: &mut Flat, key: &str, v: Value, origin: &str) -> Result<(), CliError> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = v;
            Ok(())
        }
        None => Err(CliError::Usage(format!("unknown config key '{key}' ({origin})"))),
    }
}

/// Resolves `C` from its defaults, an optional JSON file (flat dotted or nested keys)
/// and flag overrides. Returns the config and its flat form for echoing.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: Overrides) -> Result<(C, Flat), CliError> {
    let mut flat = flatten(&serde_json::to_value(C::default()).map_err(wildcascade::Error::from)?);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| wildcascade::Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
        }
        for (k, v) in flatten(&v) {
            apply(&mut flat, &k, v, &path.display().to_string())?;
        }
    }
    for (k, v) in overrides {
        apply(&mut flat, &k, v, "command line")?;
    }
    let config = serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok((config, flat))
}

pub fn echo(dir: &Path, flat: &Flat) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| wildcascade::Error::io(dir, e))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(flat).map_err(wildcascade::Error::from)? + "\n";
    std::fs::write(&path, text).map_err(|e| wildcascade::Error::io(&path, e))?;
    Ok(())
}

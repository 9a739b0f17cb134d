//! Layered configuration: built-in defaults, then a TOML or JSON file, then
//! command-line flags. Keys mirror the long flag names.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sfp_core::{Error, Result};

/// Keys written into `run_config.json` that are not settings themselves.
const RECORD_ONLY_KEYS: [&str; 2] = ["command", "derived-seeds"];

/// Options shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

impl Default for Common {
    fn default() -> Self {
        Common {
            seed: 0,
            out: PathBuf::from("run"),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Named sub-seeds; every random draw in a run comes from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DerivedSeeds {
    pub blend: u64,
    pub speckle: u64,
    pub split: u64,
    pub init: u64,
    pub batches: u64,
    pub baseline: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DerivedSeeds {
    pub fn from_run_seed(seed: u64) -> Self {
        let sub = |k: u64| splitmix(seed ^ splitmix(k));
        DerivedSeeds {
            blend: sub(1),
            speckle: sub(2),
            split: sub(3),
            init: sub(4),
            batches: sub(5),
            baseline: sub(6),
        }
    }
}

/// A subcommand's fully resolved settings plus the shared options.
#[derive(Debug, Clone)]
pub struct Resolved<S> {
    pub common: Common,
    pub settings: S,
    pub seeds: DerivedSeeds,
}

fn to_map<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map,
        _ => Map::new(),
    }
}

/// Reads a TOML or JSON configuration file into a flat key map. JSON is
/// chosen by a `.json` extension; anything else is read as TOML.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
    } else {
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(Error::config(format!("{}: expected a table of settings", path.display()))),
    }
}

/// Merges defaults ← file ← flags and deserializes the result. Keys that
/// are not settings of this subcommand are rejected.
pub fn resolve<S>(command: &str, file: Option<&Path>, flags: &impl Serialize, common_flags: &impl Serialize) -> Result<Resolved<S>>
where
    S: Default + Serialize + DeserializeOwned,
{
    let mut merged = to_map(&Common::default());
    merged.extend(to_map(&S::default()));
    if let Some(path) = file {
        for (key, value) in read_config_file(path)? {
            if key == "command" {
                if value.as_str() != Some(command) {
                    return Err(Error::config(format!(
                        "{}: configuration was recorded for {value}, not {command:?}",
                        path.display()
                    )));
                }
                continue;
            }
            if RECORD_ONLY_KEYS.contains(&key.as_str()) {
                continue;
            }
            if !merged.contains_key(&key) {
                return Err(Error::config(format!(
                    "{}: unknown setting {key:?} for {command}",
                    path.display()
                )));
            }
            merged.insert(key, value);
        }
    }
    for (key, value) in to_map(common_flags).into_iter().chain(to_map(flags)) {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    let value = Value::Object(merged);
    let common: Common = serde_json::from_value(value.clone()).map_err(|e| Error::config(e.to_string()))?;
    let settings: S = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
    if common.workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    Ok(Resolved {
        seeds: DerivedSeeds::from_run_seed(common.seed),
        common,
        settings,
    })
}

impl<S: Serialize> Resolved<S> {
    /// The complete record written before any work starts.
    pub fn record(&self, command: &str) -> Value {
        let mut map = Map::new();
        map.insert("command".into(), Value::String(command.into()));
        map.extend(to_map(&self.common));
        map.extend(to_map(&self.settings));
        map.insert("derived-seeds".into(), serde_json::to_value(self.seeds).unwrap_or(Value::Null));
        Value::Object(map)
    }

    pub fn write_record(&self, command: &str, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(&self.record(command)).map_err(|e| Error::parse("run config", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

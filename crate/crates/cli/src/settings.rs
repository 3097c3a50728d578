//! Configuration resolution and the bookkeeping files every command writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use advcap_core::config::RunConfig;
use advcap_core::data::sha256_hex;
use advcap_core::{Error, Result};
use serde::Serialize;

use crate::ConfigArgs;

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut t = table;
    for k in parents {
        t = t
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{k}` is not a table")))?;
    }
    t.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the config file (if any), applies `--set` overrides and `--seed`,
/// and validates the result. Unknown keys are rejected.
pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = args.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} is too large")))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    let cfg = RunConfig::from_toml(&toml::to_string(&table).expect("toml table serializes"))?;
    eprintln!("config hash {}", cfg.hash());
    Ok(cfg)
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    /// Output file name → SHA-256.
    outputs: BTreeMap<String, String>,
}

/// Writes `config.toml` and `run.json` into `out`. `outputs` names files in
/// `out` whose hashes are recorded.
pub fn record_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &BTreeMap<String, String>,
    outputs: &[&str],
) -> Result<()> {
    write_file(&out.join("config.toml"), cfg.resolved_toml().as_bytes())?;
    let mut hashes = BTreeMap::new();
    for name in outputs {
        hashes.insert(name.to_string(), file_hash(&out.join(name))?);
    }
    let rec = RunRecord {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs,
        outputs: hashes,
    };
    let json = serde_json::to_string_pretty(&rec).expect("run record serializes") + "\n";
    write_file(&out.join("run.json"), json.as_bytes())
}

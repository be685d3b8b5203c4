//! Config file loading and `--key value` overrides.

use std::path::Path;

use anyhow::{bail, Context};
use m3cs::config::RunConfig;
use serde_json::{Map, Value};

/// Section a bare override key belongs to for each command.
fn section(command: &str) -> Option<&'static str> {
    match command {
        "pretrain" => Some("pretrain"),
        "finetune" | "eval" => Some("finetune"),
        "fewshot" => Some("fewshot"),
        "gen-data" => Some("data"),
        _ => None,
    }
}

/// Full dotted key for `key` given the command context.
pub fn qualify(command: &str, key: &str, known: &[String]) -> anyhow::Result<String> {
    let key = key.replace('-', "_");
    if let Some((_, canonical)) = m3cs::config::KEY_ALIASES.iter().find(|(a, _)| *a == key || a.rsplit('.').next() == Some(key.as_str())) {
        return Ok(canonical.to_string());
    }
    if known.contains(&key) || key.contains('.') {
        return Ok(key);
    }
    if let Some(s) = section(command) {
        let k = format!("{s}.{key}");
        if known.contains(&k) {
            return Ok(k);
        }
    }
    let matches: Vec<&String> = known.iter().filter(|k| k.rsplit('.').next() == Some(key.as_str())).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => bail!("unknown config key {key:?}"),
        many => bail!("ambiguous config key {key:?}: one of {}", many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
    }
}

/// Parses `--key value` pairs. Values are JSON when they parse as JSON and
/// strings otherwise.
pub fn parse_pairs(command: &str, args: &[String]) -> anyhow::Result<Map<String, Value>> {
    let known = RunConfig::known_keys();
    let mut out = Map::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected --key, got {flag:?}");
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (key.to_string(), it.next().with_context(|| format!("missing value for --{key}"))?.clone()),
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.insert(qualify(command, &key, &known)?, value);
    }
    Ok(out)
}

/// `--config` and `--from-scratch` may appear anywhere among the overrides.
fn split_flags(args: &[String]) -> anyhow::Result<(Option<String>, bool, Vec<String>)> {
    let (mut config, mut scratch, mut rest) = (None, false, Vec::new());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--from-scratch" | "--from_scratch" => scratch = true,
            "--config" => config = Some(it.next().context("missing value for --config")?.clone()),
            _ => match a.strip_prefix("--config=") {
                Some(path) => config = Some(path.to_string()),
                None => rest.push(a.clone()),
            },
        }
    }
    Ok((config, scratch, rest))
}

/// Defaults, then the config file, then overrides.
pub fn resolve(command: &str, config: Option<&Path>, args: &[String], from_scratch: bool) -> anyhow::Result<RunConfig> {
    let (late_config, late_scratch, args) = split_flags(args)?;
    let config = late_config.as_deref().map(Path::new).or(config);
    let from_scratch = from_scratch || late_scratch;
    let mut flat = Map::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
            Value::Object(m) => flatten(&m, "", &mut flat),
            _ => bail!("config {}: top level must be an object", path.display()),
        }
    }
    for (alias, key) in m3cs::config::KEY_ALIASES {
        if let Some(v) = flat.remove(*alias) {
            flat.insert(key.to_string(), v);
        }
    }
    for (k, v) in parse_pairs(command, &args)? {
        flat.insert(k, v);
    }
    if from_scratch {
        flat.insert("finetune.from_scratch".into(), Value::Bool(true));
    }
    Ok(RunConfig::from_flat(&flat)?)
}

fn flatten(m: &Map<String, Value>, prefix: &str, out: &mut Map<String, Value>) {
    for (k, v) in m {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) if !inner.is_empty() => flatten(inner, &key, out),
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
}

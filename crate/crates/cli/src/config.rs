//! Merging key/value config files into the command line.
//!
//! Config entries become `--key value` tokens inserted right after the
//! subcommand name, so anything given explicitly on the command line (which
//! comes later) overrides them.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::Value;
use vdforge_core::config::KeyValues;

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--config" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Tokens equivalent to the entries of `kv`.
pub fn to_args(kv: &KeyValues) -> Vec<OsString> {
    let mut out = Vec::new();
    for (key, value) in kv.iter() {
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    out
}

/// Returns `argv` with the config file's entries spliced in.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let (Some(path), Some(sub)) = (config_path(&argv), subcommand_index(&argv)) else {
        return Ok(argv);
    };
    let kv =
        KeyValues::load(&path).with_context(|| format!("loading config {}", path.display()))?;
    let mut out: Vec<OsString> = argv[..=sub].to_vec();
    out.extend(to_args(&kv));
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

/// The resolved flags of a subcommand in config-file form.
pub fn to_key_values(resolved: &Value) -> KeyValues {
    let mut kv = KeyValues::new();
    let Some(map) = resolved.as_object() else {
        return kv;
    };
    for (key, value) in map {
        let text = match value {
            Value::Null => continue,
            Value::String(s) => s.clone(),
            Value::Array(items) if items.is_empty() => continue,
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        kv.set(key, text);
    }
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn finds_subcommand_past_global_config() {
        let argv = os(&[
            "vdforge",
            "--config",
            "run.cfg",
            "grade",
            "--responses",
            "r",
        ]);
        assert_eq!(subcommand_index(&argv), Some(3));
        assert_eq!(config_path(&argv), Some(PathBuf::from("run.cfg")));
        let argv = os(&["vdforge", "grade", "--config=x.cfg"]);
        assert_eq!(subcommand_index(&argv), Some(1));
        assert_eq!(config_path(&argv), Some(PathBuf::from("x.cfg")));
    }

    #[test]
    fn bools_and_lists() {
        let kv = KeyValues::parse("no-dedup = true\nall-combinations = false\nalphas = 1,0.5\n")
            .unwrap();
        assert_eq!(to_args(&kv), os(&["--no-dedup", "--alphas", "1,0.5"]));
        let v =
            serde_json::json!({"alphas": [1.0, 0.5], "mode": "vd-lb", "policy": null, "views": []});
        let kv = to_key_values(&v);
        assert_eq!(kv.get("alphas"), Some("1.0,0.5"));
        assert_eq!(kv.get("mode"), Some("vd-lb"));
        assert_eq!(kv.get("policy"), None);
        assert_eq!(kv.get("views"), None);
    }
}

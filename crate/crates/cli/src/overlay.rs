//! `--config` files: `key = value` lines turned into `--key value` flags
//! placed ahead of the command-line flags, so the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use serde_json::Value;

const VALUE_OPTIONS: [&str; 2] = ["--config", "--threads"];

/// Reads a config file into flag pairs.
pub fn read_config(path: &Path) -> Result<Vec<OsString>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || VALUE_OPTIONS.contains(&format!("--{key}").as_str()) || key == "print-config" {
            return Err(format!("{}:{}: `{}` cannot be set from a config file", path.display(), i + 1, k.trim()));
        }
        out.push(format!("--{key}").into());
        out.push(v.trim().into());
    }
    Ok(out)
}

/// Value of `--config` in raw arguments, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    let mut found = None;
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = s.strip_prefix("--config=") {
            found = Some(v.into());
        }
    }
    found
}

/// Index of the subcommand token.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if VALUE_OPTIONS.contains(&s.as_ref()) {
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

/// Arguments with the config entries inserted right after the subcommand.
pub fn apply(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let extra = read_config(Path::new(&path))?;
    let Some(at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let mut out = args[..=at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}

/// `key=value` lines of a serialized argument struct, skipping unset options.
pub fn render(value: &Value) -> String {
    let mut s = String::new();
    if let Value::Object(map) = value {
        for (k, v) in map {
            let v = match v {
                Value::Null => continue,
                Value::String(x) => x.clone(),
                other => other.to_string(),
            };
            s.push_str(&format!("{k}={v}\n"));
        }
    }
    s
}

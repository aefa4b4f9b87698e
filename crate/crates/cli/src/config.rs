//! Config files hold flag values keyed by long flag name. They are spliced
//! into the argument list right after the subcommand, ahead of the user's
//! own flags, so anything given on the command line overrides the file.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};

/// Keys a resolved-config file carries that are not flags.
const META_KEYS: [&str; 2] = ["schema", "command"];

pub fn flags_from_file(path: &Path, command: &[&str]) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(map) = value else {
        bail!("config {} must hold a JSON object", path.display());
    };
    if let Some(cmd) = map.get("command") {
        let expected = command.join(" ");
        if cmd.as_str() != Some(expected.as_str()) {
            bail!("config {} is for `{}`, not `{expected}`", path.display(), cmd);
        }
    }
    flags_from_map(&map)
}

fn flags_from_map(map: &Map<String, Value>) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in map {
        if META_KEYS.contains(&key.as_str()) {
            continue;
        }
        if key == "config" {
            bail!("config files cannot name another config");
        }
        let text = match value {
            Value::Null => continue,
            Value::Bool(b) => b.to_string(),
            Value::Number(n) => n.to_string(),
            Value::String(s) => s.clone(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    other => bail!("config key `{key}`: unsupported list element {other}"),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            Value::Object(_) => bail!("config key `{key}`: nested objects are not flags"),
        };
        out.push(format!("--{key}={text}").into());
    }
    Ok(out)
}

/// `argv` with the config flags inserted after the subcommand tokens.
pub fn splice(argv: &[OsString], command: &[&str], flags: Vec<OsString>) -> Vec<OsString> {
    let mut rest: Vec<OsString> = argv.iter().skip(1).cloned().collect();
    let mut from = 0;
    for name in command {
        if let Some(pos) = rest[from..].iter().position(|a| a == name) {
            rest.remove(from + pos);
            from += pos;
        }
    }
    let mut out = vec![argv[0].clone()];
    out.extend(command.iter().map(OsString::from));
    out.extend(flags);
    out.extend(rest);
    out
}

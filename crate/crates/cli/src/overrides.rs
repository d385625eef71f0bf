//! Config loading with dotted-name overrides such as `--train.dim 16`.

use std::ffi::OsString;
use std::path::Path;

use medrec_core::config::RunConfig;
use medrec_core::{Error, Result};
use serde_json::Value;

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
/// Everything else is returned untouched for the regular parser.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| is_dotted(s)) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?
                    .into_string()
                    .map_err(|_| Error::Config(format!("--{name} value is not valid UTF-8")))?;
                (name.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn is_dotted(flag: &str) -> bool {
    let key = flag.split('=').next().unwrap_or("");
    key.contains('.') && !key.starts_with('.') && !key.ends_with('.')
}

/// Sets `path` inside `root`, creating objects on the way. The raw value is
/// read as JSON when it parses, otherwise as a string.
pub fn apply(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--{path}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// Reads the config file (or defaults), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io_at(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                location: format!("{}:{}:{}", p.display(), e.line(), e.column()),
                message: e.to_string(),
            })?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for (k, v) in overrides {
        apply(&mut root, k, v)?;
    }
    let config: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, ov) =
            split_overrides(os(&["medrec", "train", "--train.dim", "8", "--seed", "3", "--loss=x", "--eval.threshold=0.4"]))
                .unwrap();
        assert_eq!(rest, os(&["medrec", "train", "--seed", "3", "--loss=x"]));
        assert_eq!(
            ov,
            vec![("train.dim".into(), "8".into()), ("eval.threshold".into(), "0.4".into())]
        );
        assert!(split_overrides(os(&["medrec", "--train.dim"])).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields_and_typos_fail() {
        let ov = vec![
            ("train.dim".to_string(), "8".to_string()),
            ("train.variant".into(), "no_co".into()),
            ("paths.corpus".into(), "c.jsonl".into()),
            ("train.attention.tau".into(), "0.5".into()),
        ];
        let c = load(None, &ov).unwrap();
        assert_eq!(c.train.dim, 8);
        assert_eq!(c.train.variant.name(), "no_co");
        assert_eq!(c.paths.corpus.as_deref(), Some(Path::new("c.jsonl")));
        assert_eq!(c.train.attention.tau, 0.5);
        let bad = load(None, &[("train.dimm".into(), "8".into())]).unwrap_err();
        assert_eq!(bad.kind(), "config");
        let bad = load(None, &[("train.dim.x".into(), "8".into())]).unwrap_err();
        assert_eq!(bad.kind(), "config");
    }
}

//! Flat `key = value` configuration files merged under the command line.
//!
//! Keys are long flag names without the dashes. `#` starts a comment. A key
//! given on the command line wins over the file.

use std::path::Path;

use clap::{ArgAction, Command};

use crate::CliError;

pub fn parse(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(CliError::Usage(format!("config line {}: duplicate key {key}", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Value of `--config` in the raw arguments.
fn config_path(args: &[String]) -> Option<String> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

fn given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    let with_value = format!("--{key}=");
    args.iter().any(|a| *a == flag || a.starts_with(&with_value))
}

/// `args` (including the program name) with config entries appended for every
/// flag not already present.
pub fn merge(args: Vec<String>, root: &Command) -> Result<Vec<String>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
    let entries = parse(&text)?;
    let sub = args
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a))
        .ok_or_else(|| CliError::Usage("a config file needs a subcommand".into()))?;
    let mut merged = args.clone();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage("config files cannot nest".into()));
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key} for {}", sub.get_name())))?;
        if given(&args, &key) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => merged.push(format!("--{key}")),
                "false" => {}
                _ => return Err(CliError::Usage(format!("config key {key} expects true or false"))),
            }
        } else {
            merged.push(format!("--{key}={value}"));
        }
    }
    Ok(merged)
}

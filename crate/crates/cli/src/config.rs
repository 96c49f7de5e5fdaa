//! Config-file support.
//!
//! The file is a flat table whose keys are flag names. Each entry that the
//! selected subcommand accepts, and that was not given on the command line,
//! is appended to the argument list as `--flag=value` before the final parse,
//! so config values go through exactly the same validation as flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory};
use serde_json::Value;

use crate::args::Cli;
use crate::InputError;

pub fn load(path: &Path) -> Result<BTreeMap<String, Value>, InputError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| InputError(format!("config {}: {e}", path.display())))?
    } else {
        let table: toml::Table = text
            .parse()
            .map_err(|e| InputError(format!("config {}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| InputError(format!("config {}: {e}", path.display())))?
    };
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(InputError(format!(
            "config {} must be a table of flag values",
            path.display()
        ))),
    }
}

fn flag_value(key: &str, value: &Value) -> Result<Option<String>, InputError> {
    let scalar = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(InputError(format!("config key `{key}` has an unsupported value"))),
    };
    Ok(match value {
        Value::Bool(false) | Value::Null => None,
        Value::Bool(true) => Some(String::new()),
        Value::Array(items) => Some(items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",")),
        other => Some(scalar(other)?),
    })
}

/// Matches of each level, outermost first.
fn match_chain(matches: &ArgMatches) -> (Vec<&ArgMatches>, Vec<String>) {
    let mut chain = vec![matches];
    let mut names = Vec::new();
    let mut cur = matches;
    while let Some((name, sub)) = cur.subcommand() {
        names.push(name.to_string());
        chain.push(sub);
        cur = sub;
    }
    (chain, names)
}

/// Returns `argv` extended with the config file's entries.
pub fn merged_argv(argv: Vec<OsString>) -> Result<Vec<OsString>, InputError> {
    let Ok(matches) = Cli::command().try_get_matches_from(&argv) else {
        // let the final parse report the problem
        return Ok(argv);
    };
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Ok(argv);
    };
    let entries = load(&path)?;

    let mut cmd = Cli::command();
    cmd.build();
    let (chain, names) = match_chain(&matches);
    let mut leaf = &cmd;
    for name in &names {
        leaf = leaf.find_subcommand(name).expect("matched subcommand exists");
    }

    let mut extra = Vec::new();
    for (key, value) in &entries {
        let id = key.replace('-', "_");
        if id == "config" {
            continue;
        }
        let Some(arg) = leaf.get_arguments().find(|a| a.get_id().as_str() == id) else {
            log::debug!("config key `{key}` does not apply to this command");
            continue;
        };
        let Some(long) = arg.get_long() else {
            log::warn!("config key `{key}` names a positional argument; ignored");
            continue;
        };
        let on_command_line = chain.iter().any(|m| {
            matches!(m.try_contains_id(&id), Ok(true)) && m.value_source(&id) == Some(ValueSource::CommandLine)
        });
        if on_command_line {
            continue;
        }
        match flag_value(key, value)? {
            None => {}
            Some(v) if v.is_empty() => extra.push(OsString::from(format!("--{long}"))),
            Some(v) => extra.push(OsString::from(format!("--{long}={v}"))),
        }
    }
    let mut out = argv;
    out.extend(extra);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn argv(items: &[&str]) -> Vec<OsString> {
        items.iter().map(OsString::from).collect()
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn config_fills_unset_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(&dir, "c.toml", "seed = 9\nsigma = 0.02\nepochs = 3\nbudget = 5.0\n");
        let merged = merged_argv(argv(&["tlaw", "synth", "--sigma", "0.5", "--config", &cfg])).unwrap();
        let cli = Cli::try_parse_from(merged).unwrap();
        assert_eq!(cli.seed, 9);
        let crate::args::Command::Synth(s) = cli.command else {
            panic!()
        };
        assert_eq!(s.sigma, 0.5);
        assert_eq!(s.epochs, Some(3));
    }

    #[test]
    fn json_config_lists_and_bools() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(&dir, "c.json", r#"{"forms": [1, 5], "full-starts": true, "skip": 2}"#);
        let merged = merged_argv(argv(&["tlaw", "cv", "data.csv", "--config", &cfg])).unwrap();
        let cli = Cli::try_parse_from(merged).unwrap();
        let crate::args::Command::Cv(c) = cli.command else {
            panic!()
        };
        assert_eq!(c.forms, vec![1, 5]);
        assert!(c.full_starts);
        assert_eq!(c.skip, 2);
    }

    #[test]
    fn bad_config_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(&dir, "c.toml", "seed = [\n");
        assert!(merged_argv(argv(&["tlaw", "synth", "--config", &cfg])).is_err());
        let cfg = write(&dir, "d.toml", "sigma = \"abc\"\n");
        let merged = merged_argv(argv(&["tlaw", "synth", "--config", &cfg])).unwrap();
        assert!(Cli::try_parse_from(merged).is_err());
    }
}

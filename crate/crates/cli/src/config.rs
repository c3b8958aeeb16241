//! `--config` files for the non-training commands: a flat TOML table whose
//! keys are flag names. Its entries are spliced in front of the command-line
//! flags, which therefore win.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, CommandFactory};

use crate::args::Cli;

const TRAINING: [&str; 3] = ["train-crg", "train-disc", "train-refiner"];

fn config_path(rest: &[OsString]) -> Option<OsString> {
    let mut it = rest.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn line_of(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|r| r.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

/// Returns the argument list with the config file's flags inserted after the
/// subcommand name. Errors name the file, line and key.
pub fn expand(raw: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(sub) = raw.get(1).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(raw);
    };
    if TRAINING.contains(&sub.as_str()) {
        return Ok(raw);
    }
    let Some(path) = config_path(&raw[2..]) else {
        return Ok(raw);
    };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else {
        return Ok(raw);
    };
    let path = Path::new(&path);
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| format!("{}: {e}", path.display()))?;

    let mut flags: Vec<OsString> = Vec::new();
    for (key, value) in &table {
        let name = key.replace('_', "-");
        let where_ = format!("{}:{}: {key}", path.display(), line_of(&text, key));
        let arg = sc
            .get_arguments()
            .find(|a| a.get_long() == Some(name.as_str()) && name != "config")
            .ok_or_else(|| format!("{where_}: unknown key for `{sub}`"))?;
        let is_switch = matches!(arg.get_action(), ArgAction::SetTrue);
        let flag = OsString::from(format!("--{name}"));
        match value {
            toml::Value::Boolean(b) if is_switch => {
                if *b {
                    flags.push(flag);
                }
            }
            _ if is_switch => return Err(format!("{where_}: expected true or false")),
            toml::Value::String(s) => flags.extend([flag, s.into()]),
            toml::Value::Integer(i) => flags.extend([flag, i.to_string().into()]),
            toml::Value::Float(f) => flags.extend([flag, f.to_string().into()]),
            toml::Value::Array(items) => {
                let parts: Result<Vec<String>, String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => Ok(s.clone()),
                        toml::Value::Integer(i) => Ok(i.to_string()),
                        toml::Value::Float(f) => Ok(f.to_string()),
                        _ => Err(format!("{where_}: list items must be strings or numbers")),
                    })
                    .collect();
                flags.extend([flag, parts?.join(",").into()]);
            }
            _ => return Err(format!("{where_}: unsupported value")),
        }
    }
    let mut out = raw[..2].to_vec();
    out.extend(flags);
    out.extend(raw[2..].iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn splices_flags_before_the_command_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("grid.toml");
        std::fs::write(&cfg, "cycles = 3\nno_refine = true\nno_discriminator = false\nfills = [\"white\", \"black\"]\n").unwrap();
        let raw = os(&[
            "inpaint",
            "grid",
            "--config",
            cfg.to_str().unwrap(),
            "--cycles",
            "5",
        ]);
        let out = expand(raw).unwrap();
        let s: Vec<String> = out
            .iter()
            .map(|o| o.to_string_lossy().into_owned())
            .collect();
        assert_eq!(&s[..2], ["inpaint", "grid"]);
        assert!(s.windows(2).any(|w| w == ["--fills", "white,black"]));
        assert!(s.contains(&"--no-refine".to_string()));
        assert!(!s.contains(&"--no-discriminator".to_string()));
        // the command line comes last so it overrides
        assert_eq!(&s[s.len() - 2..], ["--cycles", "5"]);
    }

    #[test]
    fn unknown_keys_report_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "cycles = 3\n\ncolour = \"red\"\n").unwrap();
        let err = expand(os(&[
            "inpaint",
            "inpaint",
            "--config",
            cfg.to_str().unwrap(),
        ]))
        .unwrap_err();
        assert!(err.contains(":3: colour"), "{err}");
        std::fs::write(&cfg, "no_refine = 1\n").unwrap();
        assert!(expand(os(&[
            "inpaint",
            "inpaint",
            "--config",
            cfg.to_str().unwrap()
        ]))
        .is_err());
    }

    #[test]
    fn training_commands_pass_through() {
        let raw = os(&["inpaint", "train-disc", "--config", "/nonexistent.toml"]);
        assert_eq!(expand(raw.clone()).unwrap(), raw);
    }
}

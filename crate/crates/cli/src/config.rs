//! `key = value` config files. Each entry becomes a `--key=value` flag
//! placed ahead of the command-line flags, so flags given on the command
//! line win and unknown keys are rejected by the argument parser.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn config_to_flags(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse(text: &str) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got `{raw}`", i + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            bail!("line {}: bad key `{key}`", i + 1);
        }
        if key == "config" {
            bail!(
                "line {}: config files cannot include other config files",
                i + 1
            );
        }
        let key = key.replace('_', "-");
        match value {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            _ => flags.push(format!("--{key}={value}")),
        }
    }
    Ok(flags)
}

/// Pull `--config FILE` / `--config=FILE` out of `args` and splice the
/// file's entries in right after the subcommand name.
pub fn expand(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let flags = config_to_flags(Path::new(&path))?;
    // rest[0] is the program, rest[1] the subcommand
    let at = rest.len().min(2);
    rest.splice(at..at, flags);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries() {
        let flags = parse("# comment\nfamily = normal\n\ntrials=100 # trailing\nexclude_failures = true\nx = false\n").unwrap();
        assert_eq!(
            flags,
            vec!["--family=normal", "--trials=100", "--exclude-failures"]
        );
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse("family = normal\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}

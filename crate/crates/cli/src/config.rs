//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored; keys may use `-` or `_`.

use std::path::Path;

use anyhow::{Context, Result};

use crate::Usage;

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_pair(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Usage(format!("expected key=value, got {text:?}")))?;
    let key = normalize_key(k);
    if key.is_empty() {
        return Err(Usage(format!("empty key in {text:?}")).into());
    }
    Ok((key, v.trim().to_string()))
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_pair(line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let entries = parse("# run\n\nbatch-size = 4\n learning_rate=0.001 \n").unwrap();
        assert_eq!(
            entries,
            vec![
                ("batch_size".to_string(), "4".to_string()),
                ("learning_rate".to_string(), "0.001".to_string())
            ]
        );
        assert!(parse("epochs 3").is_err());
        assert_eq!(parse(&render(&entries)).unwrap(), entries);
    }
}

//! Layered run configuration: defaults, then a flat TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Table;

use crate::CliError;

/// Overrides relative output directories when set.
pub const OUT_ROOT_ENV: &str = "PATCHMIX_OUT_ROOT";

pub const RUN_FILE: &str = "run.toml";

/// Merge `R::default()`, the optional config file and the flags that were
/// actually given (unset flags must serialize to nothing).
pub fn resolve<R, F>(file: Option<&Path>, flags: &F) -> Result<R, CliError>
where
    R: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut table = Table::try_from(R::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let from_file: Table = text.parse().map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        for (k, v) in from_file {
            table.insert(k, v);
        }
    }
    let from_flags = Table::try_from(flags).map_err(|e| CliError::Usage(e.to_string()))?;
    for (k, v) in from_flags {
        table.insert(k, v);
    }
    table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("configuration: {}", e.message())))
}

/// Apply the output-root override to a relative directory.
pub fn out_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Serialize the resolved configuration into the run directory.
pub fn save<R: Serialize>(dir: &Path, command: &str, resolved: &R) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(patchmix::Error::Io { path: dir.to_path_buf(), source: e }))?;
    let body = toml::to_string(resolved).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = dir.join(RUN_FILE);
    fs::write(&path, format!("# patchmix {command}\n{body}"))
        .map_err(|e| CliError::Core(patchmix::Error::Io { path, source: e }))
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("missing {what}")));
    }
    if !path.exists() {
        return Err(CliError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        epochs: usize,
        lr: f64,
        name: String,
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
    }

    #[test]
    fn flags_win_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "epochs = 3\nlr = 1\n").unwrap();
        let r: Demo = resolve(Some(&file), &Flags { epochs: Some(7) }).unwrap();
        assert_eq!(r, Demo { epochs: 7, lr: 1.0, name: String::new() });
        let r: Demo = resolve(Some(&file), &Flags { epochs: None }).unwrap();
        assert_eq!(r.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "epoch = 3\n").unwrap();
        assert!(matches!(resolve::<Demo, _>(Some(&file), &Flags { epochs: None }), Err(CliError::Usage(_))));
    }
}

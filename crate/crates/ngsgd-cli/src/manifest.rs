//! Flat key=value configs and run manifests.
//!
//! Every command that produces artifacts writes exactly one manifest next to
//! them. The manifest starts with the command name and an echo of every
//! resolved parameter, then records wall times and output paths. The format
//! doubles as the config-file format: feeding a manifest back through
//! `--config` replays the run, because flag resolution takes command-line
//! values first, then file values, and ignores keys it does not recognize.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn read_kv_file(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Resolves each parameter as flag value, then config-file value, then
/// default, and remembers every resolved pair so the manifest can echo the
/// full effective configuration.
pub struct Resolver {
    file: HashMap<String, String>,
    echo: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => read_kv_file(p)?,
            None => HashMap::new(),
        };
        Ok(Resolver { file, echo: Vec::new() })
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key}={raw}: {e}"))),
        }
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self
                .lookup::<T>(key)?
                .ok_or_else(|| CliError::Usage(format!("missing required value for --{key}")))?,
        };
        self.echo.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn or_default<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.lookup::<T>(key)?.unwrap_or(default),
        };
        self.echo.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self
                .file
                .get(key)
                .map(PathBuf::from)
                .ok_or_else(|| CliError::Usage(format!("missing required value for --{key}")))?,
        };
        self.echo.push((key.to_string(), v.display().to_string()));
        Ok(v)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let v = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &v {
            self.echo.push((key.to_string(), p.display().to_string()));
        }
        v
    }

    /// Seed resolution: `--seed`, then the config file, then the
    /// `NGSGD_SEED` environment variable, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.lookup::<u64>("seed")? {
                Some(v) => v,
                None => match std::env::var("NGSGD_SEED") {
                    Ok(s) => s
                        .parse()
                        .map_err(|e| CliError::Usage(format!("NGSGD_SEED={s}: {e}")))?,
                    Err(_) => 0,
                },
            },
        };
        self.echo.push(("seed".to_string(), v.to_string()));
        Ok(v)
    }
}

pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, resolver: Resolver) -> Self {
        let mut entries = vec![("command".to_string(), command.to_string())];
        entries.extend(resolver.echo);
        Manifest { entries }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

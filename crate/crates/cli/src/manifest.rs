use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const TOOL_VERSION: &str = concat!("tabmlm ", env!("CARGO_PKG_VERSION"));

/// Ordered `key=value` record of one subcommand run.
#[derive(Debug, Clone)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        Manifest {
            entries: vec![
                ("subcommand".into(), subcommand.into()),
                ("tool_version".into(), TOOL_VERSION.into()),
            ],
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn path(&mut self, key: &str, path: &Path) -> &mut Self {
        self.set(key, path.display())
    }

    pub fn config(&mut self, resolved: &[(String, String)]) -> &mut Self {
        for (k, v) in resolved {
            self.set(format!("config.{k}"), v);
        }
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/manifest.txt`.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

/// `out.csv` -> `out.csv.manifest.txt`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    file.with_file_name(name)
}

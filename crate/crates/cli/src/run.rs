//! Run directories: config snapshot, `run.json` manifest and error reports.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use feasc::config::content_hash;

use crate::OutputArgs;

/// Environment variable naming the default parent of run directories.
pub const OUTPUT_ROOT_ENV: &str = "FEASC_OUTPUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; nothing was run.
    Usage(String),
    Runtime(feasc::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<feasc::Error> for CliError {
    fn from(e: feasc::Error) -> Self {
        match e {
            feasc::Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: String,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(feasc::Error::Io {
        path: path.into(),
        source: e,
    })
}

impl RunDir {
    /// Creates the run directory and writes `config.toml` and a provisional `run.json`.
    pub fn create(command: &str, snapshot: &str, out: &OutputArgs) -> Result<Self, CliError> {
        let started = now();
        let hash = content_hash(snapshot.as_bytes());
        let path = match &out.out {
            Some(p) => p.clone(),
            None => {
                let root = out
                    .out_root
                    .clone()
                    .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stem = format!("{command}-{started}-{}", &hash[..8]);
                let mut p = root.join(&stem);
                let mut n = 1;
                while p.exists() {
                    p = root.join(format!("{stem}-{n}"));
                    n += 1;
                }
                p
            }
        };
        std::fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        let _ = std::fs::remove_file(path.join("error.txt"));
        let cfg = path.join("config.toml");
        std::fs::write(&cfg, snapshot).map_err(|e| io_err(&cfg, e))?;
        let run = Self {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                config: snapshot.to_string(),
                config_hash: hash,
                output_dir: path.clone(),
                started_unix: started,
                finished_unix: None,
                status: "running".into(),
            },
            path,
        };
        run.write_manifest()?;
        println!("run directory: {}", run.path.display());
        Ok(run)
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let p = self.path.join("run.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    pub fn guard<F>(&self, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&Path) -> Result<(), CliError>,
    {
        f(&self.path)
    }

    /// Stamps the manifest; on failure also writes `error.txt` and points at it.
    pub fn finish(&mut self, result: Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.finished_unix = Some(now());
        self.manifest.status = match &result {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed (exit {})", e.exit_code()),
        };
        if let Err(e) = &result {
            let p = self.path.join("error.txt");
            if std::fs::write(&p, format!("{e}\n{e:#?}\n")).is_ok() {
                eprintln!("diagnostics written to {}", p.display());
            }
        }
        self.write_manifest()?;
        result
    }
}

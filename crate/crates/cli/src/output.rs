use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ptz_core::metrics::{write_events_csv, FrameEvents};
use ptz_core::pipeline::RunConfig;
use ptz_core::simulator::Scenario;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Everything needed to repeat a run: the resolved scenario (seed included)
/// and the complete configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, scenario: &Scenario, config: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: scenario.seed,
            scenario: scenario.clone(),
            config: config.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.into(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.seed != m.scenario.seed {
            return Err(CliError::Config(format!(
                "{}: seed disagrees with scenario",
                path.display()
            )));
        }
        Ok(m)
    }
}

/// Output directory that refuses to replace existing results unless forced.
pub struct OutputDir {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.into(),
        source,
    }
}

impl OutputDir {
    pub fn create(dir: &Path, force: bool, files: &[&str]) -> Result<Self> {
        if !force {
            if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
                return Err(CliError::Exists(f));
            }
        }
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.into() })
    }

    fn open(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok((path, BufWriter::new(f)))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let (path, mut w) = self.open(name)?;
        serde_json::to_writer_pretty(&mut w, value)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        writeln!(w).and_then(|_| w.flush()).map_err(io_err(&path))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let (path, w) = self.open(name)?;
        let mut w = csv::Writer::from_writer(w);
        for r in rows {
            w.serialize(r)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(io_err(&path))
    }

    pub fn write_events(&self, name: &str, events: &[FrameEvents]) -> Result<()> {
        let (path, w) = self.open(name)?;
        write_events_csv(events, w)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let (path, mut w) = self.open(name)?;
        w.write_all(bytes)
            .and_then(|_| w.flush())
            .map_err(io_err(&path))
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

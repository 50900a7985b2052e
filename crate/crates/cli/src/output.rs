//! Output directories with cleanup on failure, and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Tracks every file a command writes so a failed run leaves nothing behind.
pub struct OutputDir {
    dir: PathBuf,
    created: bool,
    files: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            created,
            files: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn writer(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    pub fn discard(self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[derive(Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub stages: Vec<Stage>,
    pub wall_clock_seconds: f64,
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    started: Instant,
    stage_start: Instant,
    pub manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        let now = Instant::now();
        Recorder {
            started: now,
            stage_start: now,
            manifest: RunManifest {
                command: command.to_string(),
                arguments: std::env::args().skip(1).collect(),
                version: env!("CARGO_PKG_VERSION"),
                seed: 0,
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                stages: Vec::new(),
                wall_clock_seconds: 0.0,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn config<T: Serialize>(&mut self, seed: u64, config: &T) -> Result<()> {
        self.manifest.seed = seed;
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest.stages.push(Stage {
            name: name.to_string(),
            seconds: (now - self.stage_start).as_secs_f64(),
        });
        self.stage_start = now;
    }

    pub fn finish(mut self, out: &mut OutputDir) -> Result<()> {
        self.manifest.outputs = out.names();
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        out.json(MANIFEST, &self.manifest)
    }
}

pub fn sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

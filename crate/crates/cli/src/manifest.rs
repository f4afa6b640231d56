use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

/// Record of one invocation, written once per run whether it succeeded or not.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: Option<usize>,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
    pub status: String,
    pub exit_code: i32,
}

pub struct Recorder {
    pub manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, threads: Option<usize>) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: Value::Null,
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                threads,
                started_unix_seconds: now,
                wall_clock_seconds: 0.0,
                status: "running".into(),
                exit_code: 0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self, path: &Path, status: String, exit_code: i32) -> std::io::Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        self.manifest.status = status;
        self.manifest.exit_code = exit_code;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(&self.manifest)?)
    }
}

/// `<out>.manifest.json`, next to the output rather than inside it so that
/// output directories hold only data.
pub fn default_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "fstr".into());
    name.push(".manifest.json");
    out.with_file_name(name)
}

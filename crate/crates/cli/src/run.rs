use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use perser_core::calibrate::CalibrationConfig;
use perser_core::downstream::FinetuneConfig;
use perser_core::encoder::EncoderConfig;
use perser_core::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};

/// Failure with its exit code class.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }
}

impl From<perser_core::Error> for Failure {
    fn from(e: perser_core::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSettings {
    pub k_values: Vec<usize>,
    pub repeats: usize,
    pub personalize: bool,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            k_values: vec![5, 10, 20],
            repeats: 1,
            personalize: true,
        }
    }
}

/// Contents of `--config`; every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub calibration: CalibrationConfig,
    pub gap: GapSettings,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    /// Byte copy of the `--config` file, if one was given.
    pub config_snapshot: Option<PathBuf>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub duration_secs: f64,
}

/// Paths, effective settings and the input/output ledger of one invocation.
pub struct Run {
    pub root: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub config: RunConfig,
    config_path: Option<PathBuf>,
    config_bytes: Option<Vec<u8>>,
    subcommand: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::User(format!("{}: {e}", path.display()))
}

impl Run {
    pub fn new(root: PathBuf, seed: u64, jobs: usize, config_path: Option<PathBuf>, subcommand: &'static str) -> CliResult<Self> {
        let (config, config_bytes) = match &config_path {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| io_failure(p, e))?;
                let config: RunConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| Failure::User(format!("{}: invalid config: {e}", p.display())))?;
                (config, Some(bytes))
            }
            None => (RunConfig::default(), None),
        };
        if jobs == 0 {
            return Err(Failure::User("--jobs must be at least 1".into()));
        }
        let mut run = Self {
            root,
            seed,
            jobs,
            config,
            config_path: config_path.clone(),
            config_bytes,
            subcommand,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        };
        if let Some(p) = config_path {
            run.inputs.push(p);
        }
        run.config.pretrain.seed = seed;
        run.config.finetune.seed = seed;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Records `path` as an input; missing files are a user error naming the path.
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        if !path.exists() {
            return Err(Failure::User(format!("input not found: {}", path.display())));
        }
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    /// Creates the parent directory of an output and records it.
    pub fn output(&mut self, path: &Path) -> CliResult<PathBuf> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        }
        self.outputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.output(&self.path(rel))?;
        fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
        Ok(path)
    }

    fn run_id(&self, config: &str) -> String {
        // FNV-1a over the subcommand, seed and effective configuration.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.subcommand.bytes().chain(self.seed.to_le_bytes()).chain(config.bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{}-{h:016x}", self.subcommand)
    }

    pub fn finish(mut self, effective: serde_json::Value) -> CliResult<PathBuf> {
        let dir = self.path("manifests");
        let config_snapshot = match self.config_bytes.clone() {
            Some(bytes) => {
                let p = dir.join(format!("{}.config.json", self.subcommand));
                self.output(&p)?;
                fs::write(&p, bytes).map_err(|e| io_failure(&p, e))?;
                Some(p)
            }
            None => None,
        };
        let manifest_path = self.output(&dir.join(format!("{}.json", self.subcommand)))?;
        self.outputs.dedup();
        let manifest = RunManifest {
            run_id: self.run_id(&effective.to_string()),
            subcommand: self.subcommand.into(),
            config_snapshot,
            config: effective,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            seed: self.seed,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Internal(e.to_string()))?;
        fs::write(&manifest_path, text + "\n").map_err(|e| io_failure(&manifest_path, e))?;
        debug_assert!(self.config_path.is_none() || manifest.config_snapshot.is_some());
        Ok(manifest_path)
    }
}

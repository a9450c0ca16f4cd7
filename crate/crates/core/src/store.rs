//! Directory-based run storage.
//!
//! A run is a directory `<root>/<run_id>/` holding `config.rlab.json`,
//! `run.json`, and one numbered subdirectory per stage (`00_input`,
//! `01_segment`, ...). A stage is finalized by writing `manifest.json`,
//! which records every artifact's SHA-256 digest; after that the stage is
//! append-only and every load re-verifies the digests.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, StageDescriptor, StageKind, StagePlan};
use crate::error::{invalid, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.rlab.json";

/// Lowercase hex SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
        }
    }
}

/// A file and its content digest. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage_name: String,
    pub stage_index: usize,
    pub backend_id: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
}

impl StageManifest {
    pub fn output_digest(&self, name: &str) -> Option<&str> {
        self.outputs
            .iter()
            .find(|f| f.path.rsplit('/').next() == Some(name))
            .map(|f| f.digest.as_str())
    }
}

/// Provenance supplied by the caller when finalizing a stage.
#[derive(Debug, Clone, Default)]
pub struct StageMeta {
    pub backend_id: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub started: Option<String>,
}

impl StageMeta {
    pub fn new(backend_id: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            ..Self::default()
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.params.insert(
            key.to_string(),
            serde_json::to_value(value).expect("param serializes"),
        );
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn inputs(mut self, inputs: Vec<FileDigest>) -> Self {
        self.inputs = inputs;
        self
    }

    pub fn started(mut self, at: String) -> Self {
        self.started = Some(at);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created: String,
    pub config_digest: String,
    pub kind: String,
    pub plan: Vec<StageDescriptor>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunHandle {
    pub run_id: String,
    /// The run directory itself, `<root>/<run_id>`.
    pub root: PathBuf,
    pub config_digest: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::NotFound(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("{}: {e}", path.display())))
}

fn new_run_id() -> String {
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    format!("{stamp}-{:08x}", rand::random::<u32>())
}

/// Create a run directory for the pipeline plan of `config`.
pub fn init_run(root: &Path, config: &PipelineConfig) -> Result<RunHandle> {
    init_run_with_plan(root, config, &crate::config::resolve_stage_plan(config), "pipeline")
}

pub fn init_run_with_plan(
    root: &Path,
    config: &PipelineConfig,
    plan: &StagePlan,
    kind: &str,
) -> Result<RunHandle> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut attempts = 0;
    let (run_id, dir) = loop {
        let id = new_run_id();
        let dir = root.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => break (id, dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists && attempts < 16 => attempts += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    for stage in &plan.stages {
        let p = dir.join(stage.dir_name());
        fs::create_dir(&p).map_err(|e| Error::io(&p, e))?;
    }
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_json()).map_err(|e| Error::io(&config_path, e))?;
    let meta = RunMeta {
        run_id: run_id.clone(),
        created: now_rfc3339(),
        config_digest: config.digest(),
        kind: kind.to_string(),
        plan: plan.stages.clone(),
        status: RunStatus::Running,
    };
    write_json(&dir.join(RUN_FILE), &meta)?;
    Ok(RunHandle {
        run_id,
        root: dir,
        config_digest: meta.config_digest,
    })
}

impl RunHandle {
    /// Reopen an existing run directory.
    pub fn open(dir: &Path) -> Result<RunHandle> {
        let meta: RunMeta = read_json(&dir.join(RUN_FILE))?;
        Ok(RunHandle {
            run_id: meta.run_id,
            root: dir.to_path_buf(),
            config_digest: meta.config_digest,
        })
    }

    pub fn meta(&self) -> Result<RunMeta> {
        read_json(&self.root.join(RUN_FILE))
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        let path = self.root.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        crate::config::parse_config(&text)
    }

    pub fn set_status(&self, status: RunStatus) -> Result<()> {
        let mut meta = self.meta()?;
        meta.status = status;
        write_json(&self.root.join(RUN_FILE), &meta)
    }

    /// Stage directory names in index order.
    pub fn stage_dirs(&self) -> Result<Vec<String>> {
        let mut dirs = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && parse_stage_dir(&name).is_some() {
                dirs.push(name);
            }
        }
        dirs.sort();
        Ok(dirs)
    }

    /// Resolve a stage reference: either a full directory name (`02_restore`)
    /// or a bare stage name (`restore`). A bare name matching several
    /// directories resolves to the highest index.
    pub fn stage_dir(&self, stage: &str) -> Result<String> {
        let dirs = self.stage_dirs()?;
        if dirs.iter().any(|d| d == stage) {
            return Ok(stage.to_string());
        }
        dirs.into_iter()
            .rev()
            .find(|d| parse_stage_dir(d).map(|(_, n)| n) == Some(stage))
            .ok_or_else(|| Error::NotFound(format!("stage `{stage}` in run {}", self.run_id)))
    }

    /// Create a new stage directory after every existing one.
    pub fn append_stage(&self, kind: StageKind) -> Result<StageDescriptor> {
        let next = self
            .stage_dirs()?
            .iter()
            .filter_map(|d| parse_stage_dir(d).map(|(i, _)| i + 1))
            .max()
            .unwrap_or(0);
        let desc = StageDescriptor { index: next, kind };
        let p = self.root.join(desc.dir_name());
        fs::create_dir(&p).map_err(|e| Error::io(&p, e))?;
        Ok(desc)
    }

    pub fn is_finalized(&self, stage: &str) -> bool {
        self.stage_dir(stage)
            .map(|d| self.root.join(d).join(MANIFEST_FILE).exists())
            .unwrap_or(false)
    }

    /// Finalized manifests in stage order.
    pub fn manifests(&self) -> Result<Vec<StageManifest>> {
        let mut out = Vec::new();
        for d in self.stage_dirs()? {
            let p = self.root.join(&d).join(MANIFEST_FILE);
            if p.exists() {
                out.push(read_json(&p)?);
            }
        }
        Ok(out)
    }

    /// Path of a file relative to the run directory.
    pub fn relative(&self, stage_dir: &str, name: &str) -> String {
        format!("{stage_dir}/{name}")
    }
}

fn parse_stage_dir(name: &str) -> Option<(usize, &str)> {
    let (idx, rest) = name.split_once('_')?;
    if idx.len() < 2 || !idx.bytes().all(|b| b.is_ascii_digit()) || rest.is_empty() {
        return None;
    }
    Some((idx.parse().ok()?, rest))
}

fn check_artifact_name(name: &str) -> Result<()> {
    if name.is_empty()
        || name == MANIFEST_FILE
        || name.contains(['/', '\\'])
        || name.starts_with('.')
    {
        return Err(invalid(format!("bad artifact name `{name}`")));
    }
    Ok(())
}

/// Write `artifacts` into a stage directory and finalize it.
pub fn write_stage_output(
    run: &RunHandle,
    stage: &str,
    artifacts: &[Artifact],
    meta: StageMeta,
) -> Result<StageManifest> {
    let dir_name = run.stage_dir(stage)?;
    let (stage_index, stage_name) = parse_stage_dir(&dir_name).expect("validated by stage_dirs");
    let dir = run.root.join(&dir_name);
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(Error::Conflict(format!("stage {dir_name} is already finalized")));
    }
    let started = meta.started.unwrap_or_else(now_rfc3339);
    let mut outputs = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        check_artifact_name(&a.name)?;
        if outputs.iter().any(|f: &FileDigest| f.path.ends_with(&format!("/{}", a.name))) {
            return Err(invalid(format!("duplicate artifact `{}`", a.name)));
        }
        let path = dir.join(&a.name);
        fs::write(&path, &a.bytes).map_err(|e| Error::io(&path, e))?;
        outputs.push(FileDigest {
            path: run.relative(&dir_name, &a.name),
            digest: digest_hex(&a.bytes),
        });
    }
    let manifest = StageManifest {
        stage_name: stage_name.to_string(),
        stage_index,
        backend_id: meta.backend_id,
        params: meta.params,
        seed: meta.seed,
        inputs: meta.inputs,
        outputs,
        started,
        finished: now_rfc3339(),
    };
    // create_new guards against a concurrent finalize of the same stage.
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    match fs::OpenOptions::new().write(true).create_new(true).open(&manifest_path) {
        Ok(mut f) => {
            use std::io::Write;
            f.write_all(text.as_bytes())
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
        Err(e) if e.kind() == ErrorKind::AlreadyExists => {
            return Err(Error::Conflict(format!("stage {dir_name} is already finalized")))
        }
        Err(e) => return Err(Error::io(&manifest_path, e)),
    }
    Ok(manifest)
}

/// Load a finalized stage, verifying every output digest.
pub fn load_stage_output(run: &RunHandle, stage: &str) -> Result<(Vec<Artifact>, StageManifest)> {
    let dir_name = run.stage_dir(stage)?;
    let manifest: StageManifest = read_json(&run.root.join(&dir_name).join(MANIFEST_FILE))?;
    let mut artifacts = Vec::with_capacity(manifest.outputs.len());
    for f in &manifest.outputs {
        let bytes = read_verified(run, f)?;
        let name = f.path.rsplit('/').next().unwrap_or(&f.path).to_string();
        artifacts.push(Artifact { name, bytes });
    }
    Ok((artifacts, manifest))
}

fn read_verified(run: &RunHandle, f: &FileDigest) -> Result<Vec<u8>> {
    let path = run.root.join(&f.path);
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::Integrity(f.path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    if digest_hex(&bytes) != f.digest {
        return Err(Error::Integrity(f.path.clone()));
    }
    Ok(bytes)
}

/// Verify every finalized stage's files and the input/output chain: each
/// stage's inputs must appear among the previous stage's outputs.
pub fn verify_chain(run: &RunHandle) -> Result<Vec<StageManifest>> {
    let manifests = run.manifests()?;
    for m in &manifests {
        for f in m.inputs.iter().chain(&m.outputs) {
            read_verified(run, f)?;
        }
    }
    for pair in manifests.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        for input in &cur.inputs {
            if !prev.outputs.iter().any(|o| o.digest == input.digest) {
                return Err(Error::Integrity(format!(
                    "{} input {} is not an output of stage {}",
                    cur.stage_name, input.path, prev.stage_name
                )));
            }
        }
    }
    Ok(manifests)
}

/// Look up one artifact by name in a loaded stage.
pub fn artifact<'a>(artifacts: &'a [Artifact], name: &str) -> Result<&'a [u8]> {
    artifacts
        .iter()
        .find(|a| a.name == name)
        .map(|a| a.bytes.as_slice())
        .ok_or_else(|| Error::NotFound(format!("artifact `{name}`")))
}

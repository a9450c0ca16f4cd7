use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use restorelab_core::compose::parse_edit_script;
use restorelab_core::config::{load_config, PipelineConfig};
use restorelab_core::runner::{self, list_images, parse_methods, EvalOutcome, RunResult};
use restorelab_core::store::{verify_chain, RunHandle, RunStatus, StageManifest, MANIFEST_FILE};
use restorelab_core::{Error, Result};

fn config_with_root(config: &Path, out: &Path) -> Result<PipelineConfig> {
    let mut config = load_config(config)?;
    config.run_root = out.to_path_buf();
    Ok(config)
}

/// Pair every input image with its damage mask. A directory input pairs
/// each image with the same-named file of a damage directory, when present.
pub fn resolve_inputs(input: &Path, damage: Option<&Path>) -> Result<Vec<(PathBuf, Option<PathBuf>)>> {
    if !input.is_dir() {
        if damage.is_some_and(Path::is_dir) {
            return Err(Error::InvalidArgument("--damage is a directory but --input is a file".into()));
        }
        return Ok(vec![(input.to_path_buf(), damage.map(Path::to_path_buf))]);
    }
    if damage.is_some_and(|d| !d.is_dir()) {
        return Err(Error::InvalidArgument("--input is a directory, so --damage must be one too".into()));
    }
    let images = list_images(input)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", input.display())));
    }
    Ok(images
        .into_iter()
        .map(|img| {
            let mask = damage
                .map(|d| d.join(img.file_name().expect("listed files have names")))
                .filter(|m| m.is_file());
            if damage.is_some() && mask.is_none() {
                log::warn!("{}: no damage mask, restoring whole objects", img.display());
            }
            (img, mask)
        })
        .collect())
}

/// `restorelab run`: one pipeline run per input image.
pub fn run(config: &Path, input: &Path, damage: Option<&Path>, out: &Path) -> Result<Vec<RunResult>> {
    let config = config_with_root(config, out)?;
    resolve_inputs(input, damage)?
        .into_iter()
        .map(|(img, mask)| runner::run_pipeline(&config, &img, mask.as_deref()))
        .collect()
}

/// `restorelab direct`
pub fn direct(config: &Path, input: &Path, damage: &Path, out: &Path) -> Result<RunResult> {
    let config = config_with_root(config, out)?;
    runner::run_direct(&config, input, Some(damage))
}

/// `restorelab edit`: apply an edit script and save a new edits stage.
pub fn edit(run: &Path, script: &Path) -> Result<StageManifest> {
    let text = std::fs::read_to_string(script).map_err(|e| Error::io(script, e))?;
    let edits = parse_edit_script(&text)?;
    Ok(runner::edit_run(run, &edits)?.0)
}

/// `restorelab eval`
pub fn eval(config: &Path, dataset: &Path, methods: &str, out: &Path) -> Result<EvalOutcome> {
    let config = load_config(config)?;
    let methods = parse_methods(methods)?;
    runner::run_eval(&config, dataset, &methods, out)
}

/// `restorelab stages`: the manifest chain as a table.
pub fn stages(run_dir: &Path) -> Result<String> {
    let run = RunHandle::open(run_dir)?;
    let meta = run.meta()?;
    let status = match &meta.status {
        RunStatus::Running => "running".to_string(),
        RunStatus::Complete => "complete".to_string(),
        RunStatus::Failed { stage, error } => format!("failed at {stage}: {error}"),
    };
    let mut out = String::new();
    writeln!(out, "run {} ({}), status {status}", meta.run_id, meta.kind).unwrap();
    writeln!(out, "config digest {}", meta.config_digest).unwrap();
    let manifests = run.manifests()?;
    for dir in run.stage_dirs()? {
        if !run.root.join(&dir).join(MANIFEST_FILE).exists() {
            writeln!(out, "{dir:<20} (not finalized)").unwrap();
            continue;
        }
        let m = manifests
            .iter()
            .find(|m| format!("{:02}_{}", m.stage_index, m.stage_name) == dir)
            .expect("finalized stage has a manifest");
        writeln!(
            out,
            "{dir:<20} {:<40} {} in, {} out, seed {}",
            m.backend_id,
            m.inputs.len(),
            m.outputs.len(),
            m.seed
        )
        .unwrap();
        for o in &m.outputs {
            writeln!(out, "    {} {}", &o.digest[..16], o.path).unwrap();
        }
    }
    match verify_chain(&run) {
        Ok(_) => writeln!(out, "chain: ok").unwrap(),
        Err(e) => writeln!(out, "chain: BROKEN ({e})").unwrap(),
    }
    Ok(out)
}

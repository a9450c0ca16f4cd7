//! Pipeline configuration: the `.rlab.json` document a user edits to pick
//! isolation path, backends, and restoration parameters, and the stage plan
//! it resolves to.
//!
//! Parsing is strict. Unknown keys are rejected so that a typo can never
//! silently change what a run does.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::error::{Error, Result};
use crate::geometry::MorphKind;
use crate::store::digest_hex;

pub const CONFIG_EXTENSION: &str = ".rlab.json";
pub const CONFIG_ENV_VAR: &str = "RESTORELAB_CONFIG";

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.25;
pub const DEFAULT_INSTANCE_PAD: u32 = 8;
pub const DEFAULT_MORPH_KIND: MorphKind = MorphKind::Dilate;
pub const DEFAULT_MORPH_RADIUS: u32 = 3;
pub const DEFAULT_DEPTH_SCALE_FACTOR: f64 = 1.0;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {class}";
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IsolationPath {
    /// Object detection followed by per-crop background removal.
    #[serde(rename = "PATH1")]
    Path1,
    /// Single-step instance segmentation.
    #[serde(rename = "PATH2")]
    Path2,
}

/// Where a backend lives: a fixture directory or a sidecar base URL.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendLocator {
    Fixture(PathBuf),
    Http(String),
}

impl BackendLocator {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendLocator::Fixture(_) => "fixture",
            BackendLocator::Http(_) => "http",
        }
    }

    pub fn locator(&self) -> String {
        match self {
            BackendLocator::Fixture(p) => p.display().to_string(),
            BackendLocator::Http(u) => u.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<BackendLocator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<BackendLocator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_remover: Option<BackendLocator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpainter: Option<BackendLocator>,
    /// Per-call timeout for HTTP backends.
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintConfig {
    #[serde(default = "default_prompt_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Extra dilation applied to each object's restoration region.
    #[serde(default)]
    pub region_dilation: u32,
    /// Objects restored concurrently. 1 keeps restoration sequential.
    #[serde(default = "one")]
    pub parallelism: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            prompt_template: default_prompt_template(),
            seed: DEFAULT_SEED,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            region_dilation: 0,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Blackout,
    GaussianBlur,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Reference detector that produces the confidence scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<BackendLocator>,
    #[serde(default = "default_distortion")]
    pub distortion: DistortionKind,
    #[serde(default)]
    pub distortion_strength: f64,
    #[serde(default)]
    pub distortion_seed: u64,
    /// When set, only detections overlapping the ground-truth box by at
    /// least this IoU count toward a score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[serde(default = "one")]
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scorer: None,
            distortion: DistortionKind::Blackout,
            distortion_strength: 0.0,
            distortion_seed: 0,
            iou_threshold: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub isolation_path: IsolationPath,
    pub backends: BackendsConfig,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
    #[serde(default = "default_instance_pad")]
    pub instance_pad: u32,
    #[serde(default = "default_morph_kind")]
    pub morph_kind: MorphKind,
    #[serde(default = "default_morph_radius")]
    pub morph_radius: u32,
    #[serde(default)]
    pub inpaint: InpaintConfig,
    #[serde(default = "default_depth_scale_factor")]
    pub depth_scale_factor: f64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_prompt_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}
fn default_steps() -> u32 {
    DEFAULT_STEPS
}
fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}
fn one() -> usize {
    1
}
fn default_distortion() -> DistortionKind {
    DistortionKind::Blackout
}
fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}
fn default_instance_pad() -> u32 {
    DEFAULT_INSTANCE_PAD
}
fn default_morph_kind() -> MorphKind {
    DEFAULT_MORPH_KIND
}
fn default_morph_radius() -> u32 {
    DEFAULT_MORPH_RADIUS
}
fn default_depth_scale_factor() -> f64 {
    DEFAULT_DEPTH_SCALE_FACTOR
}
fn default_run_root() -> PathBuf {
    PathBuf::from(DEFAULT_RUN_ROOT)
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = serde_json::from_str(text).map_err(|e| match e.classify() {
        Category::Data => Error::Validation(e.to_string()),
        _ => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    })?;
    config.validate()?;
    Ok(config)
}

/// Read a config file. Relative fixture directories and `run_root` are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = parse_config(&text)?;
    if let Some(base) = path.parent() {
        config.resolve_relative_to(base);
    }
    Ok(config)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        let b = &self.backends;
        match self.isolation_path {
            IsolationPath::Path1 => {
                if b.detector.is_none() {
                    return fail("PATH1 requires detector".into());
                }
                if b.background_remover.is_none() {
                    return fail("PATH1 requires background_remover".into());
                }
            }
            IsolationPath::Path2 => {
                if b.segmenter.is_none() {
                    return fail("PATH2 requires segmenter".into());
                }
            }
        }
        if b.inpainter.is_none() {
            return fail(format!("{} requires inpainter", self.isolation_path));
        }
        for (role, loc) in [
            ("detector", &b.detector),
            ("segmenter", &b.segmenter),
            ("background_remover", &b.background_remover),
            ("inpainter", &b.inpainter),
            ("eval.scorer", &self.eval.scorer),
        ] {
            if let Some(l) = loc {
                if l.locator().trim().is_empty() {
                    return fail(format!("{role} locator must not be empty"));
                }
            }
        }
        if b.timeout_secs == 0 {
            return fail("backends.timeout_secs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return fail(format!("min_confidence must be in [0,1], got {}", self.min_confidence));
        }
        if !(self.depth_scale_factor.is_finite() && self.depth_scale_factor > 0.0) {
            return fail(format!(
                "depth_scale_factor must be > 0, got {}",
                self.depth_scale_factor
            ));
        }
        if self.morph_radius == 0 {
            return fail("morph_radius must be >= 1".into());
        }
        if self.inpaint.steps == 0 {
            return fail("inpaint.steps must be >= 1".into());
        }
        if !(self.inpaint.guidance.is_finite() && self.inpaint.guidance >= 0.0) {
            return fail(format!("inpaint.guidance must be >= 0, got {}", self.inpaint.guidance));
        }
        if self.inpaint.parallelism == 0 {
            return fail("inpaint.parallelism must be >= 1".into());
        }
        if self.eval.workers == 0 {
            return fail("eval.workers must be >= 1".into());
        }
        if !(self.eval.distortion_strength.is_finite() && self.eval.distortion_strength >= 0.0) {
            return fail("eval.distortion_strength must be >= 0".into());
        }
        if let Some(t) = self.eval.iou_threshold {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("eval.iou_threshold must be in [0,1], got {t}"));
            }
        }
        Ok(())
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |loc: &mut Option<BackendLocator>| {
            if let Some(BackendLocator::Fixture(p)) = loc {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.backends.detector);
        fix(&mut self.backends.segmenter);
        fix(&mut self.backends.background_remover);
        fix(&mut self.backends.inpainter);
        fix(&mut self.eval.scorer);
        if self.run_root.is_relative() {
            self.run_root = base.join(&self.run_root);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// SHA-256 over the canonical serialization.
    pub fn digest(&self) -> String {
        digest_hex(self.to_json().as_bytes())
    }
}

impl fmt::Display for IsolationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IsolationPath::Path1 => "PATH1",
            IsolationPath::Path2 => "PATH2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Input,
    Detect,
    RemoveBackground,
    Segment,
    MaskRefine,
    Restore,
    Compose,
    Direct,
    Edits,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Input => "input",
            StageKind::Detect => "detect",
            StageKind::RemoveBackground => "remove-background",
            StageKind::Segment => "segment",
            StageKind::MaskRefine => "mask-refine",
            StageKind::Restore => "restore",
            StageKind::Compose => "compose",
            StageKind::Direct => "direct",
            StageKind::Edits => "edits",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub index: usize,
    pub kind: StageKind,
}

impl StageDescriptor {
    /// Directory name inside a run, e.g. `01_segment`.
    pub fn dir_name(&self) -> String {
        format!("{:02}_{}", self.index, self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageDescriptor>,
}

impl StagePlan {
    fn from_kinds(kinds: &[StageKind]) -> Self {
        Self {
            stages: kinds
                .iter()
                .enumerate()
                .map(|(index, &kind)| StageDescriptor { index, kind })
                .collect(),
        }
    }

    /// The two-stage plan of the direct whole-image baseline.
    pub fn direct() -> Self {
        Self::from_kinds(&[StageKind::Input, StageKind::Direct])
    }

    pub fn get(&self, kind: StageKind) -> Option<StageDescriptor> {
        self.stages.iter().copied().find(|s| s.kind == kind)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.kind.name()).collect()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

pub fn resolve_stage_plan(config: &PipelineConfig) -> StagePlan {
    use StageKind::*;
    match config.isolation_path {
        IsolationPath::Path1 => StagePlan::from_kinds(&[
            Input,
            Detect,
            RemoveBackground,
            MaskRefine,
            Restore,
            Compose,
        ]),
        IsolationPath::Path2 => StagePlan::from_kinds(&[Input, Segment, MaskRefine, Restore, Compose]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_PATH2: &str = r#"{
        "isolation_path": "PATH2",
        "backends": {
            "segmenter": {"fixture": "fixtures"},
            "inpainter": {"fixture": "fixtures"}
        }
    }"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let c = parse_config(MINIMAL_PATH2).unwrap();
        assert_eq!(c.isolation_path, IsolationPath::Path2);
        assert_eq!(c.min_confidence, 0.25);
        assert_eq!(c.instance_pad, 8);
        assert_eq!(c.morph_kind, MorphKind::Dilate);
        assert_eq!(c.morph_radius, 3);
        assert_eq!(c.depth_scale_factor, 1.0);
        assert_eq!(c.inpaint.seed, 0);
        assert_eq!(c.inpaint.prompt_template, "a photo of a {class}");
        assert_eq!(c.backends.timeout_secs, 120);
        assert_eq!(
            c.backends.segmenter,
            Some(BackendLocator::Fixture(PathBuf::from("fixtures")))
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let doc = MINIMAL_PATH2.replacen('{', r#"{"mim_confidence": 0.3,"#, 1);
        match parse_config(&doc) {
            Err(Error::Validation(msg)) => assert!(msg.contains("mim_confidence"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn nested_unknown_key_is_named() {
        let doc = r#"{"isolation_path": "PATH2",
            "backends": {"segmenter": {"fixture": "f"}, "inpainter": {"fixture": "f"}},
            "inpaint": {"sead": 3}}"#;
        match parse_config(doc) {
            Err(Error::Validation(msg)) => assert!(msg.contains("sead"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn path1_without_background_remover() {
        let doc = r#"{"isolation_path": "PATH1",
            "backends": {"detector": {"fixture": "f"}, "inpainter": {"fixture": "f"}}}"#;
        match parse_config(doc) {
            Err(Error::Validation(msg)) => assert_eq!(msg, "PATH1 requires background_remover"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_inpainter_rejected() {
        let doc = r#"{"isolation_path": "PATH2", "backends": {"segmenter": {"fixture": "f"}}}"#;
        assert!(matches!(parse_config(doc), Err(Error::Validation(_))));
    }

    #[test]
    fn syntax_error_reports_position() {
        let doc = "{\n  \"isolation_path\": \"PATH2\",\n  oops\n}";
        match parse_config(doc) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column >= 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn range_checks() {
        for (key, val) in [
            ("min_confidence", "1.5"),
            ("depth_scale_factor", "0"),
            ("morph_radius", "0"),
        ] {
            let doc = MINIMAL_PATH2.replacen('{', &format!(r#"{{"{key}": {val},"#), 1);
            assert!(matches!(parse_config(&doc), Err(Error::Validation(_))), "{key}");
        }
        let doc = MINIMAL_PATH2.replacen('{', r#"{"inpaint": {"steps": 0},"#, 1);
        assert!(matches!(parse_config(&doc), Err(Error::Validation(_))));
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let c = parse_config(MINIMAL_PATH2).unwrap();
        let again = parse_config(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_json(), again.to_json());
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn whitespace_does_not_matter() {
        let squeezed: String = MINIMAL_PATH2.split_whitespace().collect();
        assert_eq!(parse_config(&squeezed).unwrap(), parse_config(MINIMAL_PATH2).unwrap());
    }

    #[test]
    fn stage_plans() {
        let c2 = parse_config(MINIMAL_PATH2).unwrap();
        let plan = resolve_stage_plan(&c2);
        assert_eq!(plan.names(), ["input", "segment", "mask-refine", "restore", "compose"]);
        assert_eq!(plan, resolve_stage_plan(&c2));
        assert!(plan.stages.iter().enumerate().all(|(i, s)| s.index == i));

        let c1 = parse_config(
            r#"{"isolation_path": "PATH1", "backends": {"detector": {"http": "http://x"},
                "background_remover": {"http": "http://x"}, "inpainter": {"http": "http://x"}}}"#,
        )
        .unwrap();
        assert_eq!(
            resolve_stage_plan(&c1).names(),
            ["input", "detect", "remove-background", "mask-refine", "restore", "compose"]
        );
        assert_eq!(plan.stages[4].dir_name(), "04_compose");
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut c = parse_config(MINIMAL_PATH2).unwrap();
        c.resolve_relative_to(Path::new("/data/proj"));
        assert_eq!(
            c.backends.segmenter,
            Some(BackendLocator::Fixture(PathBuf::from("/data/proj/fixtures")))
        );
        assert_eq!(c.run_root, PathBuf::from("/data/proj/runs"));
    }
}

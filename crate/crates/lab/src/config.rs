//! Experiment configuration: one TOML file with a schema version, a global
//! seed, and one section per stage. Unknown keys are rejected and every
//! section is checked against its module's invariants after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vsrdistill_core::data::DatasetConfig;
use vsrdistill_core::denoiser::{AffineCodec, Codec, DenoiserConfig, IdentityCodec};
use vsrdistill_core::dpo::Stage3Config;
use vsrdistill_core::dual::Stage2Config;
use vsrdistill_core::oracle::OracleConfig;
use vsrdistill_core::pgd::{PDSchedule, Stage0Config};
use vsrdistill_core::Shape;

use crate::error::{io_err, LabError, LabResult};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the output root of every command when set.
pub const OUT_ENV: &str = "VSRDISTILL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Items in the training split; validation and test items come on top.
    pub train_items: usize,
    pub dataset: DatasetConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_items: 512, dataset: DatasetConfig::default() }
    }
}

impl DataSection {
    pub fn total_items(&self) -> usize {
        self.train_items + self.dataset.val + self.dataset.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub kind: CodecKind,
    pub scale: f64,
    pub offset: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let a = AffineCodec::default();
        Self { kind: CodecKind::Affine, scale: a.scale, offset: a.offset }
    }
}

impl CodecSection {
    pub fn build(&self) -> Box<dyn Codec> {
        match self.kind {
            CodecKind::Identity => Box::new(IdentityCodec),
            CodecKind::Affine => Box::new(AffineCodec { scale: self.scale, offset: self.offset }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Euler steps for the multi-step teacher baseline.
    pub teacher_steps: usize,
    pub teacher_guidance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { teacher_steps: 16, teacher_guidance: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Iterations between checkpoints inside a stage; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { checkpoint_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Stage-2 iterations for stream and optimization-order variants.
    pub stage2_iterations: u64,
    pub stability_seeds: Vec<u64>,
    pub stability_iterations: u64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { stage2_iterations: 120, stability_seeds: vec![0, 1, 2], stability_iterations: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub model: DenoiserConfig,
    #[serde(default)]
    pub stage0: Stage0Config,
    #[serde(default)]
    pub stage1: PDSchedule,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            run: RunSection::default(),
            data: DataSection::default(),
            codec: CodecSection::default(),
            model: DenoiserConfig::default(),
            stage0: Stage0Config::default(),
            stage1: PDSchedule::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A few-second configuration for smoke tests: 2x8x8 grayscale clips, a
    /// depth-2 model, and a handful of iterations per stage.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.train_items = 12;
        c.data.dataset.shape = Shape::new(2, 8, 8, 1);
        c.data.dataset.val = 4;
        c.data.dataset.test = 4;
        c.data.dataset.scene.size = (3, 5);
        c.data.dataset.scene.max_speed = 1;
        c.model = DenoiserConfig { num_classes: 4, ..DenoiserConfig::tiny() };
        c.stage0.iterations = 6;
        c.stage0.batch = 2;
        c.stage1.start_steps = 4;
        c.stage1.cfg_iterations = 3;
        c.stage1.iterations_per_phase = 3;
        c.stage1.teacher_refresh_interval = 2;
        c.stage1.batch = 2;
        c.stage2.iterations = 8;
        c.stage2.head_hidden = 4;
        c.stage3.pairs_total = 6;
        c.stage3.candidates = 3;
        c.stage3.iterations = 4;
        c.eval.teacher_steps = 4;
        c.run.checkpoint_every = 3;
        c.ablation = AblationSection { stage2_iterations: 4, stability_seeds: vec![0, 1], stability_iterations: 4 };
        c.oracle.samples = 4096;
        c.oracle.flow_steps = 50;
        c
    }

    pub fn validate(&self) -> vsrdistill_core::Result<()> {
        use vsrdistill_core::Error;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.data.train_items == 0 {
            return bad("data.train_items must be positive".into());
        }
        self.data.dataset.validate()?;
        self.model.validate()?;
        let shape = self.data.dataset.shape;
        if self.model.channels != shape.channels {
            return bad(format!("model.channels {} differs from data channels {}", self.model.channels, shape.channels));
        }
        self.model.token_grid(shape)?;
        if self.model.num_classes < 4 {
            return bad(format!("model.num_classes {} cannot hold the 4 degradation classes", self.model.num_classes));
        }
        if self.codec.kind == CodecKind::Affine && !(self.codec.scale != 0.0 && self.codec.scale.is_finite() && self.codec.offset.is_finite()) {
            return bad(format!("codec scale {} must be finite and non-zero", self.codec.scale));
        }
        if self.eval.teacher_steps == 0 || !(self.eval.teacher_guidance >= 0.0) {
            return bad("eval.teacher_steps must be positive and eval.teacher_guidance >= 0".into());
        }
        if self.ablation.stability_seeds.is_empty() {
            return bad("ablation.stability_seeds must not be empty".into());
        }
        self.stage0.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        self.oracle.validate()
    }

    /// SHA-256 of the canonical TOML serialization, minus the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates `text`; `path` is only used in error messages.
pub fn parse_config(text: &str, path: &Path) -> LabResult<ExperimentConfig> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| LabError::Parse { path: path.into(), detail: e.message().into() })?;
    match raw.get("schema_version") {
        Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
        Some(toml::Value::Integer(v)) => return Err(LabError::Version { path: path.into(), found: *v, expected: SCHEMA_VERSION }),
        Some(_) => return Err(LabError::Parse { path: path.into(), detail: "schema_version must be an integer".into() }),
        None => return Err(LabError::Version { path: path.into(), found: -1, expected: SCHEMA_VERSION }),
    }
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let detail = e.message().to_string();
        if detail.starts_with("unknown field") || detail.starts_with("unknown variant") {
            LabError::UnknownKey { path: path.into(), detail }
        } else {
            LabError::Parse { path: path.into(), detail }
        }
    })?;
    cfg.validate().map_err(|e| LabError::Invariant { path: path.into(), detail: e.to_string() })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> LabResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, path)
}

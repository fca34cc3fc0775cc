//! Run configuration: a versioned TOML document, validated in full before any
//! computation and digested for provenance stamps.

use std::path::{Path, PathBuf};

use dog_core::denoiser::TrainingConfig;
use dog_core::{
    AnalyticDenoiser, ConditionEmbedder, ConditionPair, ConditionalGmm, Denoiser,
    DiffusionSchedule, EvalConfig, GuidanceConfig, PerturbConfig, PerturbTarget, ResampleMode,
    Strategy, Tau, ToyGmmSpec, TrainedDenoiser,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Where outputs go; the `DOG_OUTPUT_DIR` variable and `--out` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub target: ToyGmmSpec,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    /// Required by `train` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub perturb: PerturbSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub content_dim: usize,
    pub style_dim: usize,
    pub seed: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            content_dim: 8,
            style_dim: 8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Analytic,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub kind: DenoiserKind,
    /// Kernel width of the analytic condition-to-slice map.
    pub bandwidth: f64,
    /// Checkpoint path for `kind = "trained"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Analytic,
            bandwidth: 0.05,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Training samples drawn from every (content, style) slice.
    pub per_slice: usize,
    pub seed: u64,
    /// Probe points for the trained-versus-analytic comparison.
    pub probes: usize,
    /// Largest acceptable mean squared ε disagreement with the analytic model.
    pub disagreement_threshold: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            per_slice: 128,
            seed: 0,
            probes: 1000,
            disagreement_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub strategy: Strategy,
    pub gs: f64,
    /// Peak timestep u_T of the triangular schedule.
    pub peak: usize,
    /// Norm-clip threshold: a number or "auto".
    pub tau: Tau,
    pub apg_parallel_weight: f64,
    pub schedule_on: bool,
    pub projection_on: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dog,
            gs: 2.0,
            peak: 700,
            tau: Tau::Fixed(5.0),
            apg_parallel_weight: 0.1,
            schedule_on: true,
            projection_on: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub lambda_style: f64,
    pub lambda_content: f64,
    pub keep_prob: f64,
    pub target: PerturbTarget,
    pub resample: ResampleMode,
    pub additive: bool,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let d = PerturbConfig::default();
        Self {
            lambda_style: d.lambda_style,
            lambda_content: d.lambda_content,
            keep_prob: d.keep_prob,
            target: d.target,
            resample: d.resample,
            additive: d.additive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    /// Seeds per condition.
    pub seeds: usize,
    pub first_seed: u64,
    /// DDIM timestep stride; 1 visits every step.
    pub stride: usize,
    /// The fixed (content, style) pair used by `sample` and `ablate`.
    pub condition: [usize; 2],
    /// Pairs evaluated by `compare`; every slice when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<[usize; 2]>>,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            seeds: 16,
            first_seed: 0,
            stride: 1,
            condition: [0, 0],
            conditions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<Strategy>,
    pub gs_list: Vec<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::None, Strategy::Cfg, Strategy::Apg, Strategy::Dog],
            gs_list: vec![2.0, 10.0, 20.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub gs: f64,
    pub seeds: usize,
    pub peaks: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            gs: 30.0,
            seeds: 64,
            peaks: vec![200, 500, 700],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: None,
            schedule: ScheduleSection::default(),
            target: ToyGmmSpec::default(),
            embedding: EmbeddingSection::default(),
            denoiser: DenoiserSection::default(),
            dataset: None,
            training: TrainingConfig::default(),
            guidance: GuidanceSection::default(),
            perturb: PerturbSection::default(),
            sampling: SamplingSection::default(),
            eval: EvalConfig::default(),
            compare: CompareSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| config_error("config", e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    /// SHA-256 over the canonical JSON form (sorted keys), excluding the
    /// output location.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let value = serde_json::to_value(&canonical).expect("run configuration serializes to JSON");
        let bytes = serde_json::to_vec(&value).expect("JSON value serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks every section; the first failure names its field.
    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        self.diffusion_schedule()?;
        self.target.validate()?;
        self.embedder().validate()?;
        if !(self.denoiser.bandwidth > 0.0 && self.denoiser.bandwidth.is_finite()) {
            return Err(config_error("denoiser.bandwidth", "must be positive"));
        }
        if self.denoiser.kind == DenoiserKind::Trained && self.denoiser.checkpoint.is_none() {
            return Err(config_error(
                "denoiser.checkpoint",
                "required when kind = \"trained\"",
            ));
        }
        if let Some(d) = &self.dataset {
            if d.per_slice == 0 {
                return Err(config_error("dataset.per_slice", "must be at least 1"));
            }
            if d.probes == 0 {
                return Err(config_error("dataset.probes", "must be at least 1"));
            }
            if !(d.disagreement_threshold > 0.0) {
                return Err(config_error(
                    "dataset.disagreement_threshold",
                    "must be positive",
                ));
            }
        }
        self.training.validate()?;
        self.guidance_config()?;
        if self.sampling.seeds < 2 {
            return Err(config_error("sampling.seeds", "must be at least 2"));
        }
        if self.sampling.stride == 0 || self.sampling.stride > self.schedule.num_steps {
            return Err(config_error(
                "sampling.stride",
                "must lie in [1, num_steps]",
            ));
        }
        self.condition(self.sampling.condition)?;
        self.conditions()?;
        self.eval.validate()?;
        if self.compare.strategies.is_empty() {
            return Err(config_error("compare.strategies", "must not be empty"));
        }
        if self.compare.gs_list.is_empty()
            || self
                .compare
                .gs_list
                .iter()
                .any(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return Err(config_error(
                "compare.gs_list",
                "must be a nonempty list of nonnegative scales",
            ));
        }
        if !(self.ablate.gs >= 0.0 && self.ablate.gs.is_finite()) {
            return Err(config_error("ablate.gs", "must be nonnegative"));
        }
        if self.ablate.seeds < 2 {
            return Err(config_error("ablate.seeds", "must be at least 2"));
        }
        if self.ablate.peaks.is_empty() {
            return Err(config_error("ablate.peaks", "must not be empty"));
        }
        for &peak in &self.ablate.peaks {
            if peak == 0 || peak >= self.schedule.num_steps {
                return Err(config_error(
                    "ablate.peaks",
                    format!("peak {peak} outside (0, num_steps)"),
                ));
            }
        }
        Ok(())
    }

    pub fn diffusion_schedule(&self) -> CliResult<DiffusionSchedule> {
        let s = &self.schedule;
        Ok(DiffusionSchedule::linear(
            s.num_steps,
            s.beta_start,
            s.beta_end,
        )?)
    }

    pub fn gmm(&self) -> CliResult<ConditionalGmm> {
        Ok(self.target.build()?)
    }

    pub fn embedder(&self) -> ConditionEmbedder {
        ConditionEmbedder {
            content_vocab: self.target.content_vocab,
            style_vocab: self.target.style_vocab,
            content_dim: self.embedding.content_dim,
            style_dim: self.embedding.style_dim,
            seed: self.embedding.seed,
        }
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        let p = &self.perturb;
        PerturbConfig {
            lambda_style: p.lambda_style,
            lambda_content: p.lambda_content,
            keep_prob: p.keep_prob,
            target: p.target,
            resample: p.resample,
            additive: p.additive,
        }
    }

    pub fn guidance_config(&self) -> CliResult<GuidanceConfig> {
        let g = &self.guidance;
        let mut cfg =
            GuidanceConfig::new(g.strategy, g.gs, self.schedule.num_steps)?.with_peak(g.peak)?;
        cfg.tau = g.tau;
        cfg.apg_parallel_weight = g.apg_parallel_weight;
        cfg.schedule_on = g.schedule_on;
        cfg.projection_on = g.projection_on;
        cfg.perturb = self.perturb_config();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn condition(&self, pair: [usize; 2]) -> CliResult<ConditionPair> {
        let [c, s] = pair;
        if c >= self.target.content_vocab || s >= self.target.style_vocab {
            return Err(config_error(
                "sampling.condition",
                format!("({c}, {s}) is outside the vocabulary"),
            ));
        }
        Ok(self.embedder().embed(c, s)?)
    }

    /// The evaluation condition set: the configured list, or every slice.
    pub fn conditions(&self) -> CliResult<Vec<ConditionPair>> {
        let pairs: Vec<[usize; 2]> = match &self.sampling.conditions {
            Some(list) if list.is_empty() => {
                return Err(config_error(
                    "sampling.conditions",
                    "must not be empty when given",
                ));
            }
            Some(list) => list.clone(),
            None => (0..self.target.content_vocab)
                .flat_map(|c| (0..self.target.style_vocab).map(move |s| [c, s]))
                .collect(),
        };
        pairs.into_iter().map(|p| self.condition(p)).collect()
    }

    pub fn seeds(&self, count: usize) -> Vec<u64> {
        (0..count as u64)
            .map(|i| self.sampling.first_seed + i)
            .collect()
    }

    /// Builds the configured denoiser, loading a checkpoint when trained.
    pub fn build_denoiser(&self) -> CliResult<Box<dyn Denoiser<f64>>> {
        match self.denoiser.kind {
            DenoiserKind::Analytic => Ok(Box::new(AnalyticDenoiser::new(
                self.gmm()?,
                &self.embedder(),
                self.diffusion_schedule()?,
                self.denoiser.bandwidth,
            )?)),
            DenoiserKind::Trained => {
                let path = self.denoiser.checkpoint.as_ref().ok_or_else(|| {
                    config_error("denoiser.checkpoint", "required when kind = \"trained\"")
                })?;
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
                let model = TrainedDenoiser::from_checkpoint(&text)?;
                if model.sample_dim() != self.gmm()?.dim() {
                    return Err(config_error(
                        "denoiser.checkpoint",
                        "sample dimension differs from the target",
                    ));
                }
                Ok(Box::new(model))
            }
        }
    }
}

//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use psydef_core::augmentor::{AugmentationStrategy, CapBasis};
use psydef_core::evaluation::CdiComponent;
use psydef_core::features::HeuristicConfig;
use psydef_core::fusion::FusionConfig;
use psydef_core::quality::{ADHERENCE_HYPOTHESIS_TEMPLATE, DEFAULT_KAPPA_THRESHOLD, DEFAULT_MIN_BATCH};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::live::API_KEY_ENV;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{field}: {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub stressor: StressorConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub qc: QcConfig,
    #[serde(default)]
    pub features: HeuristicConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub catalog: PathBuf,
    pub supplementary: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    #[default]
    Stub,
    Live { endpoint: String, model: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubSettings {
    /// Share of generator replies that are deliberately unparseable.
    pub garbage_rate: f64,
    pub encoder_seed: u64,
    pub encoder_hash_dim: usize,
}

impl Default for StubSettings {
    fn default() -> Self {
        StubSettings {
            garbage_rate: 0.0,
            encoder_seed: 0,
            encoder_hash_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub generator: BackendSpec,
    pub nli: BackendSpec,
    pub emotion: BackendSpec,
    pub encoder: BackendSpec,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub retry_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_s: u64,
    pub stub: StubSettings,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            generator: BackendSpec::Stub,
            nli: BackendSpec::Stub,
            emotion: BackendSpec::Stub,
            encoder: BackendSpec::Stub,
            api_key_env: API_KEY_ENV.to_string(),
            max_in_flight: 4,
            retry_attempts: 3,
            initial_backoff_ms: 1000,
            timeout_s: 60,
            stub: StubSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_ratio: f64,
    pub dev_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ratio: 0.8,
            dev_ratio: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressorConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub parse_attempts: u32,
    pub history_cap: usize,
}

impl Default for StressorConfig {
    fn default() -> Self {
        StressorConfig {
            temperature: 0.0,
            max_tokens: 128,
            parse_attempts: 2,
            history_cap: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// `x<k>` or `cap:<n>[:total|:synthetic]`.
    pub strategy: String,
    /// Overrides the basis of a `cap` strategy when set.
    pub cap_basis: Option<CapBasis>,
    pub budget_factor: f64,
    /// Samples per class per generation round.
    pub round_size: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            strategy: "x8".to_string(),
            cap_basis: None,
            budget_factor: 1.5,
            round_size: 20,
            temperature: 0.9,
            max_tokens: 256,
        }
    }
}

impl AugmentConfig {
    pub fn strategy(&self) -> Result<AugmentationStrategy, ConfigError> {
        let s: AugmentationStrategy = self
            .strategy
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("augment.strategy: {e}")))?;
        Ok(match (s, self.cap_basis) {
            (AugmentationStrategy::Cap { n, .. }, Some(basis)) => AugmentationStrategy::Cap { n, basis },
            _ => s,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    /// Nearest centroid over encoder embeddings of real training turns.
    #[default]
    Centroid,
    /// Indicator entailment mapped to a DMRS level.
    Dmrs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    pub kappa_threshold: f64,
    pub min_batch: usize,
    pub annotator: AnnotatorKind,
    /// Stop the run (exit 3) when any batch is rejected.
    pub halt_on_reject: bool,
    pub self_bleu_max_n: usize,
    pub hypothesis_template: String,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            kappa_threshold: DEFAULT_KAPPA_THRESHOLD,
            min_batch: DEFAULT_MIN_BATCH,
            annotator: AnnotatorKind::Centroid,
            halt_on_reject: true,
            self_bleu_max_n: 4,
            hypothesis_template: ADHERENCE_HYPOTHESIS_TEMPLATE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub opening_threshold_z: f64,
    pub cdi_components: Vec<CdiComponent>,
    pub sink_label: u8,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            opening_threshold_z: 0.5,
            cdi_components: CdiComponent::ALL.to_vec(),
            sink_label: 7,
        }
    }
}

impl PipelineConfig {
    /// Minimal config over the given files with every other setting defaulted.
    pub fn with_paths(corpus: PathBuf, catalog: PathBuf, supplementary: PathBuf, output: PathBuf) -> Self {
        PipelineConfig {
            paths: Paths {
                corpus,
                catalog,
                supplementary,
                output,
            },
            seed: 0,
            backends: BackendsConfig::default(),
            split: SplitConfig::default(),
            stressor: StressorConfig::default(),
            augment: AugmentConfig::default(),
            qc: QcConfig::default(),
            features: HeuristicConfig::default(),
            fusion: FusionConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    /// Parse TOML and resolve relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.catalog,
            &mut cfg.paths.supplementary,
            &mut cfg.paths.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Check every referenced input path and every numeric bound.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, path) in [
            ("paths.corpus", &self.paths.corpus),
            ("paths.catalog", &self.paths.catalog),
            ("paths.supplementary", &self.paths.supplementary),
        ] {
            if !path.exists() {
                return Err(ConfigError::MissingPath {
                    field,
                    path: path.clone(),
                });
            }
        }
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(-1.0..=1.0).contains(&self.qc.kappa_threshold) {
            return invalid(format!("qc.kappa_threshold {} is outside [-1, 1]", self.qc.kappa_threshold));
        }
        if self.qc.min_batch == 0 || self.qc.self_bleu_max_n == 0 {
            return invalid("qc.min_batch and qc.self_bleu_max_n must be positive".into());
        }
        let s = &self.split;
        if !(s.train_ratio > 0.0 && s.dev_ratio > 0.0 && s.train_ratio + s.dev_ratio <= 1.0 + 1e-12) {
            return invalid(format!(
                "split ratios must be positive with sum <= 1 (train {}, dev {})",
                s.train_ratio, s.dev_ratio
            ));
        }
        self.augment.strategy()?;
        if !(self.augment.budget_factor >= 1.0) || self.augment.round_size == 0 {
            return invalid("augment.budget_factor must be >= 1 and augment.round_size positive".into());
        }
        if !(0.0..=1.0).contains(&self.backends.stub.garbage_rate) {
            return invalid("backends.stub.garbage_rate must lie in [0, 1]".into());
        }
        if self.backends.stub.encoder_hash_dim == 0 {
            return invalid("backends.stub.encoder_hash_dim must be positive".into());
        }
        if self.analysis.sink_label > 8 {
            return invalid("analysis.sink_label must lie in 0..=8".into());
        }
        self.fusion.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

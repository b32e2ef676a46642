//! Staged pipeline: ingest, stressor, augment, qc, features, train, eval,
//! analyze. Each stage writes into `<output>/<stage>/` together with a
//! manifest; a stage whose manifest still matches is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use psydef_core::augmentor::{
    definitions_for, generate_class_batch, plan_augmentation, AugmentError, AugmentationPlan, BatchOptions,
    DefenseDefinition, DmrsCatalog, SeedInstance, SupplementaryDefinitions, SyntheticSample,
};
use psydef_core::backends::{
    BackendError, EmotionScorer, GenerationParams, Generator, NliScorer, StubEmotion, StubEncoder, StubGenerator,
    StubNli, TextEncoder,
};
use psydef_core::corpus::{class_distribution, split_corpus, Dialogue};
use psydef_core::evaluation::{
    cdi_curve, defense_trajectory, dialogue_sizes, evaluate_labels, latency_by_label, mechanism_activations,
    opening_up_turn, sink_analysis, transition_stats, DisclosureSignals, MetricsReport, SinkAnalysis,
};
use psydef_core::features::{build_feature_row, extract_heuristics, FeatureError, FeatureRow};
use psydef_core::fusion::{train, FusionError, FusionModel, Prediction, TrainingHistory};
use psydef_core::quality::{
    gating_batches, kappa_gate, self_bleu, semantic_adherence, Annotator, BatchScores, CentroidAnnotator,
    DmrsAnnotator, GateStatus, QualityError,
};
use psydef_core::stressor::{identify_stressor, render_history, StressorError, StressorOptions, StressorRecord};
use psydef_core::text::tokenize;
use psydef_core::{Label, MAJORITY_LABEL, NUM_LABELS};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, EncoderMeta};
use crate::config::{
    AnalysisConfig, AnnotatorKind, AugmentConfig, BackendSpec, BackendsConfig, ConfigError, PipelineConfig, QcConfig,
    StressorConfig,
};
use crate::io::{load_catalog, load_corpus, load_supplementary, read_jsonl, save_corpus, write_json, write_jsonl, IoError};
use crate::live::{
    HttpClient, InFlightLimiter, LiveEmotion, LiveEncoder, LiveGenerator, LiveNli, RetryPolicy, UreqTransport,
};
use crate::manifest::{check, hash_json, Freshness, StageManifest};
use crate::report::{write_analysis, write_metrics, write_qc, write_table, Analysis, QcBatchRow, QcClassRow, QcReport};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{stage}: missing upstream artifact {path} (run the `{upstream}` stage first)")]
    MissingArtifact {
        stage: Stage,
        upstream: Stage,
        path: PathBuf,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{context}: {source}")]
    Backend { context: String, source: BackendError },
    #[error("{0}")]
    Shortfall(String),
    #[error("quality control rejected {rejected} of {batches} batch(es); see {report}")]
    QcHalt {
        rejected: usize,
        batches: usize,
        report: PathBuf,
    },
}

impl PipelineError {
    /// 1 validation, 2 backend exhaustion, 3 quality-control halt.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend { .. } | PipelineError::Shortfall(_) => 2,
            PipelineError::QcHalt { .. } => 3,
            _ => 1,
        }
    }
}

fn backend(context: impl Into<String>, source: BackendError) -> PipelineError {
    PipelineError::Backend {
        context: context.into(),
        source,
    }
}

fn from_stressor(e: StressorError) -> PipelineError {
    match e {
        StressorError::Backend(b) => backend("stressor", b),
        other => PipelineError::Invalid(format!("stressor: {other}")),
    }
}

fn from_augment(e: AugmentError) -> PipelineError {
    match e {
        AugmentError::Backend(b) => backend("augment", b),
        e @ AugmentError::Shortfall { .. } => PipelineError::Shortfall(format!("augment: {e}")),
        other => PipelineError::Invalid(format!("augment: {other}")),
    }
}

fn from_quality(e: QualityError) -> PipelineError {
    match e {
        QualityError::Backend(b) => backend("qc", b),
        other => PipelineError::Invalid(format!("qc: {other}")),
    }
}

fn from_feature(e: FeatureError) -> PipelineError {
    match e {
        FeatureError::Backend(b) => backend("features", b),
        other => PipelineError::Invalid(format!("features: {other}")),
    }
}

fn from_fusion(e: FusionError) -> PipelineError {
    match e {
        FusionError::Backend(b) => backend("encoder", b),
        other => PipelineError::Invalid(format!("fusion: {other}")),
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Stressor,
    Augment,
    Qc,
    Features,
    Train,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Stressor,
        Stage::Augment,
        Stage::Qc,
        Stage::Features,
        Stage::Train,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Stressor => "stressor",
            Stage::Augment => "augment",
            Stage::Qc => "qc",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }

    /// Parse `all` or a comma-separated list of stage names.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Stage>, PipelineError> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.into_iter().collect());
        }
        s.split(',')
            .map(|part| part.trim().parse())
            .collect::<Result<BTreeSet<_>, _>>()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Skipped,
    /// Ran because it had never run or for the listed reasons.
    Ran(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageOutcome)>,
}

impl RunSummary {
    pub fn ran(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .filter(|(_, o)| matches!(o, StageOutcome::Ran(_)))
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn skipped(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .filter(|(_, o)| *o == StageOutcome::Skipped)
            .map(|(s, _)| *s)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Encoder chosen by configuration or restored from a checkpoint.
pub enum AnyEncoder {
    Stub(StubEncoder),
    Live(LiveEncoder),
}

impl TextEncoder for AnyEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        match self {
            AnyEncoder::Stub(e) => e.encode(text),
            AnyEncoder::Live(e) => e.encode(text),
        }
    }

    fn kind(&self) -> &str {
        match self {
            AnyEncoder::Stub(e) => e.kind(),
            AnyEncoder::Live(e) => e.kind(),
        }
    }

    fn trainable_params(&self) -> &[f64] {
        match self {
            AnyEncoder::Stub(e) => e.trainable_params(),
            AnyEncoder::Live(e) => e.trainable_params(),
        }
    }

    fn trainable_params_mut(&mut self) -> &mut [f64] {
        match self {
            AnyEncoder::Stub(e) => e.trainable_params_mut(),
            AnyEncoder::Live(e) => e.trainable_params_mut(),
        }
    }

    fn accumulate_grad(&self, text: &str, grad_embedding: &[f64], grad: &mut [f64]) -> Result<(), BackendError> {
        match self {
            AnyEncoder::Stub(e) => e.accumulate_grad(text, grad_embedding, grad),
            AnyEncoder::Live(e) => e.accumulate_grad(text, grad_embedding, grad),
        }
    }
}

impl AnyEncoder {
    pub fn meta(&self) -> EncoderMeta {
        match self {
            AnyEncoder::Stub(e) => EncoderMeta {
                kind: "stub".into(),
                hash_dim: Some(e.hash_dim()),
                model: None,
            },
            AnyEncoder::Live(e) => EncoderMeta {
                kind: "live".into(),
                hash_dim: None,
                model: Some(e.0.model.clone()),
            },
        }
    }
}

fn http_client(cfg: &BackendsConfig, endpoint: &str, model: &str) -> HttpClient {
    let transport = Arc::new(UreqTransport::new(Duration::from_secs(cfg.timeout_s.max(1))));
    HttpClient::new(endpoint, model, transport)
        .with_api_key(std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()))
        .with_retry(RetryPolicy {
            attempts: cfg.retry_attempts.max(1),
            initial_backoff: Duration::from_millis(cfg.initial_backoff_ms),
            multiplier: 2.0,
        })
        .with_limiter(Arc::new(InFlightLimiter::new(cfg.max_in_flight)))
}

pub fn build_generator(cfg: &BackendsConfig) -> Box<dyn Generator> {
    match &cfg.generator {
        BackendSpec::Stub => Box::new(StubGenerator::with_garbage_rate(cfg.stub.garbage_rate)),
        BackendSpec::Live { endpoint, model } => Box::new(LiveGenerator(http_client(cfg, endpoint, model))),
    }
}

pub fn build_nli(cfg: &BackendsConfig) -> Box<dyn NliScorer> {
    match &cfg.nli {
        BackendSpec::Stub => Box::new(StubNli),
        BackendSpec::Live { endpoint, model } => Box::new(LiveNli(http_client(cfg, endpoint, model))),
    }
}

pub fn build_emotion(cfg: &BackendsConfig) -> Box<dyn EmotionScorer> {
    match &cfg.emotion {
        BackendSpec::Stub => Box::new(StubEmotion),
        BackendSpec::Live { endpoint, model } => Box::new(LiveEmotion(http_client(cfg, endpoint, model))),
    }
}

/// A freshly initialized encoder as configured.
pub fn build_encoder(cfg: &BackendsConfig) -> AnyEncoder {
    match &cfg.encoder {
        BackendSpec::Stub => AnyEncoder::Stub(StubEncoder::with_hash_dim(
            cfg.stub.encoder_hash_dim,
            cfg.stub.encoder_seed,
        )),
        BackendSpec::Live { endpoint, model } => AnyEncoder::Live(LiveEncoder(http_client(cfg, endpoint, model))),
    }
}

/// The encoder a checkpoint was trained with. Live encoders take their
/// endpoint from `cfg`.
pub fn restore_encoder(ckpt: &Checkpoint, cfg: &BackendsConfig) -> Result<AnyEncoder, PipelineError> {
    match ckpt.meta.encoder.kind.as_str() {
        "stub" => {
            let dim = ckpt
                .meta
                .encoder
                .hash_dim
                .ok_or_else(|| PipelineError::Invalid("checkpoint: stub encoder without hash_dim".into()))?;
            let params = ckpt
                .encoder_params
                .clone()
                .ok_or_else(|| PipelineError::Invalid("checkpoint: stub encoder parameters missing".into()))?;
            StubEncoder::from_params(dim, params)
                .map(AnyEncoder::Stub)
                .map_err(|e| PipelineError::Invalid(format!("checkpoint: {e}")))
        }
        "live" => match &cfg.encoder {
            BackendSpec::Live { endpoint, model } => {
                if Some(model) != ckpt.meta.encoder.model.as_ref() {
                    log::warn!(
                        "checkpoint encoder model {:?} differs from configured {model}",
                        ckpt.meta.encoder.model
                    );
                }
                Ok(AnyEncoder::Live(LiveEncoder(http_client(cfg, endpoint, model))))
            }
            BackendSpec::Stub => Err(PipelineError::Invalid(
                "checkpoint uses a live encoder; configure backends.encoder with its endpoint".into(),
            )),
        },
        other => Err(PipelineError::Invalid(format!("checkpoint: unknown encoder kind `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// Stage computations
// ---------------------------------------------------------------------------

/// Stressors for every labeled seeker turn, in dialogue and turn order.
pub fn identify_stressors<G: Generator + ?Sized>(
    dialogues: &[Dialogue],
    generator: &G,
    cfg: &StressorConfig,
    seed: u64,
) -> Result<Vec<StressorRecord>, PipelineError> {
    let options = StressorOptions {
        params: GenerationParams {
            max_tokens: cfg.max_tokens,
            temperature: cfg.temperature,
            seed: Some(seed),
        },
        parse_attempts: cfg.parse_attempts,
        history_cap: cfg.history_cap,
    };
    let mut out = Vec::new();
    for d in dialogues {
        for (turn, _) in d.labeled_seeker_turns() {
            out.push(identify_stressor(d, turn.index, generator, &options).map_err(from_stressor)?);
        }
    }
    let fallbacks = out.iter().filter(|s| s.is_fallback()).count();
    log::info!("identified {} stressors ({fallbacks} fallback)", out.len());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGeneration {
    pub label: Label,
    pub target: usize,
    pub produced: usize,
    pub calls: usize,
    pub unparseable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutput {
    pub plan: AugmentationPlan,
    pub classes: Vec<ClassGeneration>,
    #[serde(skip)]
    pub samples: Vec<SyntheticSample>,
}

fn stressor_key(s: &StressorRecord) -> (String, usize) {
    (s.dialogue_id.clone(), s.turn_index)
}

fn rotated<T: Clone>(items: &[T], offset: usize) -> Vec<T> {
    let k = offset % items.len().max(1);
    items[k..].iter().chain(&items[..k]).cloned().collect()
}

/// Plan from the training class distribution, then generate each class in
/// rounds of at most `round_size` samples. Seeds are every training turn
/// with a stressor, whatever its label.
pub fn augment<G: Generator + ?Sized>(
    train: &[Dialogue],
    stressors: &[StressorRecord],
    catalog: &DmrsCatalog,
    supplementary: &SupplementaryDefinitions,
    cfg: &AugmentConfig,
    history_cap: usize,
    generator: &G,
    seed: u64,
) -> Result<AugmentOutput, PipelineError> {
    let strategy = cfg.strategy()?;
    let plan = plan_augmentation(&class_distribution(train), strategy).map_err(from_augment)?;
    let by_id: BTreeMap<&str, &Dialogue> = train.iter().map(|d| (d.id.as_str(), d)).collect();
    let seeds: Vec<SeedInstance> = stressors
        .iter()
        .filter_map(|s| {
            by_id.get(s.dialogue_id.as_str()).map(|d| SeedInstance {
                stressor: s.clone(),
                history: render_history(d, s.turn_index, history_cap),
                dialogue_id: s.dialogue_id.clone(),
            })
        })
        .collect();

    let mut classes = Vec::new();
    let mut samples = Vec::new();
    let mut remaining: Vec<(Label, usize, Vec<DefenseDefinition>)> = Vec::new();
    for label in Label::all() {
        let target = plan.target(label);
        if target == 0 || label == MAJORITY_LABEL {
            continue;
        }
        let defs = definitions_for(label, catalog, supplementary).map_err(from_augment)?;
        remaining.push((label, target, defs));
        classes.push(ClassGeneration {
            label,
            target,
            produced: 0,
            calls: 0,
            unparseable: 0,
        });
    }
    if !remaining.is_empty() && seeds.is_empty() {
        return Err(from_augment(AugmentError::NoSeeds));
    }
    let round_size = cfg.round_size.max(1);
    let mut round = 0u32;
    while remaining.iter().any(|(_, left, _)| *left > 0) {
        for ((label, left, defs), stats) in remaining.iter_mut().zip(classes.iter_mut()) {
            if *left == 0 {
                continue;
            }
            let n = (*left).min(round_size);
            let offset = round as usize * round_size;
            let options = BatchOptions {
                params: GenerationParams {
                    max_tokens: cfg.max_tokens,
                    temperature: cfg.temperature,
                    seed: Some(seed),
                },
                budget_factor: cfg.budget_factor,
                round,
            };
            let batch = generate_class_batch(
                *label,
                n,
                &rotated(&seeds, offset),
                &rotated(defs, offset),
                generator,
                &options,
            )
            .map_err(from_augment)?;
            stats.produced += batch.samples.len();
            stats.calls += batch.calls;
            stats.unparseable += batch.unparseable;
            samples.extend(batch.samples);
            *left -= n;
        }
        round += 1;
    }
    log::info!(
        "generated {} synthetic samples over {round} round(s) ({})",
        samples.len(),
        plan.strategy
    );
    Ok(AugmentOutput { plan, classes, samples })
}

fn adherence(
    samples: &[&SyntheticSample],
    defs_by_label: &BTreeMap<Label, Vec<DefenseDefinition>>,
    nli: &dyn NliScorer,
    template: &str,
) -> Result<Option<f64>, PipelineError> {
    if samples.is_empty() {
        return Ok(None);
    }
    // one hypothesis per (label, mechanism) group; the mean is over samples
    let mut groups: BTreeMap<(Label, &str), Vec<&str>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.intended_label, s.mechanism_name.as_str()))
            .or_default()
            .push(s.text.as_str());
    }
    let mut total = 0.0;
    for ((label, mechanism), texts) in groups {
        let def = defs_by_label
            .get(&label)
            .and_then(|defs| defs.iter().find(|d| d.mechanism_name == mechanism))
            .ok_or_else(|| PipelineError::Invalid(format!("qc: no definition for {mechanism} (label {label})")))?;
        total += semantic_adherence(&texts, def, nli, template).map_err(from_quality)? * texts.len() as f64;
    }
    Ok(Some(total / samples.len() as f64))
}

fn diversity(texts: &[&str], max_n: usize) -> Result<Option<f64>, PipelineError> {
    if texts.len() < 2 {
        return Ok(None);
    }
    self_bleu(texts, max_n).map(Some).map_err(from_quality)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}


/// Score diversity and adherence per class and per batch, gate every batch
/// on kappa, and return the report with the accepted samples.
pub fn quality_control(
    samples: Vec<SyntheticSample>,
    train: &[Dialogue],
    catalog: &DmrsCatalog,
    supplementary: &SupplementaryDefinitions,
    cfg: &QcConfig,
    nli: &dyn NliScorer,
    encoder: &dyn TextEncoder,
) -> Result<(QcReport, Vec<SyntheticSample>), PipelineError> {
    let mut defs_by_label = BTreeMap::new();
    for label in samples.iter().map(|s| s.intended_label).collect::<BTreeSet<_>>() {
        defs_by_label.insert(label, definitions_for(label, catalog, supplementary).map_err(from_augment)?);
    }

    // class table over everything generated, before gating
    let mut classes = Vec::new();
    for &label in defs_by_label.keys() {
        let class: Vec<&SyntheticSample> = samples.iter().filter(|s| s.intended_label == label).collect();
        let texts: Vec<&str> = class.iter().map(|s| s.text.as_str()).collect();
        classes.push(QcClassRow {
            class: label.class_name().to_string(),
            label: label.get(),
            n: class.len(),
            self_bleu: diversity(&texts, cfg.self_bleu_max_n)?,
            semantic_adherence: adherence(&class, &defs_by_label, nli, &cfg.hypothesis_template)?,
            accepted: 0,
        });
    }

    let annotator: Box<dyn Annotator + '_> = match cfg.annotator {
        AnnotatorKind::Centroid => Box::new(
            CentroidAnnotator::fit(
                encoder,
                train
                    .iter()
                    .flat_map(Dialogue::labeled_seeker_turns)
                    .map(|(t, l)| (t.text.as_str(), l)),
            )
            .map_err(from_quality)?,
        ),
        AnnotatorKind::Dmrs => Box::new(DmrsAnnotator { catalog, nli }),
    };

    let generated = samples.len();
    let mut batches = Vec::new();
    let mut accepted = Vec::new();
    for (i, batch) in gating_batches(samples, cfg.min_batch).into_iter().enumerate() {
        let texts: Vec<&str> = batch.iter().map(|s| s.text.as_str()).collect();
        let refs: Vec<&SyntheticSample> = batch.iter().collect();
        let sb = diversity(&texts, cfg.self_bleu_max_n)?;
        let sa = adherence(&refs, &defs_by_label, nli, &cfg.hypothesis_template)?;
        let rounds: Vec<u32> = batch.iter().map(|s| s.round).collect::<BTreeSet<_>>().into_iter().collect();
        let size = batch.len();
        let outcome = kappa_gate(
            batch,
            &*annotator,
            cfg.kappa_threshold,
            BatchScores {
                self_bleu: sb.unwrap_or(0.0),
                semantic_adherence: sa.unwrap_or(0.0),
            },
        )
        .map_err(from_quality)?;
        let (status, reason) = match &outcome.status {
            GateStatus::Accepted => ("accepted", None),
            GateStatus::Rejected => ("rejected", None),
            GateStatus::Unevaluable { reason } => ("unevaluable", Some(reason.clone())),
        };
        log::info!(
            "qc batch {i}: {size} samples, kappa {:?} -> {status}",
            outcome.verdict.map(|v| v.kappa)
        );
        batches.push(QcBatchRow {
            batch: i,
            rounds,
            size,
            self_bleu: sb,
            semantic_adherence: sa,
            kappa: outcome.verdict.map(|v| v.kappa),
            status: status.to_string(),
            reason,
        });
        if outcome.accepted() {
            accepted.extend(outcome.samples);
        }
    }
    for row in &mut classes {
        row.accepted = accepted.iter().filter(|s| s.intended_label.get() == row.label).count();
    }
    let report = QcReport {
        kappa_threshold: cfg.kappa_threshold,
        annotator: match cfg.annotator {
            AnnotatorKind::Centroid => "centroid".into(),
            AnnotatorKind::Dmrs => "dmrs".into(),
        },
        mean_self_bleu: mean_of(classes.iter().map(|c| c.self_bleu)),
        mean_semantic_adherence: mean_of(classes.iter().map(|c| c.semantic_adherence)),
        classes,
        batches,
        generated,
        accepted: accepted.len(),
    };
    Ok((report, accepted))
}

pub fn real_row_id(dialogue_id: &str, turn_index: usize) -> String {
    format!("{dialogue_id}#{turn_index}")
}

pub fn is_synthetic_id(id: &str) -> bool {
    id.starts_with("synthetic:")
}

/// Feature rows for the labeled seeker turns of `dialogues`, followed by
/// one row per synthetic sample.
pub fn build_rows(
    dialogues: &[Dialogue],
    stressors: &[StressorRecord],
    synthetic: &[SyntheticSample],
    catalog: &DmrsCatalog,
    nli: &dyn NliScorer,
    emotion: &dyn EmotionScorer,
    heuristics: &psydef_core::features::HeuristicConfig,
) -> Result<Vec<FeatureRow>, PipelineError> {
    let by_turn: BTreeMap<(String, usize), &StressorRecord> = stressors.iter().map(|s| (stressor_key(s), s)).collect();
    let mut rows = Vec::new();
    for d in dialogues {
        for (turn, label) in d.labeled_seeker_turns() {
            let category = match by_turn.get(&(d.id.clone(), turn.index)) {
                Some(s) => s.category.clone(),
                None => {
                    log::warn!("{}: no stressor record, using the fallback category", real_row_id(&d.id, turn.index));
                    StressorRecord::fallback(&d.id, turn.index).category
                }
            };
            rows.push(
                build_feature_row(
                    real_row_id(&d.id, turn.index),
                    &turn.text,
                    Some(label),
                    &category,
                    catalog,
                    nli,
                    emotion,
                    heuristics,
                )
                .map_err(from_feature)?,
            );
        }
    }
    let mut counters: BTreeMap<(Label, u32), usize> = BTreeMap::new();
    for s in synthetic {
        let n = counters.entry((s.intended_label, s.round)).or_insert(0);
        let id = format!("synthetic:{}:{}:{}", s.intended_label, s.round, n);
        *n += 1;
        rows.push(
            build_feature_row(
                id,
                &s.text,
                Some(s.intended_label),
                &s.stressor.category,
                catalog,
                nli,
                emotion,
                heuristics,
            )
            .map_err(from_feature)?,
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: Label,
    pub distribution: [f64; NUM_LABELS],
}

/// Anything with an id and an optional gold label, e.g. a feature row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    #[serde(default)]
    pub label: Option<Label>,
}

pub fn predict_rows(
    model: &FusionModel,
    rows: &[FeatureRow],
    encoder: &dyn TextEncoder,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    let preds: Vec<Prediction> = model.predict(rows, encoder).map_err(from_fusion)?;
    Ok(rows
        .iter()
        .zip(preds)
        .map(|(r, p)| PredictionRecord {
            id: r.id.clone(),
            label: p.label,
            distribution: p.distribution,
        })
        .collect())
}

/// Match predictions to gold labels by id and score them.
pub fn score_predictions(
    preds: &[PredictionRecord],
    gold: &[GoldRecord],
    sink_label: Label,
) -> Result<(MetricsReport, SinkAnalysis), PipelineError> {
    let gold_by_id: BTreeMap<&str, Label> = gold
        .iter()
        .filter_map(|g| g.label.map(|l| (g.id.as_str(), l)))
        .collect();
    let mut p = Vec::with_capacity(preds.len());
    let mut g = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for rec in preds {
        match gold_by_id.get(rec.id.as_str()) {
            Some(&label) => {
                p.push(rec.label);
                g.push(label);
            }
            None => missing.push(rec.id.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "{} prediction(s) have no gold label, first: {}",
            missing.len(),
            missing[0]
        )));
    }
    if preds.len() < gold_by_id.len() {
        log::warn!("{} gold row(s) have no prediction", gold_by_id.len() - preds.len());
    }
    let report = evaluate_labels(&p, &g).map_err(|e| PipelineError::Invalid(format!("eval: {e}")))?;
    let sink = sink_analysis(&report.confusion, sink_label);
    Ok((report, sink))
}

/// Corpus analytics, ordered by dialogue id. Activations come from the
/// labeled real rows when feature rows and the catalog are given.
pub fn analyze(
    dialogues: &[Dialogue],
    rows: &[FeatureRow],
    catalog: Option<&DmrsCatalog>,
    emotion: &dyn EmotionScorer,
    heuristics: &psydef_core::features::HeuristicConfig,
    cfg: &AnalysisConfig,
) -> Result<Analysis, PipelineError> {
    let mut sorted: Vec<&Dialogue> = dialogues.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let owned: Vec<Dialogue> = sorted.iter().map(|d| (*d).clone()).collect();

    let trajectories: Vec<(String, Vec<_>)> = owned.iter().map(|d| (d.id.clone(), defense_trajectory(d))).collect();
    let transitions = transition_stats(&trajectories.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());

    let mut cdi = Vec::new();
    let mut opening_up = Vec::new();
    for d in &owned {
        let mut signals = Vec::new();
        for t in d.seeker_turns().filter(|t| !t.text.trim().is_empty()) {
            let e = emotion.score(&t.text).map_err(|e| backend("analyze", e))?;
            let h = extract_heuristics(&t.text, &e, heuristics);
            signals.push(DisclosureSignals {
                turn_index: t.index,
                token_count: tokenize(&t.text).len(),
                i_pronoun_density: h.i_pronoun_density(),
                emotion_intensity: h.emotion_intensity(),
            });
        }
        if signals.len() < 2 {
            continue;
        }
        let points =
            cdi_curve(&signals, &cfg.cdi_components).map_err(|e| PipelineError::Invalid(format!("analyze: {e}")))?;
        opening_up.push((d.id.clone(), opening_up_turn(&points, cfg.opening_threshold_z)));
        cdi.push((d.id.clone(), points));
    }

    let real: Vec<FeatureRow> = rows.iter().filter(|r| !is_synthetic_id(&r.id)).cloned().collect();
    let activations = match catalog {
        Some(c) => mechanism_activations(&real, c),
        None => Vec::new(),
    };
    Ok(Analysis {
        class_distribution: class_distribution(&owned),
        trajectories,
        transitions,
        cdi,
        opening_up,
        opening_threshold_z: cfg.opening_threshold_z,
        latency: latency_by_label(&owned),
        sizes: dialogue_sizes(&owned),
        activations,
    })
}

pub fn write_history(path: &Path, h: &TrainingHistory) -> Result<(), IoError> {
    write_table(
        path,
        &["epoch", "train_loss", "dev_accuracy", "dev_macro_f1", "best"],
        (0..h.epochs_run()).map(|e| {
            [
                e.to_string(),
                h.train_loss[e].to_string(),
                h.dev_accuracy.get(e).map(|v| v.to_string()).unwrap_or_default(),
                h.dev_macro_f1.get(e).map(|v| v.to_string()).unwrap_or_default(),
                u8::from(e == h.best_epoch).to_string(),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

const CKPT_DIR: &str = "ckpt";

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    catalog: DmrsCatalog,
    supplementary: SupplementaryDefinitions,
}

impl Runner<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.output.join(stage.name())
    }

    fn artifact(&self, stage: Stage, upstream: Stage, file: &str) -> Result<PathBuf, PipelineError> {
        let path = self.dir(upstream).join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { stage, upstream, path })
        }
    }

    fn input(
        &self,
        m: StageManifest,
        stage: Stage,
        upstream: Stage,
        file: &str,
    ) -> Result<(StageManifest, PathBuf), PipelineError> {
        let path = self.artifact(stage, upstream, file)?;
        let m = m.input_file(&format!("{upstream}/{file}"), &path)?;
        Ok((m, path))
    }

    /// Levels and mechanisms only; indicator statements do not affect generation.
    fn catalog_definitions_hash(&self) -> String {
        hash_json(&(self.catalog.levels(), self.catalog.mechanisms()))
    }

    fn ckpt_files(&self) -> Vec<String> {
        let mut files: Vec<String> = ["model.bin", "config.json", "history.json", "meta.json"]
            .iter()
            .map(|f| format!("{CKPT_DIR}/{f}"))
            .collect();
        if self.dir(Stage::Train).join(CKPT_DIR).join("encoder.bin").exists() {
            files.push(format!("{CKPT_DIR}/encoder.bin"));
        }
        files
    }

    fn expected(&self, stage: Stage) -> Result<StageManifest, PipelineError> {
        let b = &self.cfg.backends;
        let m = match stage {
            Stage::Ingest => StageManifest::new(stage.name(), json!({"split": self.cfg.split, "seed": self.cfg.seed}))
                .input_file("corpus", &self.cfg.paths.corpus)?,
            Stage::Stressor => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"stressor": self.cfg.stressor, "generator": b.generator,
                           "garbage_rate": b.stub.garbage_rate, "seed": self.cfg.seed}),
                );
                let (m, _) = self.input(m, stage, Stage::Ingest, "train.jsonl")?;
                self.input(m, stage, Stage::Ingest, "dev.jsonl")?.0
            }
            Stage::Augment => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"augment": self.cfg.augment, "history_cap": self.cfg.stressor.history_cap,
                           "generator": b.generator, "garbage_rate": b.stub.garbage_rate, "seed": self.cfg.seed}),
                )
                .input("catalog_definitions", self.catalog_definitions_hash())
                .input_file("supplementary", &self.cfg.paths.supplementary)?;
                let (m, _) = self.input(m, stage, Stage::Ingest, "train.jsonl")?;
                self.input(m, stage, Stage::Stressor, "stressors.jsonl")?.0
            }
            Stage::Qc => {
                let mut m = StageManifest::new(
                    stage.name(),
                    json!({"qc": self.cfg.qc, "nli": b.nli, "encoder": b.encoder, "stub_encoder": {
                        "seed": b.stub.encoder_seed, "hash_dim": b.stub.encoder_hash_dim}}),
                )
                .input("catalog_definitions", self.catalog_definitions_hash())
                .input_file("supplementary", &self.cfg.paths.supplementary)?;
                if self.cfg.qc.annotator == AnnotatorKind::Dmrs {
                    m = m.input("catalog", self.catalog.fingerprint());
                }
                let (m, _) = self.input(m, stage, Stage::Ingest, "train.jsonl")?;
                self.input(m, stage, Stage::Augment, "synthetic.jsonl")?.0
            }
            Stage::Features => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"features": self.cfg.features, "nli": b.nli, "emotion": b.emotion}),
                )
                .input("catalog", self.catalog.fingerprint());
                let (m, _) = self.input(m, stage, Stage::Ingest, "train.jsonl")?;
                let (m, _) = self.input(m, stage, Stage::Ingest, "dev.jsonl")?;
                let (m, _) = self.input(m, stage, Stage::Stressor, "stressors.jsonl")?;
                self.input(m, stage, Stage::Qc, "accepted.jsonl")?.0
            }
            Stage::Train => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"fusion": self.cfg.fusion, "encoder": b.encoder, "stub_encoder": {
                        "seed": b.stub.encoder_seed, "hash_dim": b.stub.encoder_hash_dim}}),
                )
                .input("catalog", self.catalog.fingerprint());
                let (m, _) = self.input(m, stage, Stage::Features, "train.jsonl")?;
                self.input(m, stage, Stage::Features, "dev.jsonl")?.0
            }
            Stage::Eval => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"sink_label": self.cfg.analysis.sink_label, "encoder": b.encoder}),
                );
                let (mut m, _) = self.input(m, stage, Stage::Features, "dev.jsonl")?;
                for f in self.ckpt_files() {
                    m = self.input(m, stage, Stage::Train, &f)?.0;
                }
                m
            }
            Stage::Analyze => {
                let m = StageManifest::new(
                    stage.name(),
                    json!({"analysis": self.cfg.analysis, "features": self.cfg.features, "emotion": b.emotion}),
                )
                .input("catalog", self.catalog.fingerprint());
                let (m, _) = self.input(m, stage, Stage::Ingest, "train.jsonl")?;
                let (m, _) = self.input(m, stage, Stage::Ingest, "dev.jsonl")?;
                let (m, _) = self.input(m, stage, Stage::Features, "train.jsonl")?;
                self.input(m, stage, Stage::Features, "dev.jsonl")?.0
            }
        };
        Ok(m)
    }

    fn run(&self, stage: Stage) -> Result<Vec<String>, PipelineError> {
        let cfg = self.cfg;
        let dir = self.dir(stage);
        let ingest = self.dir(Stage::Ingest);
        match stage {
            Stage::Ingest => {
                let corpus = load_corpus(&cfg.paths.corpus)?;
                let (train, dev) = split_corpus(&corpus, cfg.split.train_ratio, cfg.split.dev_ratio, cfg.seed)
                    .map_err(|e| PipelineError::Invalid(format!("ingest: {e}")))?;
                log::info!("split {} dialogues into {} train / {} dev", corpus.len(), train.len(), dev.len());
                save_corpus(&dir.join("train.jsonl"), &train)?;
                save_corpus(&dir.join("dev.jsonl"), &dev)?;
                write_json(&dir.join("class_distribution.json"), &class_distribution(&train))?;
                Ok(vec!["train.jsonl".into(), "dev.jsonl".into(), "class_distribution.json".into()])
            }
            Stage::Stressor => {
                let mut dialogues = load_corpus(&ingest.join("train.jsonl"))?;
                dialogues.extend(load_corpus(&ingest.join("dev.jsonl"))?);
                let generator = build_generator(&cfg.backends);
                let records = identify_stressors(&dialogues, &*generator, &cfg.stressor, cfg.seed)?;
                write_jsonl(&dir.join("stressors.jsonl"), &records)?;
                Ok(vec!["stressors.jsonl".into()])
            }
            Stage::Augment => {
                let train = load_corpus(&ingest.join("train.jsonl"))?;
                let stressors: Vec<StressorRecord> = read_jsonl(&self.dir(Stage::Stressor).join("stressors.jsonl"))?;
                let generator = build_generator(&cfg.backends);
                let out = augment(
                    &train,
                    &stressors,
                    &self.catalog,
                    &self.supplementary,
                    &cfg.augment,
                    cfg.stressor.history_cap,
                    &*generator,
                    cfg.seed,
                )?;
                write_json(&dir.join("plan.json"), &out)?;
                write_jsonl(&dir.join("synthetic.jsonl"), &out.samples)?;
                Ok(vec!["plan.json".into(), "synthetic.jsonl".into()])
            }
            Stage::Qc => {
                let train = load_corpus(&ingest.join("train.jsonl"))?;
                let samples: Vec<SyntheticSample> = read_jsonl(&self.dir(Stage::Augment).join("synthetic.jsonl"))?;
                let nli = build_nli(&cfg.backends);
                let encoder = build_encoder(&cfg.backends);
                let (report, accepted) = quality_control(
                    samples,
                    &train,
                    &self.catalog,
                    &self.supplementary,
                    &cfg.qc,
                    &*nli,
                    &encoder,
                )?;
                let mut files = write_qc(&dir, &report)?;
                let rejected = report.rejected_batches();
                if rejected > 0 && cfg.qc.halt_on_reject {
                    // the reports stay for inspection; no manifest, no accepted set
                    let _ = std::fs::remove_file(dir.join("accepted.jsonl"));
                    return Err(PipelineError::QcHalt {
                        rejected,
                        batches: report.batches.len(),
                        report: dir.join("qc_summary.txt"),
                    });
                }
                if rejected > 0 {
                    log::warn!("qc: {rejected} batch(es) rejected; continuing without them");
                }
                write_jsonl(&dir.join("accepted.jsonl"), &accepted)?;
                files.push("accepted.jsonl".into());
                Ok(files)
            }
            Stage::Features => {
                let train = load_corpus(&ingest.join("train.jsonl"))?;
                let dev = load_corpus(&ingest.join("dev.jsonl"))?;
                let stressors: Vec<StressorRecord> = read_jsonl(&self.dir(Stage::Stressor).join("stressors.jsonl"))?;
                let accepted: Vec<SyntheticSample> = read_jsonl(&self.dir(Stage::Qc).join("accepted.jsonl"))?;
                let nli = build_nli(&cfg.backends);
                let emotion = build_emotion(&cfg.backends);
                let h = &cfg.features;
                let train_rows = build_rows(&train, &stressors, &accepted, &self.catalog, &*nli, &*emotion, h)?;
                let dev_rows = build_rows(&dev, &stressors, &[], &self.catalog, &*nli, &*emotion, h)?;
                log::info!("built {} train rows ({} synthetic), {} dev rows", train_rows.len(), accepted.len(), dev_rows.len());
                write_jsonl(&dir.join("train.jsonl"), &train_rows)?;
                write_jsonl(&dir.join("dev.jsonl"), &dev_rows)?;
                Ok(vec!["train.jsonl".into(), "dev.jsonl".into()])
            }
            Stage::Train => {
                let features = self.dir(Stage::Features);
                let train_rows: Vec<FeatureRow> = read_jsonl(&features.join("train.jsonl"))?;
                let dev_rows: Vec<FeatureRow> = read_jsonl(&features.join("dev.jsonl"))?;
                let mut encoder = build_encoder(&cfg.backends);
                let (model, history) = train(&train_rows, &dev_rows, &cfg.fusion, &mut encoder).map_err(from_fusion)?;
                let trainable = encoder.trainable_params();
                let ckpt = Checkpoint {
                    model,
                    history,
                    meta: CheckpointMeta {
                        format_version: crate::checkpoint::FORMAT_VERSION,
                        catalog_fingerprint: self.catalog.fingerprint(),
                        encoder: encoder.meta(),
                    },
                    encoder_params: (!trainable.is_empty()).then(|| trainable.to_vec()),
                };
                save_checkpoint(&dir.join(CKPT_DIR), &ckpt)?;
                write_history(&dir.join("history.csv"), &ckpt.history)?;
                let mut files = self.ckpt_files();
                files.push("history.csv".into());
                Ok(files)
            }
            Stage::Eval => {
                let ckpt = load_checkpoint(
                    &self.dir(Stage::Train).join(CKPT_DIR),
                    Some(&self.catalog.fingerprint()),
                )?;
                let encoder = restore_encoder(&ckpt, &cfg.backends)?;
                let dev_rows: Vec<FeatureRow> = read_jsonl(&self.dir(Stage::Features).join("dev.jsonl"))?;
                let preds = predict_rows(&ckpt.model, &dev_rows, &encoder)?;
                let gold: Vec<GoldRecord> = dev_rows
                    .iter()
                    .map(|r| GoldRecord {
                        id: r.id.clone(),
                        label: r.label,
                    })
                    .collect();
                let sink = Label::new(cfg.analysis.sink_label).unwrap_or(MAJORITY_LABEL);
                let (report, sink) = score_predictions(&preds, &gold, sink)?;
                log::info!("dev accuracy {:.4}, macro-F1 {:.4}", report.accuracy, report.macro_f1);
                write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
                let mut files = write_metrics(&dir, &report, &sink)?;
                files.push("predictions.jsonl".into());
                Ok(files)
            }
            Stage::Analyze => {
                let mut dialogues = load_corpus(&ingest.join("train.jsonl"))?;
                dialogues.extend(load_corpus(&ingest.join("dev.jsonl"))?);
                let features = self.dir(Stage::Features);
                let mut rows: Vec<FeatureRow> = read_jsonl(&features.join("train.jsonl"))?;
                rows.extend(read_jsonl::<FeatureRow>(&features.join("dev.jsonl"))?);
                let emotion = build_emotion(&cfg.backends);
                let a = analyze(&dialogues, &rows, Some(&self.catalog), &*emotion, &cfg.features, &cfg.analysis)?;
                Ok(write_analysis(&dir, &a)?)
            }
        }
    }
}

/// Run the requested stages in dependency order, skipping those whose
/// manifest still matches their inputs and configuration.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &BTreeSet<Stage>) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let runner = Runner {
        cfg,
        catalog: load_catalog(&cfg.paths.catalog)?,
        supplementary: load_supplementary(&cfg.paths.supplementary)?,
    };
    let mut summary = RunSummary::default();
    for stage in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
        let expected = runner.expected(stage)?;
        let dir = runner.dir(stage);
        let reasons = match check(&dir, &expected) {
            Freshness::Fresh => {
                log::info!("{stage}: up to date, skipped");
                summary.stages.push((stage, StageOutcome::Skipped));
                continue;
            }
            Freshness::NeverRun => vec!["never run".to_string()],
            Freshness::Stale(reasons) => reasons,
        };
        log::info!("{stage}: running ({})", reasons.join("; "));
        // a stale manifest must not survive a failed rerun
        let _ = std::fs::remove_file(dir.join(crate::manifest::MANIFEST_FILE));
        let files = runner.run(stage)?;
        let mut manifest = expected;
        manifest.record_outputs(&dir, &files)?;
        manifest.save(&dir)?;
        summary.stages.push((stage, StageOutcome::Ran(reasons)));
    }
    Ok(summary)
}

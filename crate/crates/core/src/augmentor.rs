//! Theory-driven synthetic data generation for minority classes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationParams, Generator};
use crate::corpus::ClassCounts;
use crate::hash::{fnv1a64_extend, mix64};
use crate::quality::QcVerdict;
use crate::stressor::StressorRecord;
use crate::template;
use crate::{Label, MAJORITY_LABEL, NUM_LABELS};

/// Generation prompt with stressor, history, mechanism and few-shot slots.
pub const GENERATION_TEMPLATE: &str = include_str!("../templates/generation.txt");

pub const EXPECTED_LEVELS: usize = 7;
pub const EXPECTED_MECHANISMS: usize = 30;
pub const EXPECTED_INDICATORS: usize = 150;
pub const MIN_EXEMPLARS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseLevel {
    pub id: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanism {
    pub id: String,
    pub name: String,
    pub level_id: u8,
    pub definition: String,
    pub pattern_description: String,
    pub exemplars: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub id: String,
    pub mechanism_id: String,
    pub statement: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CatalogError {
    #[error("expected {expected} {what}, found {found}")]
    WrongCount {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("duplicate {what} id {id}")]
    DuplicateId { what: &'static str, id: String },
    #[error("indicator {indicator} references unknown mechanism {mechanism}")]
    DanglingMechanism { indicator: String, mechanism: String },
    #[error("mechanism {mechanism} references unknown level {level}")]
    DanglingLevel { mechanism: String, level: u8 },
    #[error("level ids must be 1..=7, found {0}")]
    BadLevelId(u8),
    #[error("level {0} owns no mechanism")]
    EmptyLevel(u8),
    #[error("mechanism {mechanism} owns no indicator")]
    EmptyMechanism { mechanism: String },
    #[error("mechanism {mechanism} has {found} exemplars, need at least {MIN_EXEMPLARS}")]
    TooFewExemplars { mechanism: String, found: usize },
}

#[derive(Deserialize)]
struct RawCatalog {
    levels: Vec<DefenseLevel>,
    mechanisms: Vec<Mechanism>,
    indicators: Vec<Indicator>,
}

/// DMRS catalog: levels, mechanisms and indicators with resolved cross references.
///
/// Mechanism order (and therefore defense-profile order) is the file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog")]
pub struct DmrsCatalog {
    levels: Vec<DefenseLevel>,
    mechanisms: Vec<Mechanism>,
    indicators: Vec<Indicator>,
    #[serde(skip)]
    indicator_mechanism: Vec<usize>,
    #[serde(skip)]
    mechanism_level: Vec<usize>,
}

impl TryFrom<RawCatalog> for DmrsCatalog {
    type Error = CatalogError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        DmrsCatalog::new(raw.levels, raw.mechanisms, raw.indicators)
    }
}

fn check_count(what: &'static str, expected: usize, found: usize) -> Result<(), CatalogError> {
    if expected == found {
        Ok(())
    } else {
        Err(CatalogError::WrongCount {
            what,
            expected,
            found,
        })
    }
}

impl DmrsCatalog {
    pub fn new(
        levels: Vec<DefenseLevel>,
        mechanisms: Vec<Mechanism>,
        indicators: Vec<Indicator>,
    ) -> Result<Self, CatalogError> {
        check_count("levels", EXPECTED_LEVELS, levels.len())?;
        check_count("mechanisms", EXPECTED_MECHANISMS, mechanisms.len())?;
        check_count("indicators", EXPECTED_INDICATORS, indicators.len())?;

        let mut level_pos = BTreeMap::new();
        for (i, level) in levels.iter().enumerate() {
            if !(1..=EXPECTED_LEVELS as u8).contains(&level.id) {
                return Err(CatalogError::BadLevelId(level.id));
            }
            if level_pos.insert(level.id, i).is_some() {
                return Err(CatalogError::DuplicateId {
                    what: "level",
                    id: level.id.to_string(),
                });
            }
        }

        let mut mech_pos = BTreeMap::new();
        let mut mechanism_level = Vec::with_capacity(mechanisms.len());
        for (i, m) in mechanisms.iter().enumerate() {
            if mech_pos.insert(m.id.as_str(), i).is_some() {
                return Err(CatalogError::DuplicateId {
                    what: "mechanism",
                    id: m.id.clone(),
                });
            }
            let pos = *level_pos
                .get(&m.level_id)
                .ok_or_else(|| CatalogError::DanglingLevel {
                    mechanism: m.id.clone(),
                    level: m.level_id,
                })?;
            if m.exemplars.iter().filter(|e| !e.trim().is_empty()).count() < MIN_EXEMPLARS {
                return Err(CatalogError::TooFewExemplars {
                    mechanism: m.id.clone(),
                    found: m.exemplars.len(),
                });
            }
            mechanism_level.push(pos);
        }
        for (i, level) in levels.iter().enumerate() {
            if !mechanism_level.contains(&i) {
                return Err(CatalogError::EmptyLevel(level.id));
            }
        }

        let mut seen = BTreeSet::new();
        let mut indicator_mechanism = Vec::with_capacity(indicators.len());
        for ind in &indicators {
            if !seen.insert(ind.id.as_str()) {
                return Err(CatalogError::DuplicateId {
                    what: "indicator",
                    id: ind.id.clone(),
                });
            }
            let pos = *mech_pos.get(ind.mechanism_id.as_str()).ok_or_else(|| {
                CatalogError::DanglingMechanism {
                    indicator: ind.id.clone(),
                    mechanism: ind.mechanism_id.clone(),
                }
            })?;
            indicator_mechanism.push(pos);
        }
        for (k, m) in mechanisms.iter().enumerate() {
            if !indicator_mechanism.contains(&k) {
                return Err(CatalogError::EmptyMechanism {
                    mechanism: m.id.clone(),
                });
            }
        }

        Ok(DmrsCatalog {
            levels,
            mechanisms,
            indicators,
            indicator_mechanism,
            mechanism_level,
        })
    }

    pub fn levels(&self) -> &[DefenseLevel] {
        &self.levels
    }

    pub fn mechanisms(&self) -> &[Mechanism] {
        &self.mechanisms
    }

    pub fn indicators(&self) -> &[Indicator] {
        &self.indicators
    }

    /// Position (in [`Self::mechanisms`]) of the mechanism owning indicator `j`.
    pub fn indicator_mechanism(&self, j: usize) -> usize {
        self.indicator_mechanism[j]
    }

    /// Level id of mechanism `k`.
    pub fn mechanism_level_id(&self, k: usize) -> u8 {
        self.levels[self.mechanism_level[k]].id
    }

    pub fn level_name(&self, level_id: u8) -> Option<&str> {
        self.levels
            .iter()
            .find(|l| l.id == level_id)
            .map(|l| l.name.as_str())
    }

    /// Generation definitions for a DMRS level, one per mechanism, file order.
    pub fn definitions_for_level(&self, label: Label) -> Vec<DefenseDefinition> {
        let level_name = self.level_name(label.get()).unwrap_or_default().to_string();
        self.mechanisms
            .iter()
            .filter(|m| m.level_id == label.get())
            .map(|m| DefenseDefinition {
                level: label,
                level_name: level_name.clone(),
                mechanism_name: m.name.clone(),
                definition: m.definition.clone(),
                pattern_description: m.pattern_description.clone(),
                exemplars: m.exemplars.clone(),
            })
            .collect()
    }

    /// Content fingerprint over every text field, in file order.
    pub fn fingerprint(&self) -> String {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |s: &str| {
            h = fnv1a64_extend(h, s.as_bytes());
            h = fnv1a64_extend(h, &[0x1f]);
        };
        for l in &self.levels {
            feed(&l.id.to_string());
            feed(&l.name);
        }
        for m in &self.mechanisms {
            feed(&m.id);
            feed(&m.name);
            feed(&m.level_id.to_string());
            feed(&m.definition);
            feed(&m.pattern_description);
            m.exemplars.iter().for_each(|e| feed(e));
        }
        for i in &self.indicators {
            feed(&i.id);
            feed(&i.mechanism_id);
            feed(&i.statement);
        }
        format!("{:016x}", mix64(h))
    }
}

/// Everything a generation prompt needs to describe one target defense.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseDefinition {
    pub level: Label,
    pub level_name: String,
    pub mechanism_name: String,
    pub definition: String,
    pub pattern_description: String,
    pub exemplars: Vec<String>,
}

/// Non-clinical definitions for the labels without DMRS items (0 and 8).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupplementaryDefinitions {
    #[serde(default)]
    pub note: String,
    pub definitions: Vec<DefenseDefinition>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("definition for {mechanism} has {found} exemplars, need at least {MIN_EXEMPLARS}")]
    TooFewExemplars { mechanism: String, found: usize },
    #[error("no generation definition available for label {0}")]
    NoDefinition(Label),
    #[error("supplementary definitions may only cover labels 0 and 8, found {0}")]
    NotSupplementary(Label),
    #[error("label 7 is never augmented")]
    MajorityLabel,
    #[error("no seed instances to anchor generation")]
    NoSeeds,
    #[error("reply had no utterance after stripping")]
    EmptyReply,
    #[error("label {label}: produced {produced} of {target} samples in {calls} calls (budget exhausted)")]
    Shortfall {
        label: Label,
        produced: usize,
        target: usize,
        calls: usize,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl SupplementaryDefinitions {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for d in &self.definitions {
            if d.level.is_dmrs_level() {
                return Err(AugmentError::NotSupplementary(d.level));
            }
            if d.exemplars.len() < MIN_EXEMPLARS {
                return Err(AugmentError::TooFewExemplars {
                    mechanism: d.mechanism_name.clone(),
                    found: d.exemplars.len(),
                });
            }
        }
        Ok(())
    }
}

/// Resolve the generation definitions for a label: the catalog for levels
/// 1..=7, the supplementary file for 0 and 8.
pub fn definitions_for(
    label: Label,
    catalog: &DmrsCatalog,
    supplementary: &SupplementaryDefinitions,
) -> Result<Vec<DefenseDefinition>, AugmentError> {
    let defs: Vec<DefenseDefinition> = if label.is_dmrs_level() {
        catalog.definitions_for_level(label)
    } else {
        supplementary
            .definitions
            .iter()
            .filter(|d| d.level == label)
            .cloned()
            .collect()
    };
    if defs.is_empty() {
        Err(AugmentError::NoDefinition(label))
    } else {
        Ok(defs)
    }
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapBasis {
    /// Real plus synthetic is capped at `n`.
    #[default]
    Total,
    /// Synthetic alone is `n`.
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationStrategy {
    TimesK(u32),
    Cap { n: u32, basis: CapBasis },
}

impl fmt::Display for AugmentationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationStrategy::TimesK(k) => write!(f, "x{k}"),
            AugmentationStrategy::Cap { n, basis: CapBasis::Total } => write!(f, "cap:{n}"),
            AugmentationStrategy::Cap { n, basis: CapBasis::Synthetic } => {
                write!(f, "cap:{n}:synthetic")
            }
        }
    }
}

/// Accepts `x8`, `×8`, `cap:500`, `cap:500:total`, `cap:500:synthetic`.
impl FromStr for AugmentationStrategy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AugmentError::InvalidStrategy(s.to_string());
        let s = s.trim();
        if let Some(k) = s.strip_prefix('x').or_else(|| s.strip_prefix('×')) {
            return k.parse().map(AugmentationStrategy::TimesK).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("cap:") {
            let mut parts = rest.split(':');
            let n = parts.next().and_then(|n| n.parse().ok()).ok_or_else(bad)?;
            let basis = match parts.next() {
                None | Some("total") => CapBasis::Total,
                Some("synthetic") => CapBasis::Synthetic,
                Some(_) => return Err(bad()),
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            return Ok(AugmentationStrategy::Cap { n, basis });
        }
        Err(bad())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub strategy: AugmentationStrategy,
    pub per_class_synthetic_target: [usize; NUM_LABELS],
}

impl AugmentationPlan {
    pub fn target(&self, label: Label) -> usize {
        self.per_class_synthetic_target[label.index()]
    }

    pub fn total_synthetic(&self) -> usize {
        self.per_class_synthetic_target.iter().sum()
    }
}

/// Per-class synthetic targets. The majority label always gets zero.
///
/// `x k` expands each class to `k` times its original size (synthetic is
/// `(k - 1) * original`); `cap:n` tops each class up to `n` total, or with the
/// synthetic basis generates `n` synthetic samples per class.
pub fn plan_augmentation(
    counts: &ClassCounts,
    strategy: AugmentationStrategy,
) -> Result<AugmentationPlan, AugmentError> {
    match strategy {
        AugmentationStrategy::TimesK(0) => {
            return Err(AugmentError::InvalidStrategy("k must be >= 1".into()))
        }
        AugmentationStrategy::Cap { n: 0, .. } => {
            return Err(AugmentError::InvalidStrategy("n must be >= 1".into()))
        }
        _ => {}
    }
    let mut targets = [0usize; NUM_LABELS];
    for (label, original) in counts.iter() {
        if label == MAJORITY_LABEL {
            continue;
        }
        targets[label.index()] = match strategy {
            AugmentationStrategy::TimesK(k) => (k as usize - 1) * original,
            AugmentationStrategy::Cap {
                n,
                basis: CapBasis::Total,
            } => (n as usize).saturating_sub(original),
            AugmentationStrategy::Cap {
                n,
                basis: CapBasis::Synthetic,
            } => n as usize,
        };
    }
    Ok(AugmentationPlan {
        strategy,
        per_class_synthetic_target: targets,
    })
}

// ---------------------------------------------------------------------------
// Prompting and parsing
// ---------------------------------------------------------------------------

/// The `{stressor}` slot: `category: description`, or the category alone.
pub fn stressor_slot(stressor: &StressorRecord) -> String {
    if stressor.description.trim().is_empty() {
        stressor.category.clone()
    } else {
        format!("{}: {}", stressor.category, stressor.description)
    }
}

pub fn build_generation_prompt(
    stressor: &StressorRecord,
    history: &str,
    def: &DefenseDefinition,
) -> Result<String, AugmentError> {
    if def.exemplars.len() < MIN_EXEMPLARS {
        return Err(AugmentError::TooFewExemplars {
            mechanism: def.mechanism_name.clone(),
            found: def.exemplars.len(),
        });
    }
    let slot = stressor_slot(stressor);
    let level = def.level.to_string();
    Ok(template::render(
        GENERATION_TEMPLATE,
        &[
            ("stressor", &slot),
            ("history", history),
            ("mechanism_name", &def.mechanism_name),
            ("level", &level),
            ("definition", &def.definition),
            ("pattern_description", &def.pattern_description),
            ("example_1", &def.exemplars[0]),
            ("example_2", &def.exemplars[1]),
            ("example_3", &def.exemplars[2]),
        ],
    ))
}

fn strip_list_marker(line: &str) -> &str {
    let s = line.trim_start();
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = s[digits..].strip_prefix(['.', ')', ':']) {
            return rest.trim_start();
        }
    }
    s.strip_prefix("- ")
        .or_else(|| s.strip_prefix("* "))
        .or_else(|| s.strip_prefix("\u{2022} "))
        .unwrap_or(s)
}

fn strip_quotes(s: &str) -> &str {
    const QUOTES: [char; 5] = ['"', '\'', '\u{201c}', '\u{201d}', '`'];
    let mut s = s.trim();
    while let Some(first) = s.chars().next() {
        let last = s.chars().last().unwrap_or(first);
        if s.chars().count() >= 2 && QUOTES.contains(&first) && QUOTES.contains(&last) {
            s = s[first.len_utf8()..s.len() - last.len_utf8()].trim();
        } else {
            break;
        }
    }
    s
}

/// First utterance line of a reply after removing fences, numbering and quotes.
pub fn parse_generation_reply(reply: &str) -> Result<String, AugmentError> {
    reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with("```"))
        .map(|l| strip_quotes(strip_list_marker(l)))
        .find(|l| !l.is_empty())
        .map(ToString::to_string)
        .ok_or(AugmentError::EmptyReply)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Real-dialogue context a synthetic sample is anchored on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInstance {
    pub stressor: StressorRecord,
    pub history: String,
    pub dialogue_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub text: String,
    pub intended_label: Label,
    pub mechanism_name: String,
    pub stressor: StressorRecord,
    pub source_dialogue_id: String,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc: Option<QcVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub params: GenerationParams,
    /// Gateway calls allowed per requested sample.
    pub budget_factor: f64,
    pub round: u32,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            params: GenerationParams::default(),
            budget_factor: 1.5,
            round: 0,
        }
    }
}

impl BatchOptions {
    pub fn call_budget(&self, target: usize) -> usize {
        libm::ceil(target as f64 * self.budget_factor.max(1.0)) as usize
    }
}

/// Outcome of [`generate_class_batch`], including the number of gateway calls.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBatch {
    pub samples: Vec<SyntheticSample>,
    pub calls: usize,
    pub unparseable: usize,
}

/// Generate exactly `target` samples for `label`, cycling over seed
/// instances and definitions with one gateway call per sample.
///
/// Each call gets a distinct seed derived from the base seed, the label,
/// the round and the call index, so reruns are reproducible.
pub fn generate_class_batch<G: Generator + ?Sized>(
    label: Label,
    target: usize,
    seeds: &[SeedInstance],
    definitions: &[DefenseDefinition],
    gateway: &G,
    options: &BatchOptions,
) -> Result<ClassBatch, AugmentError> {
    if label == MAJORITY_LABEL && target > 0 {
        return Err(AugmentError::MajorityLabel);
    }
    let mut batch = ClassBatch {
        samples: Vec::with_capacity(target),
        calls: 0,
        unparseable: 0,
    };
    if target == 0 {
        return Ok(batch);
    }
    if seeds.is_empty() {
        return Err(AugmentError::NoSeeds);
    }
    if definitions.is_empty() {
        return Err(AugmentError::NoDefinition(label));
    }
    let budget = options.call_budget(target);
    let base = options.params.seed.unwrap_or(0);
    while batch.samples.len() < target {
        if batch.calls >= budget {
            return Err(AugmentError::Shortfall {
                label,
                produced: batch.samples.len(),
                target,
                calls: batch.calls,
            });
        }
        let i = batch.calls;
        let seed = &seeds[i % seeds.len()];
        let def = &definitions[i % definitions.len()];
        let prompt = build_generation_prompt(&seed.stressor, &seed.history, def)?;
        let call_seed = mix64(
            base ^ mix64((label.get() as u64) << 48 | (options.round as u64) << 32 | i as u64),
        );
        let reply = gateway.complete(&prompt, &options.params.with_seed(call_seed))?;
        batch.calls += 1;
        match parse_generation_reply(&reply) {
            Ok(text) => batch.samples.push(SyntheticSample {
                text,
                intended_label: label,
                mechanism_name: def.mechanism_name.clone(),
                stressor: seed.stressor.clone(),
                source_dialogue_id: seed.dialogue_id.clone(),
                round: options.round,
                qc: None,
            }),
            Err(_) => batch.unparseable += 1,
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::StubGenerator;
    use alloc::vec;

    pub(crate) fn mini_catalog() -> DmrsCatalog {
        serde_json::from_str(include_str!("../../../data/dmrs_catalog.json")).unwrap()
    }

    fn raw() -> (Vec<DefenseLevel>, Vec<Mechanism>, Vec<Indicator>) {
        let c = mini_catalog();
        (c.levels, c.mechanisms, c.indicators)
    }

    fn stressor() -> StressorRecord {
        StressorRecord {
            category: "Job Loss".into(),
            description: "The seeker was laid off.".into(),
            dialogue_id: "d1".into(),
            turn_index: 3,
        }
    }

    #[test]
    fn shipped_catalog_loads() {
        let c = mini_catalog();
        assert_eq!(c.mechanisms().len(), 30);
        assert_eq!(c.indicators().len(), 150);
        assert_eq!(c.levels().len(), 7);
        assert_eq!(c.fingerprint(), mini_catalog().fingerprint());
    }

    #[test]
    fn catalog_cardinality_and_references() {
        let (l, m, mut i) = raw();
        i.pop();
        let err = DmrsCatalog::new(l, m, i).unwrap_err();
        assert_eq!(
            err,
            CatalogError::WrongCount {
                what: "indicators",
                expected: 150,
                found: 149
            }
        );
        assert!(format!("{err}").contains("expected 150"));

        let (l, m, mut i) = raw();
        i[3].mechanism_id = "nope".into();
        assert!(matches!(
            DmrsCatalog::new(l, m, i),
            Err(CatalogError::DanglingMechanism { .. })
        ));

        let (l, mut m, i) = raw();
        m[0].level_id = 9;
        assert!(matches!(
            DmrsCatalog::new(l, m, i),
            Err(CatalogError::DanglingLevel { level: 9, .. })
        ));

        // move every Action mechanism to level 2: level 1 becomes empty
        let (l, mut m, i) = raw();
        m.iter_mut().filter(|m| m.level_id == 1).for_each(|m| m.level_id = 2);
        assert_eq!(DmrsCatalog::new(l, m, i), Err(CatalogError::EmptyLevel(1)));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let (l, m, mut i) = raw();
        i[0].statement.push('!');
        let edited = DmrsCatalog::new(l, m, i).unwrap();
        assert_ne!(edited.fingerprint(), mini_catalog().fingerprint());
    }

    #[test]
    fn plan_rules() {
        let mut counts = ClassCounts::default();
        counts.set(Label::new(1).unwrap(), 50);
        counts.set(Label::HIGH_ADAPTIVE, 968);
        counts.set(Label::NEEDS_INFO, 28);

        let p = plan_augmentation(&counts, AugmentationStrategy::TimesK(2)).unwrap();
        assert_eq!(p.target(Label::new(1).unwrap()), 50);
        assert_eq!(p.target(Label::HIGH_ADAPTIVE), 0);

        let cap = "cap:500".parse().unwrap();
        let p = plan_augmentation(&counts, cap).unwrap();
        assert_eq!(p.target(Label::HIGH_ADAPTIVE), 0);
        assert_eq!(p.target(Label::NEEDS_INFO), 472);
        assert_eq!(p.target(Label::new(1).unwrap()), 450);

        let p = plan_augmentation(&counts, "cap:500:synthetic".parse().unwrap()).unwrap();
        assert_eq!(p.target(Label::NEEDS_INFO), 500);
        assert_eq!(p.target(Label::HIGH_ADAPTIVE), 0);

        assert!(plan_augmentation(&counts, AugmentationStrategy::TimesK(0)).is_err());
        assert!(plan_augmentation(&counts, "cap:0".parse().unwrap()).is_err());
    }

    #[test]
    fn strategy_strings() {
        for s in ["x1", "x8", "cap:500", "cap:500:synthetic"] {
            let parsed: AugmentationStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert_eq!("×2".parse::<AugmentationStrategy>().unwrap(), AugmentationStrategy::TimesK(2));
        for bad in ["", "x", "cap:", "cap:5:other", "y3"] {
            assert!(bad.parse::<AugmentationStrategy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn generation_prompt_rendering() {
        let c = mini_catalog();
        let def = &c.definitions_for_level(Label::new(3).unwrap())[0];
        let p = build_generation_prompt(&stressor(), "Seeker: hi", def).unwrap();
        assert!(p.contains("### DEFENSE TO SIMULATE:"));
        assert!(p.contains(&format!("Mechanism: {} (Level 3)", def.mechanism_name)));
        for (i, e) in def.exemplars.iter().take(3).enumerate() {
            assert!(p.contains(&format!("{}. \"{}\"", i + 1, e)));
        }
        assert!(p.contains("STRESSOR: Job Loss: The seeker was laid off."));
        assert!(p.contains(&format!("using the {} defense.", def.mechanism_name)));

        let mut short = def.clone();
        short.exemplars.truncate(2);
        assert!(matches!(
            build_generation_prompt(&stressor(), "", &short),
            Err(AugmentError::TooFewExemplars { found: 2, .. })
        ));
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_generation_reply("\"I'm fine, really.\"").unwrap(), "I'm fine, really.");
        assert_eq!(
            parse_generation_reply("```text\nIt doesn't matter anyway.\n```").unwrap(),
            "It doesn't matter anyway."
        );
        assert_eq!(parse_generation_reply("\n1. \u{201c}First one\u{201d}\n2. second").unwrap(), "First one");
        assert_eq!(parse_generation_reply(" \n\t "), Err(AugmentError::EmptyReply));
        assert_eq!(parse_generation_reply("```\n```"), Err(AugmentError::EmptyReply));
    }

    fn seeds() -> Vec<SeedInstance> {
        (0..3)
            .map(|i| SeedInstance {
                stressor: StressorRecord {
                    turn_index: i,
                    ..stressor()
                },
                history: "Seeker: I got let go.".into(),
                dialogue_id: format!("d{i}"),
            })
            .collect()
    }

    #[test]
    fn batch_generation_contract() {
        let c = mini_catalog();
        let label = Label::new(2).unwrap();
        let defs = c.definitions_for_level(label);
        let g = StubGenerator::new();
        let opts = BatchOptions::default();

        let empty = generate_class_batch(label, 0, &[], &defs, &g, &opts).unwrap();
        assert_eq!((empty.samples.len(), empty.calls), (0, 0));

        let b = generate_class_batch(label, 10, &seeds(), &defs, &g, &opts).unwrap();
        assert_eq!(b.samples.len(), 10);
        assert!(b.samples.iter().all(|s| s.intended_label == label && !s.text.is_empty()));
        assert_eq!(b, generate_class_batch(label, 10, &seeds(), &defs, &g, &opts).unwrap());

        assert_eq!(
            generate_class_batch(Label::HIGH_ADAPTIVE, 1, &seeds(), &defs, &g, &opts),
            Err(AugmentError::MajorityLabel)
        );
    }

    #[test]
    fn batch_generation_with_flaky_replies() {
        let c = mini_catalog();
        let label = Label::new(5).unwrap();
        let defs = c.definitions_for_level(label);
        let g = StubGenerator::with_garbage_rate(0.2);
        let opts = BatchOptions::default();
        assert_eq!(opts.call_budget(10), 15);
        match generate_class_batch(label, 10, &seeds(), &defs, &g, &opts) {
            Ok(b) => {
                assert_eq!(b.samples.len(), 10);
                assert!(b.calls <= 15);
                assert_eq!(b.calls, 10 + b.unparseable);
            }
            Err(AugmentError::Shortfall { produced, calls, .. }) => {
                assert!(produced < 10);
                assert_eq!(calls, 15);
            }
            Err(e) => panic!("unexpected {e}"),
        }
        let always_bad = StubGenerator::with_garbage_rate(1.0);
        assert_eq!(
            generate_class_batch(label, 4, &seeds(), &defs, &always_bad, &opts),
            Err(AugmentError::Shortfall {
                label,
                produced: 0,
                target: 4,
                calls: 6
            })
        );
    }

    #[test]
    fn supplementary_definitions_cover_zero_and_eight() {
        let sup: SupplementaryDefinitions =
            serde_json::from_str(include_str!("../../../data/supplementary_definitions.json")).unwrap();
        sup.validate().unwrap();
        let c = mini_catalog();
        assert_eq!(definitions_for(Label::NO_DEFENSE, &c, &sup).unwrap()[0].mechanism_name, "No Defense");
        assert_eq!(definitions_for(Label::new(6).unwrap(), &c, &sup).unwrap().len(), 3);
        let empty = SupplementaryDefinitions { note: String::new(), definitions: vec![] };
        assert_eq!(
            definitions_for(Label::NEEDS_INFO, &c, &empty),
            Err(AugmentError::NoDefinition(Label::NEEDS_INFO))
        );
    }
}

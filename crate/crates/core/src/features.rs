//! Per-turn features: linguistic heuristics and the DMRS defense profile.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::DmrsCatalog;
use crate::backends::{BackendError, EmotionResult, EmotionScorer, NliScorer};
use crate::text::tokenize;
use crate::Label;

pub const HEURISTIC_DIM: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("expected {expected} indicator scores, got {found}")]
    Misaligned { expected: usize, found: usize },
    #[error("turn text is empty")]
    EmptyText,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    /// Stems; a token counts as insight when it starts with one of them.
    pub insight_lexicon: Vec<String>,
    pub first_person: Vec<String>,
    /// Whole-utterance fillers (normalized tokens joined by single spaces).
    pub filler_lexicon: Vec<String>,
    pub insight_threshold: f64,
    pub pronoun_threshold: f64,
    /// Mature coping needs strictly more tokens than this.
    pub length_trigger: usize,
    pub phatic_max_tokens: usize,
    pub length_cap: usize,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            insight_lexicon: strings(&[
                "realize", "understand", "reason", "because", "think", "know", "learn", "reflect",
                "aware", "meant",
            ]),
            first_person: strings(&["i", "me", "my", "mine", "myself", "i'm", "i've", "i'd", "i'll"]),
            filler_lexicon: strings(&[
                "ok", "okay", "ok thanks", "okay thanks", "thanks", "thank you", "thank you so much",
                "thanks a lot", "yes", "yeah", "no", "sure", "hmm", "i see", "alright", "got it",
                "that makes sense", "i guess so", "maybe", "right",
            ]),
            insight_threshold: 0.08,
            pronoun_threshold: 0.06,
            length_trigger: 12,
            phatic_max_tokens: 3,
            length_cap: 64,
        }
    }
}

/// `[length_norm, i_pronoun_density, insight_density, phatic_flag,
/// mature_coping_flag, emotion_nonneutral_flag, emotion_intensity]`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeuristicFeatures(pub [f64; HEURISTIC_DIM]);

impl HeuristicFeatures {
    pub fn length_norm(&self) -> f64 {
        self.0[0]
    }
    pub fn i_pronoun_density(&self) -> f64 {
        self.0[1]
    }
    pub fn insight_density(&self) -> f64 {
        self.0[2]
    }
    pub fn phatic(&self) -> bool {
        self.0[3] == 1.0
    }
    pub fn mature_coping(&self) -> bool {
        self.0[4] == 1.0
    }
    pub fn emotion_nonneutral(&self) -> bool {
        self.0[5] == 1.0
    }
    pub fn emotion_intensity(&self) -> f64 {
        self.0[6]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_heuristics(
    text: &str,
    emotion: &EmotionResult,
    config: &HeuristicConfig,
) -> HeuristicFeatures {
    let tokens = tokenize(text);
    let n = tokens.len();
    let density = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };

    let pronouns = tokens
        .iter()
        .filter(|t| config.first_person.iter().any(|p| p == *t))
        .count();
    let insight = tokens
        .iter()
        .filter(|t| config.insight_lexicon.iter().any(|stem| t.starts_with(stem.as_str())))
        .count();
    let i_density = density(pronouns);
    let insight_density = density(insight);
    let joined = tokens.join(" ");
    let phatic = n <= config.phatic_max_tokens || config.filler_lexicon.contains(&joined);
    let mature = n > config.length_trigger
        && insight_density >= config.insight_threshold
        && i_density >= config.pronoun_threshold;
    let nonneutral = !emotion.is_neutral;
    let intensity = if nonneutral {
        emotion.confidence.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    HeuristicFeatures([
        n.min(config.length_cap) as f64 / config.length_cap.max(1) as f64,
        i_density,
        insight_density,
        flag(phatic),
        flag(mature),
        flag(nonneutral),
        intensity,
    ])
}

/// One entailment probability per catalog indicator, catalog order.
pub fn score_indicators<N: NliScorer + ?Sized>(
    text: &str,
    catalog: &DmrsCatalog,
    nli: &N,
) -> Result<Vec<f64>, FeatureError> {
    if text.trim().is_empty() {
        return Err(FeatureError::EmptyText);
    }
    let hypotheses: Vec<&str> = catalog
        .indicators()
        .iter()
        .map(|i| i.statement.as_str())
        .collect();
    let scores = nli.entail_batch(text, &hypotheses)?;
    if scores.len() != hypotheses.len() {
        return Err(FeatureError::Misaligned {
            expected: hypotheses.len(),
            found: scores.len(),
        });
    }
    Ok(scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect())
}

/// Mean indicator score per mechanism, catalog mechanism order.
pub fn mechanism_means(indicator_scores: &[f64], catalog: &DmrsCatalog) -> Result<Vec<f64>, FeatureError> {
    let expected = catalog.indicators().len();
    if indicator_scores.len() != expected {
        return Err(FeatureError::Misaligned {
            expected,
            found: indicator_scores.len(),
        });
    }
    let k = catalog.mechanisms().len();
    let mut sums = alloc::vec![0.0; k];
    let mut counts = alloc::vec![0usize; k];
    for (j, &s) in indicator_scores.iter().enumerate() {
        let m = catalog.indicator_mechanism(j);
        sums[m] += s;
        counts[m] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// L1-normalized mechanism scores, aligned with catalog mechanism order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DefenseProfile(pub Vec<f64>);

impl DefenseProfile {
    /// Normalize raw non-negative mechanism mass; all-zero mass becomes uniform.
    pub fn from_mass(mass: &[f64]) -> Self {
        let total: f64 = mass.iter().map(|m| m.max(0.0)).sum();
        if total > 0.0 {
            DefenseProfile(mass.iter().map(|m| m.max(0.0) / total).collect())
        } else {
            let u = 1.0 / mass.len().max(1) as f64;
            DefenseProfile(alloc::vec![u; mass.len()])
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn aggregate_mechanisms(
    indicator_scores: &[f64],
    catalog: &DmrsCatalog,
) -> Result<DefenseProfile, FeatureError> {
    Ok(DefenseProfile::from_mass(&mechanism_means(indicator_scores, catalog)?))
}

/// Level whose mechanisms carry the most profile mass; ties go to the
/// lowest level id.
pub fn dmrs_level(profile: &DefenseProfile, catalog: &DmrsCatalog) -> Label {
    let mut sums = [0.0f64; 8];
    for (k, &s) in profile.0.iter().enumerate().take(catalog.mechanisms().len()) {
        sums[catalog.mechanism_level_id(k) as usize] += s;
    }
    let mut best = 1usize;
    for level in 2..=7 {
        if sums[level] > sums[best] {
            best = level;
        }
    }
    Label::new(best as u8).unwrap_or(Label::NO_DEFENSE)
}

/// `[Stressor:S|Turn:T]`
pub fn format_input_text(stressor_category: &str, turn_text: &str) -> String {
    format!("[Stressor:{stressor_category}|Turn:{turn_text}]")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// Provenance, e.g. `dialogue#turn` or `synthetic:<label>:<round>:<n>`.
    pub id: String,
    pub input_text: String,
    pub heuristics: HeuristicFeatures,
    pub profile: DefenseProfile,
    /// Mean entailment per mechanism before normalization.
    pub mechanism_entailment: Vec<f64>,
    pub token_count: usize,
    #[serde(default)]
    pub label: Option<Label>,
}

/// Compute every feature for one utterance.
pub fn build_feature_row<N, E>(
    id: impl Into<String>,
    text: &str,
    label: Option<Label>,
    stressor_category: &str,
    catalog: &DmrsCatalog,
    nli: &N,
    emotion: &E,
    config: &HeuristicConfig,
) -> Result<FeatureRow, FeatureError>
where
    N: NliScorer + ?Sized,
    E: EmotionScorer + ?Sized,
{
    if text.trim().is_empty() {
        return Err(FeatureError::EmptyText);
    }
    let emotion = emotion.score(text)?;
    let heuristics = extract_heuristics(text, &emotion, config);
    let indicator_scores = score_indicators(text, catalog, nli)?;
    let means = mechanism_means(&indicator_scores, catalog)?;
    Ok(FeatureRow {
        id: id.into(),
        input_text: format_input_text(stressor_category, text),
        heuristics,
        profile: DefenseProfile::from_mass(&means),
        mechanism_entailment: means,
        token_count: tokenize(text).len(),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{StubEmotion, StubNli};
    use alloc::vec;

    fn catalog() -> DmrsCatalog {
        serde_json::from_str(include_str!("../../../data/dmrs_catalog.json")).unwrap()
    }

    fn neutral() -> EmotionResult {
        EmotionResult::new("neutral", 0.7)
    }

    #[test]
    fn phatic_short_turn() {
        let h = extract_heuristics("ok", &neutral(), &HeuristicConfig::default());
        assert!(h.phatic());
        assert!(!h.mature_coping());
        assert_eq!(h.emotion_intensity(), 0.0);
        assert_eq!(h.length_norm(), 1.0 / 64.0);
    }

    #[test]
    fn mature_coping_by_hand() {
        let text = "I think I failed because I never really understood what I wanted from this job at all";
        let h = extract_heuristics(text, &EmotionResult::new("sadness", 0.8), &HeuristicConfig::default());
        // 17 tokens, 4 first-person, 2 insight stems (think, because)
        assert_eq!(h.i_pronoun_density(), 4.0 / 17.0);
        assert_eq!(h.insight_density(), 2.0 / 17.0);
        assert!(h.mature_coping());
        assert!(!h.phatic());
        assert_eq!(h.emotion_intensity(), 0.8);
        assert!(h.emotion_nonneutral());
    }

    #[test]
    fn degenerate_inputs_stay_in_range() {
        let h = extract_heuristics("I I I", &neutral(), &HeuristicConfig::default());
        assert_eq!(h.i_pronoun_density(), 1.0);
        let h = extract_heuristics("?!", &neutral(), &HeuristicConfig::default());
        assert_eq!(h.0, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let h = extract_heuristics("thank you so much for everything", &neutral(), &HeuristicConfig::default());
        assert!(!h.phatic());
        let h = extract_heuristics("Thank you so much!", &neutral(), &HeuristicConfig::default());
        assert!(h.phatic());
    }

    #[test]
    fn indicator_scores_shape_and_copy_is_max() {
        let c = catalog();
        let stmt = c.indicators()[42].statement.clone();
        let s = score_indicators(&stmt, &c, &StubNli).unwrap();
        assert_eq!(s.len(), c.indicators().len());
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(s[42], max);
        assert_eq!(score_indicators(" ", &c, &StubNli), Err(FeatureError::EmptyText));
    }

    #[test]
    fn aggregation_edge_cases() {
        let c = catalog();
        let p = aggregate_mechanisms(&vec![0.3; 150], &c).unwrap();
        assert!(p.0.iter().all(|&v| (v - 1.0 / 30.0).abs() < 1e-15));
        let p = aggregate_mechanisms(&vec![0.0; 150], &c).unwrap();
        assert!(p.0.iter().all(|&v| v == 1.0 / 30.0));

        let mut s = vec![0.0; 150];
        for (j, v) in s.iter_mut().enumerate() {
            if c.indicator_mechanism(j) == 4 {
                *v = 0.9;
            }
        }
        let p = aggregate_mechanisms(&s, &c).unwrap();
        for (k, &v) in p.0.iter().enumerate() {
            assert_eq!(v, if k == 4 { 1.0 } else { 0.0 });
        }
        assert_eq!(
            aggregate_mechanisms(&[0.1; 3], &c),
            Err(FeatureError::Misaligned { expected: 150, found: 3 })
        );
    }

    #[test]
    fn level_mapping() {
        let c = catalog();
        let k7 = (0..30).find(|&k| c.mechanism_level_id(k) == 7).unwrap();
        let mut one_hot = vec![0.0; 30];
        one_hot[k7] = 1.0;
        assert_eq!(dmrs_level(&DefenseProfile(one_hot), &c).get(), 7);

        // equal per-level mass: each level gets 1/7 spread over its mechanisms
        let mut per_level = [0usize; 8];
        (0..30).for_each(|k| per_level[c.mechanism_level_id(k) as usize] += 1);
        let equal: Vec<f64> = (0..30)
            .map(|k| 1.0 / 7.0 / per_level[c.mechanism_level_id(k) as usize] as f64)
            .collect();
        let lvl = dmrs_level(&DefenseProfile(equal), &c);
        // float sums may differ in the last bit; the winner must be a level
        // whose sum is maximal, and exact ties resolve to level 1
        assert!(lvl.is_dmrs_level());
        let tie = vec![0.0; 30];
        assert_eq!(dmrs_level(&DefenseProfile(tie), &c).get(), 1);
    }

    #[test]
    fn feature_row_format_and_shapes() {
        assert_eq!(format_input_text("job loss", "I am fine"), "[Stressor:job loss|Turn:I am fine]");
        let c = catalog();
        let row = build_feature_row(
            "d#1",
            "I am fine",
            Label::new(3),
            "Unspecified",
            &c,
            &StubNli,
            &StubEmotion,
            &HeuristicConfig::default(),
        )
        .unwrap();
        assert_eq!(row.input_text, "[Stressor:Unspecified|Turn:I am fine]");
        assert_eq!(row.heuristics.0.len(), 7);
        assert_eq!(row.profile.0.len(), 30);
        assert!((row.profile.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(row.token_count, 3);
    }
}

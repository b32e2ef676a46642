//! Classification metrics, sink analysis and dialogue analytics.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::DmrsCatalog;
use crate::corpus::Dialogue;
use crate::features::FeatureRow;
use crate::{Label, NUM_LABELS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("predictions and gold labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("label {0} is outside 0..=8")]
    OutOfRange(u8),
    #[error("need at least 2 seeker turns, found {0}")]
    TooFewSeekerTurns(usize),
}

pub type Confusion = [[usize; NUM_LABELS]; NUM_LABELS];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][pred]`
    pub confusion: Confusion,
    pub confusion_row_norm: [[f64; NUM_LABELS]; NUM_LABELS],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus per-class and macro P/R/F1 over all nine labels.
///
/// Undefined ratios are 0, and classes without support still count in the
/// macro average.
pub fn evaluate(preds: &[u8], golds: &[u8]) -> Result<MetricsReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = [[0usize; NUM_LABELS]; NUM_LABELS];
    for (&p, &g) in preds.iter().zip(golds) {
        for l in [p, g] {
            if l as usize >= NUM_LABELS {
                return Err(EvalError::OutOfRange(l));
            }
        }
        confusion[g as usize][p as usize] += 1;
    }
    Ok(report_from_confusion(confusion))
}

pub fn evaluate_labels(preds: &[Label], golds: &[Label]) -> Result<MetricsReport, EvalError> {
    let p: Vec<u8> = preds.iter().map(|l| l.get()).collect();
    let g: Vec<u8> = golds.iter().map(|l| l.get()).collect();
    evaluate(&p, &g)
}

pub fn report_from_confusion(confusion: Confusion) -> MetricsReport {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..NUM_LABELS).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(NUM_LABELS);
    let mut row_norm = [[0.0; NUM_LABELS]; NUM_LABELS];
    for c in 0..NUM_LABELS {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..NUM_LABELS).map(|g| confusion[g][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
        for p in 0..NUM_LABELS {
            row_norm[c][p] = ratio(confusion[c][p], support);
        }
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_LABELS as f64;
    MetricsReport {
        accuracy: ratio(correct, total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion,
        confusion_row_norm: row_norm,
    }
}

/// Macro-F1 alone, used for early stopping.
pub fn macro_f1(preds: &[Label], golds: &[Label]) -> Result<f64, EvalError> {
    evaluate_labels(preds, golds).map(|r| r.macro_f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkAnalysis {
    pub sink_label: u8,
    /// Errors of each gold class predicted as the sink (0 for the sink itself).
    pub absorbed: [usize; NUM_LABELS],
    pub support: [usize; NUM_LABELS],
    /// `absorbed / support` per gold class, absent without support.
    pub absorbed_ratio: [Option<f64>; NUM_LABELS],
    pub total_errors: usize,
    pub sink_errors: usize,
    /// Share of all off-diagonal mass that lands in the sink column.
    pub sink_share: Option<f64>,
}

pub fn sink_analysis(confusion: &Confusion, sink_label: Label) -> SinkAnalysis {
    let s = sink_label.index();
    let mut absorbed = [0usize; NUM_LABELS];
    let mut support = [0usize; NUM_LABELS];
    let mut absorbed_ratio = [None; NUM_LABELS];
    let mut total_errors = 0;
    for g in 0..NUM_LABELS {
        support[g] = confusion[g].iter().sum();
        total_errors += support[g] - confusion[g][g];
        if g != s {
            absorbed[g] = confusion[g][s];
        }
        if support[g] > 0 {
            absorbed_ratio[g] = Some(absorbed[g] as f64 / support[g] as f64);
        }
    }
    let sink_errors = absorbed.iter().sum();
    SinkAnalysis {
        sink_label: sink_label.get(),
        absorbed,
        support,
        absorbed_ratio,
        total_errors,
        sink_errors,
        sink_share: (total_errors > 0).then(|| sink_errors as f64 / total_errors as f64),
    }
}

// ---------------------------------------------------------------------------
// Dialogue analytics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub turn_index: usize,
    pub label: Label,
}

/// Labeled seeker turns in order.
pub fn defense_trajectory(dialogue: &Dialogue) -> Vec<TrajectoryPoint> {
    dialogue
        .labeled_seeker_turns()
        .map(|(t, label)| TrajectoryPoint {
            turn_index: t.index,
            label,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// `|Δlabel|`, at least 1.
    pub magnitude: u8,
    /// Turns between the two labeled points.
    pub turn_gap: usize,
    /// Levels per turn: `magnitude / turn_gap`.
    pub speed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub pairs: Vec<Transition>,
    /// Pearson r of (magnitude, speed); absent with < 2 pairs or zero variance.
    pub pearson_r: Option<f64>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn transition_stats(trajectories: &[Vec<TrajectoryPoint>]) -> TransitionStats {
    let mut pairs = Vec::new();
    for traj in trajectories {
        for w in traj.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.label == b.label {
                continue;
            }
            let magnitude = a.label.get().abs_diff(b.label.get());
            let turn_gap = b.turn_index.saturating_sub(a.turn_index).max(1);
            pairs.push(Transition {
                magnitude,
                turn_gap,
                speed: magnitude as f64 / turn_gap as f64,
            });
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.magnitude as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.speed).collect();
    TransitionStats {
        pearson_r: pearson(&xs, &ys),
        pairs,
    }
}

/// Per-seeker-turn signals feeding the disclosure index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisclosureSignals {
    pub turn_index: usize,
    pub token_count: usize,
    pub i_pronoun_density: f64,
    pub emotion_intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdiComponent {
    TokenCount,
    IPronounDensity,
    EmotionIntensity,
}

impl CdiComponent {
    pub const ALL: [CdiComponent; 3] = [
        CdiComponent::TokenCount,
        CdiComponent::IPronounDensity,
        CdiComponent::EmotionIntensity,
    ];

    fn value(self, s: &DisclosureSignals) -> f64 {
        match self {
            CdiComponent::TokenCount => s.token_count as f64,
            CdiComponent::IPronounDensity => s.i_pronoun_density,
            CdiComponent::EmotionIntensity => s.emotion_intensity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdiPoint {
    pub turn_index: usize,
    /// Position among seeker turns over the last position, in `[0, 1]`.
    pub progress: f64,
    pub cdi: f64,
}

/// Population z-scores; all zeros when the variance vanishes.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) * 1e-3 {
        return alloc::vec![0.0; values.len()];
    }
    let sd = libm::sqrt(var);
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Composite disclosure index: mean of within-dialogue z-scores of the
/// chosen components, one point per seeker turn.
pub fn cdi_curve(
    signals: &[DisclosureSignals],
    components: &[CdiComponent],
) -> Result<Vec<CdiPoint>, EvalError> {
    if signals.len() < 2 {
        return Err(EvalError::TooFewSeekerTurns(signals.len()));
    }
    let mut cdi = alloc::vec![0.0; signals.len()];
    if !components.is_empty() {
        for c in components {
            let values: Vec<f64> = signals.iter().map(|s| c.value(s)).collect();
            for (acc, z) in cdi.iter_mut().zip(z_scores(&values)) {
                *acc += z;
            }
        }
        cdi.iter_mut().for_each(|v| *v /= components.len() as f64);
    }
    let last = (signals.len() - 1) as f64;
    Ok(signals
        .iter()
        .zip(cdi)
        .enumerate()
        .map(|(i, (s, cdi))| CdiPoint {
            turn_index: s.turn_index,
            progress: i as f64 / last,
            cdi,
        })
        .collect())
}

/// First seeker turn whose disclosure index exceeds `threshold_z`.
pub fn opening_up_turn(points: &[CdiPoint], threshold_z: f64) -> Option<usize> {
    points
        .iter()
        .find(|p| p.cdi > threshold_z)
        .map(|p| p.turn_index)
}

/// Response times grouped by gold label; every label present.
pub fn latency_by_label(dialogues: &[Dialogue]) -> [Vec<f64>; NUM_LABELS] {
    let mut out: [Vec<f64>; NUM_LABELS] = Default::default();
    for (turn, label) in dialogues.iter().flat_map(Dialogue::labeled_seeker_turns) {
        if let Some(t) = turn.response_time_s {
            out[label.index()].push(t);
        }
    }
    out
}

/// Population variance, absent for an empty slice.
pub fn variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSize {
    pub dialogue_id: String,
    pub turns: usize,
    pub tokens: usize,
}

pub fn dialogue_sizes(dialogues: &[Dialogue]) -> Vec<DialogueSize> {
    dialogues
        .iter()
        .map(|d| DialogueSize {
            dialogue_id: d.id.clone(),
            turns: d.turns.len(),
            tokens: d
                .turns
                .iter()
                .map(|t| crate::text::tokenize(&t.text).len())
                .sum(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismActivation {
    pub label: Label,
    pub mechanism_id: String,
    pub mechanism_name: String,
    pub rows: usize,
    /// Mean entailment over rows of this class.
    pub mean: f64,
    /// Mean natural-log entailment, floored at `ln(1e-6)`.
    pub mean_log: f64,
}

pub const LOG_FLOOR: f64 = 1e-6;

/// Per gold class and mechanism: mean raw and mean log entailment.
pub fn mechanism_activations(rows: &[FeatureRow], catalog: &DmrsCatalog) -> Vec<MechanismActivation> {
    let k = catalog.mechanisms().len();
    let mut out = Vec::new();
    for label in Label::all() {
        let class_rows: Vec<&FeatureRow> = rows.iter().filter(|r| r.label == Some(label)).collect();
        if class_rows.is_empty() {
            continue;
        }
        for (m, mech) in catalog.mechanisms().iter().enumerate().take(k) {
            let n = class_rows.len() as f64;
            let vals = class_rows
                .iter()
                .map(|r| r.mechanism_entailment.get(m).copied().unwrap_or(0.0));
            let (sum, log_sum) = vals.fold((0.0, 0.0), |(s, ls), v| {
                (s + v, ls + libm::log(v.max(LOG_FLOOR)))
            });
            out.push(MechanismActivation {
                label,
                mechanism_id: mech.id.clone(),
                mechanism_name: mech.name.clone(),
                rows: class_rows.len(),
                mean: sum / n,
                mean_log: log_sum / n,
            });
        }
    }
    out
}

//! Report documents and flat plot-data tables.
//!
//! Every writer returns the file names it produced, relative to the target
//! directory, so stage manifests can hash them.

use std::collections::BTreeMap;
use std::path::Path;

use psydef_core::corpus::ClassCounts;
use psydef_core::evaluation::{
    variance, CdiPoint, DialogueSize, MechanismActivation, MetricsReport, SinkAnalysis, TrajectoryPoint,
    TransitionStats,
};
use psydef_core::{Label, NUM_LABELS};
use serde::{Deserialize, Serialize};

use crate::io::{write_json, IoError};

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    IoError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Write a headered comma-separated table.
pub fn write_table<R, I>(path: &Path, header: &[&str], rows: I) -> Result<(), IoError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Os {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| IoError::Os {
        path: path.to_path_buf(),
        source,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn label_name(i: usize) -> &'static str {
    Label::new(i as u8).map(Label::class_name).unwrap_or("")
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MetricsDocument<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    sink: &'a SinkAnalysis,
}

pub fn write_metrics(dir: &Path, report: &MetricsReport, sink: &SinkAnalysis) -> Result<Vec<String>, IoError> {
    write_json(&dir.join("metrics.json"), &MetricsDocument { report, sink })?;

    write_table(
        &dir.join("per_class_metrics.csv"),
        &["label", "class", "precision", "recall", "f1", "support"],
        report.per_class.iter().enumerate().map(|(i, m)| {
            [
                i.to_string(),
                label_name(i).to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
            ]
        }),
    )?;

    let header: Vec<String> = std::iter::once("gold".to_string())
        .chain((0..NUM_LABELS).map(|p| format!("pred_{p}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(
        &dir.join("confusion.csv"),
        &header,
        report.confusion.iter().enumerate().map(|(g, row)| {
            std::iter::once(g.to_string())
                .chain(row.iter().map(ToString::to_string))
                .collect::<Vec<_>>()
        }),
    )?;
    write_table(
        &dir.join("confusion_row_norm.csv"),
        &header,
        report.confusion_row_norm.iter().enumerate().map(|(g, row)| {
            std::iter::once(g.to_string())
                .chain(row.iter().map(ToString::to_string))
                .collect::<Vec<_>>()
        }),
    )?;

    let mut offdiag = Vec::new();
    for (g, row) in report.confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            if g != p && count > 0 {
                offdiag.push([g.to_string(), p.to_string(), count.to_string()]);
            }
        }
    }
    write_table(&dir.join("offdiag_counts.csv"), &["gold", "pred", "count"], offdiag)?;

    Ok(vec![
        "metrics.json".into(),
        "per_class_metrics.csv".into(),
        "confusion.csv".into(),
        "confusion_row_norm.csv".into(),
        "offdiag_counts.csv".into(),
    ])
}

// ---------------------------------------------------------------------------
// Quality control
// ---------------------------------------------------------------------------

/// One row of the per-class diversity and adherence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcClassRow {
    pub class: String,
    pub label: u8,
    /// Generated samples of this class, before gating.
    pub n: usize,
    /// Absent with fewer than two samples.
    pub self_bleu: Option<f64>,
    pub semantic_adherence: Option<f64>,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcBatchRow {
    pub batch: usize,
    pub rounds: Vec<u32>,
    pub size: usize,
    pub self_bleu: Option<f64>,
    pub semantic_adherence: Option<f64>,
    pub kappa: Option<f64>,
    /// `accepted`, `rejected` or `unevaluable`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub kappa_threshold: f64,
    pub annotator: String,
    pub classes: Vec<QcClassRow>,
    /// Means over classes with a value.
    pub mean_self_bleu: Option<f64>,
    pub mean_semantic_adherence: Option<f64>,
    pub batches: Vec<QcBatchRow>,
    pub generated: usize,
    pub accepted: usize,
}

impl QcReport {
    pub fn rejected_batches(&self) -> usize {
        self.batches.iter().filter(|b| b.status != "accepted").count()
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>5} {:>6} {:>8} {:>8}\n",
            "Class", "Label", "N", "SB", "SA"
        ));
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for c in &self.classes {
            s.push_str(&format!(
                "{:<28} {:>5} {:>6} {:>8} {:>8}\n",
                c.class,
                c.label,
                c.n,
                fmt(c.self_bleu),
                fmt(c.semantic_adherence)
            ));
        }
        s.push_str(&format!(
            "{:<28} {:>5} {:>6} {:>8} {:>8}\n",
            "Avg.",
            "",
            "",
            fmt(self.mean_self_bleu),
            fmt(self.mean_semantic_adherence)
        ));
        s.push('\n');
        for b in &self.batches {
            s.push_str(&format!(
                "batch {} (rounds {:?}, {} samples): kappa {} -> {}\n",
                b.batch,
                b.rounds,
                b.size,
                b.kappa.map(|k| format!("{k:.3}")).unwrap_or_else(|| "-".into()),
                b.status
            ));
        }
        s.push_str(&format!(
            "\nkappa threshold {} ({} annotator); accepted {} of {} generated samples\n",
            self.kappa_threshold, self.annotator, self.accepted, self.generated
        ));
        s
    }
}

pub fn write_qc(dir: &Path, report: &QcReport) -> Result<Vec<String>, IoError> {
    write_json(&dir.join("qc_report.json"), report)?;
    write_table(
        &dir.join("qc_table.csv"),
        &["class", "label", "N", "SB", "SA", "accepted"],
        report.classes.iter().map(|c| {
            [
                c.class.clone(),
                c.label.to_string(),
                c.n.to_string(),
                opt(c.self_bleu),
                opt(c.semantic_adherence),
                c.accepted.to_string(),
            ]
        }),
    )?;
    write_table(
        &dir.join("qc_batches.csv"),
        &["batch", "rounds", "size", "SB", "SA", "kappa", "status"],
        report.batches.iter().map(|b| {
            [
                b.batch.to_string(),
                b.rounds.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
                b.size.to_string(),
                opt(b.self_bleu),
                opt(b.semantic_adherence),
                opt(b.kappa),
                b.status.clone(),
            ]
        }),
    )?;
    let summary = dir.join("qc_summary.txt");
    std::fs::write(&summary, report.summary_text()).map_err(|source| IoError::Os { path: summary, source })?;
    Ok(vec![
        "qc_report.json".into(),
        "qc_table.csv".into(),
        "qc_batches.csv".into(),
        "qc_summary.txt".into(),
    ])
}

// ---------------------------------------------------------------------------
// Dialogue analytics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Analysis {
    pub class_distribution: ClassCounts,
    /// Per dialogue, in dialogue id order.
    pub trajectories: Vec<(String, Vec<TrajectoryPoint>)>,
    pub transitions: TransitionStats,
    pub cdi: Vec<(String, Vec<CdiPoint>)>,
    pub opening_up: Vec<(String, Option<usize>)>,
    pub opening_threshold_z: f64,
    pub latency: [Vec<f64>; NUM_LABELS],
    pub sizes: Vec<DialogueSize>,
    pub activations: Vec<MechanismActivation>,
}

#[derive(Serialize)]
struct LatencySummary {
    label: u8,
    n: usize,
    mean: Option<f64>,
    variance: Option<f64>,
}

#[derive(Serialize)]
struct AnalysisSummary<'a> {
    dialogues: usize,
    class_distribution: &'a ClassCounts,
    transition_pairs: usize,
    pearson_r: Option<f64>,
    opening_threshold_z: f64,
    dialogues_opening_up: usize,
    opening_up_histogram: BTreeMap<usize, usize>,
    latency: Vec<LatencySummary>,
}

impl Analysis {
    fn opening_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for t in self.opening_up.iter().filter_map(|(_, t)| *t) {
            *h.entry(t).or_insert(0) += 1;
        }
        h
    }
}

pub const ANALYSIS_FILES: [&str; 12] = [
    "analysis.json",
    "class_distribution.csv",
    "trajectory.csv",
    "magnitude_speed.csv",
    "cdi.csv",
    "opening_up.csv",
    "opening_up_histogram.csv",
    "latency_by_label.csv",
    "turns_per_dialogue.csv",
    "tokens_per_dialogue.csv",
    "mechanism_activations.csv",
    "transitions.csv",
];

pub fn write_analysis(dir: &Path, a: &Analysis) -> Result<Vec<String>, IoError> {
    let histogram = a.opening_histogram();
    let summary = AnalysisSummary {
        dialogues: a.sizes.len(),
        class_distribution: &a.class_distribution,
        transition_pairs: a.transitions.pairs.len(),
        pearson_r: a.transitions.pearson_r,
        opening_threshold_z: a.opening_threshold_z,
        dialogues_opening_up: a.opening_up.iter().filter(|(_, t)| t.is_some()).count(),
        opening_up_histogram: histogram.clone(),
        latency: a
            .latency
            .iter()
            .enumerate()
            .map(|(l, v)| LatencySummary {
                label: l as u8,
                n: v.len(),
                mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
                variance: variance(v),
            })
            .collect(),
    };
    write_json(&dir.join("analysis.json"), &summary)?;

    write_table(
        &dir.join("class_distribution.csv"),
        &["label", "class", "count"],
        a.class_distribution
            .iter()
            .map(|(l, n)| [l.get().to_string(), l.class_name().to_string(), n.to_string()]),
    )?;
    write_table(
        &dir.join("trajectory.csv"),
        &["dialogue_id", "turn_index", "label"],
        a.trajectories.iter().flat_map(|(id, pts)| {
            pts.iter()
                .map(move |p| [id.clone(), p.turn_index.to_string(), p.label.get().to_string()])
        }),
    )?;
    write_table(
        &dir.join("magnitude_speed.csv"),
        &["magnitude", "speed"],
        a.transitions
            .pairs
            .iter()
            .map(|t| [t.magnitude.to_string(), t.speed.to_string()]),
    )?;
    write_table(
        &dir.join("transitions.csv"),
        &["magnitude", "speed", "turn_gap"],
        a.transitions
            .pairs
            .iter()
            .map(|t| [t.magnitude.to_string(), t.speed.to_string(), t.turn_gap.to_string()]),
    )?;
    write_table(
        &dir.join("cdi.csv"),
        &["dialogue_id", "turn_index", "progress", "cdi"],
        a.cdi.iter().flat_map(|(id, pts)| {
            pts.iter().map(move |p| {
                [
                    id.clone(),
                    p.turn_index.to_string(),
                    p.progress.to_string(),
                    p.cdi.to_string(),
                ]
            })
        }),
    )?;
    write_table(
        &dir.join("opening_up.csv"),
        &["dialogue_id", "turn_index"],
        a.opening_up
            .iter()
            .map(|(id, t)| [id.clone(), t.map(|t| t.to_string()).unwrap_or_default()]),
    )?;
    write_table(
        &dir.join("opening_up_histogram.csv"),
        &["turn_index", "dialogues"],
        histogram.iter().map(|(t, n)| [t.to_string(), n.to_string()]),
    )?;
    write_table(
        &dir.join("latency_by_label.csv"),
        &["label", "response_time_s"],
        a.latency
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |t| [l.to_string(), t.to_string()])),
    )?;
    write_table(
        &dir.join("turns_per_dialogue.csv"),
        &["dialogue_id", "turns"],
        a.sizes.iter().map(|s| [s.dialogue_id.clone(), s.turns.to_string()]),
    )?;
    write_table(
        &dir.join("tokens_per_dialogue.csv"),
        &["dialogue_id", "tokens"],
        a.sizes.iter().map(|s| [s.dialogue_id.clone(), s.tokens.to_string()]),
    )?;
    write_table(
        &dir.join("mechanism_activations.csv"),
        &["label", "mechanism_id", "mechanism_name", "rows", "mean", "mean_log"],
        a.activations.iter().map(|m| {
            [
                m.label.get().to_string(),
                m.mechanism_id.clone(),
                m.mechanism_name.clone(),
                m.rows.to_string(),
                m.mean.to_string(),
                m.mean_log.to_string(),
            ]
        }),
    )?;
    Ok(ANALYSIS_FILES.iter().map(|s| s.to_string()).collect())
}

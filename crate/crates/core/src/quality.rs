//! Synthetic batch quality: lexical diversity, label adherence and the
//! machine-as-annotator agreement gate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::{DefenseDefinition, DmrsCatalog, SyntheticSample};
use crate::backends::{BackendError, NliScorer, TextEncoder};
use crate::features::{aggregate_mechanisms, dmrs_level, score_indicators, FeatureError};
use crate::template;
use crate::text::tokenize;
use crate::Label;

pub const DEFAULT_KAPPA_THRESHOLD: f64 = 0.60;
pub const DEFAULT_MIN_BATCH: usize = 20;

/// Default NLI hypothesis for semantic adherence.
pub const ADHERENCE_HYPOTHESIS_TEMPLATE: &str =
    "This message shows {mechanism_name} ({level_name}) defensive functioning: {definition}.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("self-BLEU needs at least 2 texts, got {0}")]
    TooFewTexts(usize),
    #[error("no texts to score")]
    NoTexts,
    #[error("definition text is empty")]
    EmptyDefinition,
    #[error("label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label lists are empty")]
    EmptyLabels,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcVerdict {
    pub self_bleu: f64,
    pub semantic_adherence: f64,
    pub kappa: f64,
    pub accepted: bool,
}

// ---------------------------------------------------------------------------
// Self-BLEU
// ---------------------------------------------------------------------------

type NgramKey = Vec<String>;

/// Highest and second-highest count of an n-gram across texts, with the
/// index of the text holding the highest. Lets each hypothesis look up the
/// max count over all *other* texts in O(1).
#[derive(Clone, Copy)]
struct TopTwo {
    best: usize,
    best_owner: usize,
    second: usize,
}

impl TopTwo {
    fn offer(&mut self, count: usize, owner: usize) {
        if count > self.best {
            self.second = self.best;
            self.best = count;
            self.best_owner = owner;
        } else if count > self.second {
            self.second = count;
        }
    }

    fn excluding(&self, owner: usize) -> usize {
        if self.best_owner == owner {
            self.second
        } else {
            self.best
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<NgramKey, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Mean BLEU of each text against all the others as references.
///
/// Per hypothesis: clipped n-gram precision against the per-n-gram maximum
/// reference count, orders `1..=min(max_n, len)` with uniform weights, and a
/// brevity penalty against the closest reference length (shorter wins ties).
/// A zero unigram match gives 0; a zero match at order >= 2 is smoothed to
/// `1 / (total + 1)`.
pub fn self_bleu<S: AsRef<str>>(texts: &[S], max_n: usize) -> Result<f64, QualityError> {
    if texts.len() < 2 {
        return Err(QualityError::TooFewTexts(texts.len()));
    }
    let max_n = max_n.max(1);
    let tokens: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();

    let per_order: Vec<Vec<BTreeMap<NgramKey, usize>>> = (1..=max_n)
        .map(|n| tokens.iter().map(|t| ngram_counts(t, n)).collect())
        .collect();
    let tops: Vec<BTreeMap<NgramKey, TopTwo>> = per_order
        .iter()
        .map(|texts_counts| {
            let mut top: BTreeMap<NgramKey, TopTwo> = BTreeMap::new();
            for (owner, counts) in texts_counts.iter().enumerate() {
                for (gram, &c) in counts {
                    top.entry(gram.clone())
                        .or_insert(TopTwo {
                            best: 0,
                            best_owner: usize::MAX,
                            second: 0,
                        })
                        .offer(c, owner);
                }
            }
            top
        })
        .collect();

    let mut sum = 0.0;
    for (h, &hyp_len) in lengths.iter().enumerate() {
        if hyp_len == 0 {
            continue;
        }
        let ref_len = lengths
            .iter()
            .enumerate()
            .filter(|&(r, _)| r != h)
            .map(|(_, &l)| l)
            .min_by_key(|&l| (l.abs_diff(hyp_len), l))
            .unwrap_or(0);
        let orders = max_n.min(hyp_len);
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=orders {
            let counts = &per_order[n - 1][h];
            let total: usize = counts.values().sum();
            let matched: usize = counts
                .iter()
                .map(|(g, &c)| c.min(tops[n - 1][g].excluding(h)))
                .sum();
            let p = if matched > 0 {
                matched as f64 / total as f64
            } else if n == 1 {
                zero = true;
                break;
            } else {
                1.0 / (total as f64 + 1.0)
            };
            log_sum += libm::log(p);
        }
        if zero {
            continue;
        }
        let bp = if hyp_len >= ref_len {
            1.0
        } else {
            libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
        };
        sum += bp * libm::exp(log_sum / orders as f64);
    }
    Ok(sum / texts.len() as f64)
}

// ---------------------------------------------------------------------------
// Semantic adherence
// ---------------------------------------------------------------------------

pub fn adherence_hypothesis(def: &DefenseDefinition, template_text: &str) -> String {
    let definition = def.definition.trim().trim_end_matches('.');
    template::render(
        template_text,
        &[
            ("mechanism_name", &def.mechanism_name),
            ("level_name", &def.level_name),
            ("definition", definition),
        ],
    )
}

/// Mean entailment of the definition hypothesis over the texts as premises.
pub fn semantic_adherence<S: AsRef<str>, N: NliScorer + ?Sized>(
    texts: &[S],
    def: &DefenseDefinition,
    nli: &N,
    hypothesis_template: &str,
) -> Result<f64, QualityError> {
    if texts.is_empty() {
        return Err(QualityError::NoTexts);
    }
    if def.definition.trim().is_empty() {
        return Err(QualityError::EmptyDefinition);
    }
    let hypothesis = adherence_hypothesis(def, hypothesis_template);
    let mut total = 0.0;
    for t in texts {
        total += nli.entail(t.as_ref(), &hypothesis)?;
    }
    Ok(total / texts.len() as f64)
}

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

/// Cohen's kappa between two label sequences.
///
/// Computed from integer counts as `(n·agree − Σ cₐ c_b) / (n² − Σ cₐ c_b)`
/// so rational agreements land on the nearest double. Returns 1.0 in the
/// degenerate case where chance agreement is 1 (both constant and equal).
pub fn cohens_kappa<L: Ord + Copy>(a: &[L], b: &[L]) -> Result<f64, QualityError> {
    if a.len() != b.len() {
        return Err(QualityError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(QualityError::EmptyLabels);
    }
    let n = a.len() as u128;
    let mut agree = 0u128;
    let mut marginals: BTreeMap<L, (u128, u128)> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            agree += 1;
        }
        marginals.entry(x).or_default().0 += 1;
        marginals.entry(y).or_default().1 += 1;
    }
    let chance: u128 = marginals.values().map(|(ca, cb)| ca * cb).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(1.0);
    }
    let numer = (n * agree) as i128 - chance as i128;
    Ok(numer as f64 / denom as f64)
}

/// Acceptance is inclusive: `kappa >= threshold`.
pub fn gate_accepts(kappa: f64, threshold: f64) -> bool {
    kappa >= threshold
}

/// Assigns a label to a text; the secondary classifier of the gate.
pub trait Annotator {
    fn annotate(&self, text: &str) -> Result<Label, BackendError>;
}

impl<T: Annotator + ?Sized> Annotator for &T {
    fn annotate(&self, text: &str) -> Result<Label, BackendError> {
        (**self).annotate(text)
    }
}

/// Nearest class centroid (cosine) over encoder embeddings of real turns.
/// Classes absent from the training texts are never predicted.
pub struct CentroidAnnotator<'e, E: TextEncoder + ?Sized> {
    encoder: &'e E,
    centroids: Vec<(Label, Vec<f64>)>,
}

impl<'e, E: TextEncoder + ?Sized> CentroidAnnotator<'e, E> {
    pub fn fit<'t>(
        encoder: &'e E,
        examples: impl IntoIterator<Item = (&'t str, Label)>,
    ) -> Result<Self, QualityError> {
        let mut sums: BTreeMap<Label, (Vec<f64>, usize)> = BTreeMap::new();
        for (text, label) in examples {
            let v = unit(encoder.encode(text)?);
            let entry = sums.entry(label).or_insert_with(|| (alloc::vec![0.0; v.len()], 0));
            entry.0.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            entry.1 += 1;
        }
        if sums.is_empty() {
            return Err(QualityError::EmptyLabels);
        }
        let centroids = sums.into_iter().map(|(l, (s, _))| (l, unit(s))).collect();
        Ok(CentroidAnnotator { encoder, centroids })
    }

    pub fn classes(&self) -> impl Iterator<Item = Label> + '_ {
        self.centroids.iter().map(|(l, _)| *l)
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl<E: TextEncoder + ?Sized> Annotator for CentroidAnnotator<'_, E> {
    fn annotate(&self, text: &str) -> Result<Label, BackendError> {
        let v = unit(self.encoder.encode(text)?);
        let mut best = (f64::NEG_INFINITY, self.centroids[0].0);
        // centroids are in label order, so strict '>' keeps the lowest label on ties
        for (label, c) in &self.centroids {
            let sim: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
            if sim > best.0 {
                best = (sim, *label);
            }
        }
        Ok(best.1)
    }
}

/// Zero-training annotator: indicator entailment, defense profile, level argmax.
/// Only produces labels 1..=7.
pub struct DmrsAnnotator<'a, N: NliScorer + ?Sized> {
    pub catalog: &'a DmrsCatalog,
    pub nli: &'a N,
}

impl<N: NliScorer + ?Sized> Annotator for DmrsAnnotator<'_, N> {
    fn annotate(&self, text: &str) -> Result<Label, BackendError> {
        let scores = score_indicators(text, self.catalog, self.nli).map_err(feature_to_backend)?;
        let profile = aggregate_mechanisms(&scores, self.catalog).map_err(feature_to_backend)?;
        Ok(dmrs_level(&profile, self.catalog))
    }
}

fn feature_to_backend(e: FeatureError) -> BackendError {
    match e {
        FeatureError::Backend(b) => b,
        other => BackendError::InvalidRequest(alloc::format!("{other}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GateStatus {
    Accepted,
    Rejected,
    /// The annotator failed on at least one sample; the batch is held back.
    Unevaluable { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutcome {
    pub status: GateStatus,
    pub verdict: Option<QcVerdict>,
    pub annotator_labels: Vec<Label>,
    /// The batch, with the verdict attached to every sample when evaluable.
    pub samples: Vec<SyntheticSample>,
}

impl GateOutcome {
    pub fn accepted(&self) -> bool {
        self.status == GateStatus::Accepted
    }
}

/// Diversity and adherence scores carried into the verdict; only kappa gates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchScores {
    pub self_bleu: f64,
    pub semantic_adherence: f64,
}

pub fn kappa_gate<A: Annotator + ?Sized>(
    mut batch: Vec<SyntheticSample>,
    annotator: &A,
    threshold: f64,
    scores: BatchScores,
) -> Result<GateOutcome, QualityError> {
    if batch.is_empty() {
        return Err(QualityError::EmptyLabels);
    }
    let mut annotated = Vec::with_capacity(batch.len());
    for s in &batch {
        match annotator.annotate(&s.text) {
            Ok(l) => annotated.push(l),
            Err(e) => {
                return Ok(GateOutcome {
                    status: GateStatus::Unevaluable {
                        reason: alloc::format!("annotator failed: {e}"),
                    },
                    verdict: None,
                    annotator_labels: annotated,
                    samples: batch,
                })
            }
        }
    }
    let intended: Vec<Label> = batch.iter().map(|s| s.intended_label).collect();
    let kappa = cohens_kappa(&intended, &annotated)?;
    let accepted = gate_accepts(kappa, threshold);
    let verdict = QcVerdict {
        self_bleu: scores.self_bleu,
        semantic_adherence: scores.semantic_adherence,
        kappa,
        accepted,
    };
    for s in &mut batch {
        s.qc = Some(verdict);
    }
    Ok(GateOutcome {
        status: if accepted {
            GateStatus::Accepted
        } else {
            GateStatus::Rejected
        },
        verdict: Some(verdict),
        annotator_labels: annotated,
        samples: batch,
    })
}

/// Group samples into gating batches by generation round, ascending.
///
/// Each batch pools every class generated in a round. A batch smaller than
/// `min_size` absorbs the following round(s); a remainder left at the end is
/// merged into the previous batch, or stands alone if it is the only one.
pub fn gating_batches(samples: Vec<SyntheticSample>, min_size: usize) -> Vec<Vec<SyntheticSample>> {
    let mut by_round: BTreeMap<u32, Vec<SyntheticSample>> = BTreeMap::new();
    for s in samples {
        by_round.entry(s.round).or_default().push(s);
    }
    let mut batches: Vec<Vec<SyntheticSample>> = Vec::new();
    let mut current: Vec<SyntheticSample> = Vec::new();
    for (_, round) in by_round {
        current.extend(round);
        if current.len() >= min_size {
            batches.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(last) => last.extend(current),
            None => batches.push(current),
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stressor::StressorRecord;
    use alloc::string::ToString;
    use alloc::vec;

    fn sample(text: &str, label: u8, round: u32) -> SyntheticSample {
        SyntheticSample {
            text: text.to_string(),
            intended_label: Label::new(label).unwrap(),
            mechanism_name: "m".into(),
            stressor: StressorRecord::fallback("d", 0),
            source_dialogue_id: "d".into(),
            round,
            qc: None,
        }
    }

    #[test]
    fn self_bleu_fixtures() {
        let same = self_bleu(&["a b c d e", "a b c d e"], 4).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let disjoint = self_bleu(&["the cat sat down", "markets crashed hard yesterday"], 4).unwrap();
        assert!(disjoint < 0.1);
        assert_eq!(self_bleu(&["only one"], 4), Err(QualityError::TooFewTexts(1)));
    }

    #[test]
    fn self_bleu_hand_value() {
        // hyp "a b c" vs ref "a b d": p1 = 2/3, p2 = 1/2, p3 smoothed = 1/(1+1)
        // bleu = (2/3 * 1/2 * 1/2)^(1/3), symmetric for both texts
        let expected = libm::cbrt(2.0 / 3.0 * 0.5 * 0.5);
        let got = self_bleu(&["a b c", "a b d"], 4).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn kappa_hand_cases() {
        assert_eq!(cohens_kappa(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), -1.0);
        assert_eq!(cohens_kappa(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(cohens_kappa(&[3, 3, 3], &[3, 3, 3]).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&[1, 2], &[1]), Err(QualityError::LengthMismatch(2, 1)));
        assert_eq!(cohens_kappa::<u8>(&[], &[]), Err(QualityError::EmptyLabels));
    }

    struct Constant(Label);
    impl Annotator for Constant {
        fn annotate(&self, _: &str) -> Result<Label, BackendError> {
            Ok(self.0)
        }
    }

    struct Oracle(Vec<(String, Label)>);
    impl Annotator for Oracle {
        fn annotate(&self, text: &str) -> Result<Label, BackendError> {
            self.0
                .iter()
                .find(|(t, _)| t == text)
                .map(|(_, l)| *l)
                .ok_or_else(|| BackendError::Transport("unknown".into()))
        }
    }

    #[test]
    fn gate_decisions() {
        let batch: Vec<_> = (0..6).map(|i| sample(&alloc::format!("t{i}"), (i % 3) as u8, 0)).collect();
        let identity = Oracle(batch.iter().map(|s| (s.text.clone(), s.intended_label)).collect());
        let out = kappa_gate(batch.clone(), &identity, 0.6, BatchScores::default()).unwrap();
        assert!(out.accepted());
        assert_eq!(out.verdict.unwrap().kappa, 1.0);
        assert!(out.samples.iter().all(|s| s.qc == out.verdict));

        let out = kappa_gate(batch.clone(), &Constant(Label::new(1).unwrap()), 0.6, BatchScores::default()).unwrap();
        assert_eq!(out.status, GateStatus::Rejected);
        assert_eq!(out.verdict.unwrap().kappa, 0.0);

        let partial = Oracle(vec![("t0".into(), Label::new(0).unwrap())]);
        let out = kappa_gate(batch, &partial, 0.6, BatchScores::default()).unwrap();
        assert!(matches!(out.status, GateStatus::Unevaluable { .. }));
        assert!(out.verdict.is_none());
        assert_eq!(out.samples.len(), 6);
        assert!(out.samples.iter().all(|s| s.qc.is_none()));
    }

    #[test]
    fn threshold_is_inclusive() {
        assert!(gate_accepts(0.60, 0.60));
        assert!(!gate_accepts(0.599, 0.60));
    }

    #[test]
    fn batching_by_round() {
        let mut samples = Vec::new();
        for round in 0..3u32 {
            for i in 0..8 {
                samples.push(sample("x", (i % 2) as u8, round));
            }
        }
        samples.push(sample("y", 1, 3));
        let batches = gating_batches(samples, 10);
        // rounds 0+1 -> 16, round 2 + 3 -> 9 < 10 merged into previous
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), [25]);

        let samples: Vec<_> = (0..5).map(|i| sample("z", 0, i)).collect();
        assert_eq!(gating_batches(samples, 20).len(), 1);

        let samples: Vec<_> = (0..40).map(|i| sample("z", 0, i / 20)).collect();
        assert_eq!(gating_batches(samples, 20).iter().map(Vec::len).collect::<Vec<_>>(), [20, 20]);
    }

    #[test]
    fn centroid_annotator_picks_nearest_class() {
        use crate::backends::StubEncoder;
        let enc = StubEncoder::new(0);
        let train = [
            ("I lost my job and feel hopeless", Label::new(1).unwrap()),
            ("my job is gone and I feel lost", Label::new(1).unwrap()),
            ("thanks that helps a lot", Label::new(7).unwrap()),
            ("thank you this really helps", Label::new(7).unwrap()),
        ];
        let a = CentroidAnnotator::fit(&enc, train.iter().map(|(t, l)| (*t, *l))).unwrap();
        assert_eq!(a.classes().map(Label::get).collect::<Vec<_>>(), [1, 7]);
        assert_eq!(a.annotate("I feel hopeless about my job").unwrap().get(), 1);
        assert_eq!(a.annotate("thank you that helps").unwrap().get(), 7);
        assert!(CentroidAnnotator::fit(&enc, core::iter::empty()).is_err());
    }

    #[test]
    fn dmrs_annotator_composes_profile_and_level() {
        use crate::backends::StubNli;
        let cat: DmrsCatalog = serde_json::from_str(include_str!("../../../data/dmrs_catalog.json")).unwrap();
        let a = DmrsAnnotator { catalog: &cat, nli: &StubNli };
        let text = &cat.indicators()[0].statement;
        let scores = score_indicators(text, &cat, &StubNli).unwrap();
        let expected = dmrs_level(&aggregate_mechanisms(&scores, &cat).unwrap(), &cat);
        let got = a.annotate(text).unwrap();
        assert_eq!(got, expected);
        assert!((1..=7).contains(&got.get()));
    }
}

//! Dialogue corpora: record types, validation, class counts and splitting.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Label, NUM_LABELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Supporter,
}

impl Speaker {
    pub fn display_name(self) -> &'static str {
        match self {
            Speaker::Seeker => "Seeker",
            Speaker::Supporter => "Supporter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    /// Seconds since the previous turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_time_s: Option<f64>,
}

impl Turn {
    pub fn is_seeker(&self) -> bool {
        self.speaker == Speaker::Seeker
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("dialogue {dialogue}: turn at position {position} has index {found}, expected {position}")]
    NonContiguousIndex {
        dialogue: String,
        position: usize,
        found: usize,
    },
    #[error("dialogue {dialogue}: labeled turn {turn} has empty text")]
    EmptyText { dialogue: String, turn: usize },
    #[error("dialogue {dialogue}: supporter turn {turn} carries label {label}; labels are seeker-only")]
    LabelOnSupporter {
        dialogue: String,
        turn: usize,
        label: Label,
    },
    #[error("dialogue {dialogue}: turn {turn} has invalid response_time_s {value}")]
    InvalidResponseTime {
        dialogue: String,
        turn: usize,
        value: f64,
    },
    #[error("dialogue {dialogue} has no seeker turn")]
    NoSeekerTurn { dialogue: String },
    #[error("duplicate dialogue id {0}")]
    DuplicateId(String),
    #[error("split ratios must be positive with sum <= 1 (train {train}, dev {dev})")]
    InvalidRatios { train: f64, dev: f64 },
    #[error("cannot split {found} dialogue(s) with a nonzero dev ratio; need at least 2")]
    TooFewDialogues { found: usize },
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let dialogue = || self.id.clone();
        for (position, turn) in self.turns.iter().enumerate() {
            if turn.index != position {
                return Err(CorpusError::NonContiguousIndex {
                    dialogue: dialogue(),
                    position,
                    found: turn.index,
                });
            }
            if let Some(label) = turn.label {
                if !turn.is_seeker() {
                    return Err(CorpusError::LabelOnSupporter {
                        dialogue: dialogue(),
                        turn: turn.index,
                        label,
                    });
                }
                if turn.text.trim().is_empty() {
                    return Err(CorpusError::EmptyText {
                        dialogue: dialogue(),
                        turn: turn.index,
                    });
                }
            }
            if let Some(value) = turn.response_time_s {
                if !(value >= 0.0) || !value.is_finite() {
                    return Err(CorpusError::InvalidResponseTime {
                        dialogue: dialogue(),
                        turn: turn.index,
                        value,
                    });
                }
            }
        }
        if !self.turns.iter().any(Turn::is_seeker) {
            return Err(CorpusError::NoSeekerTurn {
                dialogue: dialogue(),
            });
        }
        Ok(())
    }

    pub fn seeker_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.is_seeker())
    }

    pub fn labeled_seeker_turns(&self) -> impl Iterator<Item = (&Turn, Label)> {
        self.seeker_turns().filter_map(|t| t.label.map(|l| (t, l)))
    }
}

/// Validate every dialogue plus corpus-level uniqueness of ids.
pub fn validate_corpus(dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let mut seen = BTreeSet::new();
    for d in dialogues {
        d.validate()?;
        if !seen.insert(d.id.as_str()) {
            return Err(CorpusError::DuplicateId(d.id.clone()));
        }
    }
    Ok(())
}

/// Per-label counts of labeled seeker turns. All nine labels are always present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: [usize; NUM_LABELS],
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        self.counts[label.index()]
    }

    pub fn set(&mut self, label: Label, count: usize) {
        self.counts[label.index()] = count;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, usize)> + '_ {
        Label::all().map(move |l| (l, self.counts[l.index()]))
    }
}

pub fn class_distribution(dialogues: &[Dialogue]) -> ClassCounts {
    let mut counts = ClassCounts::default();
    for (_, label) in dialogues.iter().flat_map(Dialogue::labeled_seeker_turns) {
        counts.counts[label.index()] += 1;
    }
    counts
}

/// Split at dialogue granularity.
///
/// Ratios are relative weights: the dev share is `dev / (train + dev)` of the
/// corpus, rounded, and clamped so that both sides are non-empty whenever the
/// dev ratio is positive. Each side keeps the input order.
pub fn split_corpus(
    dialogues: &[Dialogue],
    train_ratio: f64,
    dev_ratio: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>), CorpusError> {
    let bad = !(train_ratio > 0.0)
        || !(dev_ratio >= 0.0)
        || !(train_ratio + dev_ratio <= 1.0 + 1e-12);
    if bad {
        return Err(CorpusError::InvalidRatios {
            train: train_ratio,
            dev: dev_ratio,
        });
    }
    let n = dialogues.len();
    if dev_ratio == 0.0 {
        return Ok((dialogues.to_vec(), Vec::new()));
    }
    if n < 2 {
        return Err(CorpusError::TooFewDialogues { found: n });
    }
    let share = dev_ratio / (train_ratio + dev_ratio);
    let n_dev = libm::round(n as f64 * share).clamp(1.0, (n - 1) as f64) as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = alloc::vec![false; n];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::with_capacity(n - n_dev), Vec::with_capacity(n_dev));
    for (d, dev_side) in dialogues.iter().zip(is_dev) {
        if dev_side {
            dev.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, dev))
}

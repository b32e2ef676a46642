use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of classes: 0 = No Defense, 1..=7 = DMRS levels, 8 = Needs More Information.
pub const NUM_LABELS: usize = 9;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("label {0} is outside 0..=8")]
pub struct LabelError(pub i64);

/// A defense label in `0..=8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Label(u8);

impl Label {
    pub const NO_DEFENSE: Label = Label(0);
    pub const HIGH_ADAPTIVE: Label = Label(7);
    pub const NEEDS_INFO: Label = Label(8);

    pub const fn new(value: u8) -> Option<Label> {
        if (value as usize) < NUM_LABELS {
            Some(Label(value))
        } else {
            None
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    /// True for labels 1..=7, which correspond to DMRS defense levels.
    pub const fn is_dmrs_level(self) -> bool {
        self.0 >= 1 && self.0 <= 7
    }

    pub fn all() -> impl Iterator<Item = Label> {
        (0..NUM_LABELS as u8).map(Label)
    }

    /// Short class names used in reports.
    pub const fn class_name(self) -> &'static str {
        match self.0 {
            0 => "No Defense",
            1 => "Action",
            2 => "Major Image",
            3 => "Disavowal",
            4 => "Minor Image",
            5 => "Neurotic",
            6 => "Obsessional",
            7 => "High-Adaptive",
            _ => "Needs Info",
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = LabelError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        u8::try_from(value)
            .ok()
            .and_then(Label::new)
            .ok_or(LabelError(value))
    }
}

impl TryFrom<u8> for Label {
    type Error = LabelError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Label::new(value).ok_or(LabelError(value as i64))
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

//! Salient-stressor identification for a target seeker turn.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationParams, Generator};
use crate::corpus::Dialogue;
use crate::template;

/// Stressor-identification prompt, `{history}` and `{target_turn}` slots.
pub const STRESSOR_TEMPLATE: &str = include_str!("../templates/stressor.txt");

/// Category used when the model reply cannot be parsed.
pub const FALLBACK_CATEGORY: &str = "Unspecified";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressorRecord {
    pub category: String,
    pub description: String,
    pub dialogue_id: String,
    pub turn_index: usize,
}

impl StressorRecord {
    pub fn fallback(dialogue_id: &str, turn_index: usize) -> Self {
        StressorRecord {
            category: FALLBACK_CATEGORY.to_string(),
            description: String::new(),
            dialogue_id: dialogue_id.to_string(),
            turn_index,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.category == FALLBACK_CATEGORY && self.description.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StressorError {
    #[error("target utterance is empty")]
    EmptyTarget,
    #[error("no stressor category or description found in reply: {raw:?}")]
    Unparseable { raw: String },
    #[error("dialogue {dialogue}: turn {turn} does not exist")]
    NoSuchTurn { dialogue: String, turn: usize },
    #[error("dialogue {dialogue}: turn {turn} is not a seeker turn")]
    NotSeekerTurn { dialogue: String, turn: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn build_stressor_prompt(history: &str, target_turn: &str) -> Result<String, StressorError> {
    if target_turn.trim().is_empty() {
        return Err(StressorError::EmptyTarget);
    }
    Ok(template::render(
        STRESSOR_TEMPLATE,
        &[("history", history), ("target_turn", target_turn)],
    ))
}

/// Strip list numbering, bullets, markdown emphasis and surrounding whitespace.
fn strip_line_decoration(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(['#', '-', '*', '>', ' ', '\t']);
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
                s = rest;
            }
        }
        s = s.trim_start();
        if s == before {
            return s;
        }
    }
}

fn strip_value(value: &str) -> &str {
    value
        .trim()
        .trim_matches(|c| c == '*' || c == '"' || c == '_')
        .trim()
}

fn labeled_value<'a>(line: &'a str, keys: &[&str]) -> Option<&'a str> {
    let cleaned = strip_line_decoration(line);
    let cleaned = cleaned.trim_start_matches('*');
    let lower = cleaned.to_ascii_lowercase();
    for key in keys {
        if lower.starts_with(key) {
            let rest = cleaned[key.len()..].trim_start_matches('*').trim_start();
            if let Some(value) = rest.strip_prefix(':') {
                return Some(strip_value(value));
            }
        }
    }
    None
}

/// Extract `(category, description)` from a reply following the two-line
/// output format. Either line alone is enough; a missing category becomes
/// [`FALLBACK_CATEGORY`] and a missing description the empty string. Only the
/// first occurrence of each label counts; trailing commentary is ignored.
pub fn parse_stressor_reply(reply: &str) -> Result<(String, String), StressorError> {
    let mut category: Option<&str> = None;
    let mut description: Option<&str> = None;
    for line in reply.lines() {
        if category.is_none() {
            if let Some(v) = labeled_value(line, &["stressor category", "category"]) {
                if !v.is_empty() {
                    category = Some(v);
                    continue;
                }
            }
        }
        if description.is_none() {
            if let Some(v) = labeled_value(line, &["description"]) {
                if !v.is_empty() {
                    description = Some(v);
                }
            }
        }
    }
    if category.is_none() && description.is_none() {
        return Err(StressorError::Unparseable {
            raw: reply.to_string(),
        });
    }
    Ok((
        category.unwrap_or(FALLBACK_CATEGORY).to_string(),
        description.unwrap_or("").to_string(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressorOptions {
    pub params: GenerationParams,
    /// Gateway calls made before falling back when replies do not parse.
    pub parse_attempts: u32,
    /// Most recent turns kept in the rendered history.
    pub history_cap: usize,
}

impl Default for StressorOptions {
    fn default() -> Self {
        StressorOptions {
            params: GenerationParams {
                max_tokens: 128,
                temperature: 0.0,
                seed: Some(0),
            },
            parse_attempts: 2,
            history_cap: 12,
        }
    }
}

/// `Speaker: text` lines for the turns before `turn_index`, oldest first,
/// keeping only the last `cap`.
pub fn render_history(dialogue: &Dialogue, turn_index: usize, cap: usize) -> String {
    let end = turn_index.min(dialogue.turns.len());
    let start = end.saturating_sub(cap);
    dialogue.turns[start..end]
        .iter()
        .map(|t| format!("{}: {}", t.speaker.display_name(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Identify the stressor behind one seeker turn.
///
/// Malformed replies never fail: after `parse_attempts` calls the fallback
/// record is returned and a warning logged. Gateway errors propagate.
pub fn identify_stressor<G: Generator + ?Sized>(
    dialogue: &Dialogue,
    turn_index: usize,
    gateway: &G,
    options: &StressorOptions,
) -> Result<StressorRecord, StressorError> {
    let turn = dialogue
        .turns
        .get(turn_index)
        .ok_or_else(|| StressorError::NoSuchTurn {
            dialogue: dialogue.id.clone(),
            turn: turn_index,
        })?;
    if !turn.is_seeker() {
        return Err(StressorError::NotSeekerTurn {
            dialogue: dialogue.id.clone(),
            turn: turn_index,
        });
    }
    let history = render_history(dialogue, turn_index, options.history_cap);
    let prompt = build_stressor_prompt(&history, &turn.text)?;
    let base_seed = options.params.seed.unwrap_or(0);
    for attempt in 0..options.parse_attempts.max(1) {
        let params = options.params.with_seed(base_seed.wrapping_add(attempt as u64));
        let reply = gateway.complete(&prompt, &params)?;
        if let Ok((category, description)) = parse_stressor_reply(&reply) {
            return Ok(StressorRecord {
                category,
                description,
                dialogue_id: dialogue.id.clone(),
                turn_index,
            });
        }
    }
    log::warn!(
        "dialogue {} turn {}: stressor reply unparseable after {} attempt(s), using {:?}",
        dialogue.id,
        turn_index,
        options.parse_attempts.max(1),
        FALLBACK_CATEGORY
    );
    Ok(StressorRecord::fallback(&dialogue.id, turn_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::StubGenerator;
    use crate::corpus::{Speaker, Turn};
    use alloc::vec;

    struct Fixed(&'static str);
    impl Generator for Fixed {
        fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
            Ok(self.0.to_string())
        }
    }

    struct Down;
    impl Generator for Down {
        fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
            Err(BackendError::Exhausted {
                attempts: 3,
                last: "timeout".into(),
            })
        }
    }

    fn dialogue() -> Dialogue {
        let t = |index, speaker, text: &str| Turn {
            index,
            speaker,
            text: text.to_string(),
            label: None,
            response_time_s: None,
        };
        Dialogue {
            id: "d1".into(),
            turns: vec![
                t(0, Speaker::Supporter, "Hi, how can I help?"),
                t(1, Speaker::Seeker, "I lost my job last week."),
                t(2, Speaker::Supporter, "That sounds hard."),
                t(3, Speaker::Seeker, "It's fine, really."),
            ],
        }
    }

    #[test]
    fn prompt_contains_markers_and_target() {
        let p = build_stressor_prompt("", "I lost my job").unwrap();
        assert!(p.contains("### DIALOGUE CONTEXT:"));
        assert!(p.contains("### TARGET UTTERANCE:"));
        assert!(p.contains("\"I lost my job\""));
        assert!(p.contains("### DIALOGUE CONTEXT:\n    \n\n"));
        assert_eq!(
            p,
            STRESSOR_TEMPLATE
                .replace("{history}", "")
                .replace("{target_turn}", "I lost my job")
        );
        let q = build_stressor_prompt("x", "he said \"never\" to me").unwrap();
        assert!(q.contains("\"he said \"never\" to me\""));
        assert_eq!(build_stressor_prompt("", " "), Err(StressorError::EmptyTarget));
    }

    #[test]
    fn parses_replies() {
        let r = "1. Stressor Category: Job Loss\n2. Description: The seeker was laid off.";
        assert_eq!(
            parse_stressor_reply(r).unwrap(),
            ("Job Loss".to_string(), "The seeker was laid off.".to_string())
        );
        let noisy = "  **1. Stressor Category:** Job Loss\n 2) Description: The seeker was laid off.\n\nNote: I inferred this.\nDescription: other";
        assert_eq!(parse_stressor_reply(noisy).unwrap(), parse_stressor_reply(r).unwrap());
        assert!(matches!(
            parse_stressor_reply("I cannot determine this."),
            Err(StressorError::Unparseable { .. })
        ));
        assert_eq!(
            parse_stressor_reply("Description: only this").unwrap(),
            ("Unspecified".to_string(), "only this".to_string())
        );
    }

    #[test]
    fn history_is_capped_and_rendered() {
        let d = dialogue();
        assert_eq!(
            render_history(&d, 3, 12),
            "Supporter: Hi, how can I help?\nSeeker: I lost my job last week.\nSupporter: That sounds hard."
        );
        assert_eq!(render_history(&d, 3, 1), "Supporter: That sounds hard.");
        assert_eq!(render_history(&d, 0, 12), "");
    }

    #[test]
    fn identify_paths() {
        let d = dialogue();
        let opts = StressorOptions::default();
        let rec = identify_stressor(
            &d,
            1,
            &Fixed("1. Stressor Category: Job Loss\n2. Description: Laid off."),
            &opts,
        )
        .unwrap();
        assert_eq!(rec.category, "Job Loss");
        assert_eq!((rec.dialogue_id.as_str(), rec.turn_index), ("d1", 1));

        let rec = identify_stressor(&d, 3, &Fixed("no idea"), &opts).unwrap();
        assert!(rec.is_fallback());

        assert!(matches!(
            identify_stressor(&d, 2, &Fixed(""), &opts),
            Err(StressorError::NotSeekerTurn { turn: 2, .. })
        ));
        assert!(matches!(
            identify_stressor(&d, 1, &Down, &opts),
            Err(StressorError::Backend(BackendError::Exhausted { .. }))
        ));

        let rec = identify_stressor(&d, 1, &StubGenerator::new(), &opts).unwrap();
        assert_eq!(rec.category, "Job Loss");
    }
}

//! Gateways to external inference services.
//!
//! Four narrow traits (generator, NLI scorer, emotion scorer, text encoder)
//! so that each consumer can mix stub and live implementations. The stubs in
//! this module are deterministic and stateless apart from the stub encoder's
//! trainable projection.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, mix64, unit_interval};
use crate::text::{content_tokens, tokenize};

/// Width of every text embedding.
pub const EMBEDDING_DIM: usize = 768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned an empty reply")]
    EmptyReply,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend exhausted after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
}

impl BackendError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::EmptyReply)
    }
}

fn require_text(what: &str, text: &str) -> Result<(), BackendError> {
    if text.trim().is_empty() {
        Err(BackendError::InvalidRequest(format!("{what} must be non-empty")))
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 256,
            temperature: 0.9,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        GenerationParams {
            seed: Some(seed),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionResult {
    pub label: String,
    pub confidence: f64,
    pub is_neutral: bool,
}

pub const NEUTRAL_EMOTION: &str = "neutral";

impl EmotionResult {
    pub fn new(label: impl Into<String>, confidence: f64) -> Self {
        let label = label.into();
        let is_neutral = label.eq_ignore_ascii_case(NEUTRAL_EMOTION);
        EmotionResult {
            label,
            confidence: confidence.clamp(0.0, 1.0),
            is_neutral,
        }
    }
}

pub trait Generator {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

pub trait NliScorer {
    /// Entailment probability `P(premise => hypothesis)` in `[0, 1]`.
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<f64, BackendError>;

    /// One score per hypothesis, in input order.
    fn entail_batch(&self, premise: &str, hypotheses: &[&str]) -> Result<Vec<f64>, BackendError> {
        hypotheses.iter().map(|h| self.entail(premise, h)).collect()
    }
}

pub trait EmotionScorer {
    fn score(&self, text: &str) -> Result<EmotionResult, BackendError>;
}

/// A contextual text encoder producing [`EMBEDDING_DIM`]-wide vectors.
///
/// Encoders that can be fine-tuned expose a flat parameter vector and
/// accumulate gradients with respect to it; frozen encoders keep the default
/// empty parameter set and are skipped by the optimizer.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    fn kind(&self) -> &str;

    fn trainable_params(&self) -> &[f64] {
        &[]
    }

    fn trainable_params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    /// Add `d loss / d params` for one input into `grad`, given `d loss / d embedding`.
    fn accumulate_grad(
        &self,
        _text: &str,
        _grad_embedding: &[f64],
        _grad: &mut [f64],
    ) -> Result<(), BackendError> {
        Ok(())
    }
}

macro_rules! forward_ref_impls {
    ($($ptr:ty),*) => {$(
        impl<T: Generator + ?Sized> Generator for $ptr {
            fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
                (**self).complete(prompt, params)
            }
        }
        impl<T: NliScorer + ?Sized> NliScorer for $ptr {
            fn entail(&self, premise: &str, hypothesis: &str) -> Result<f64, BackendError> {
                (**self).entail(premise, hypothesis)
            }
            fn entail_batch(&self, premise: &str, hypotheses: &[&str]) -> Result<Vec<f64>, BackendError> {
                (**self).entail_batch(premise, hypotheses)
            }
        }
        impl<T: EmotionScorer + ?Sized> EmotionScorer for $ptr {
            fn score(&self, text: &str) -> Result<EmotionResult, BackendError> {
                (**self).score(text)
            }
        }
    )*};
}

forward_ref_impls!(&T, Box<T>);

// ---------------------------------------------------------------------------
// Stubs
// ---------------------------------------------------------------------------

const STRESSOR_TASK_MARKER: &str = "### TASK: Clinical Stressor Identification";
const GENERATION_TASK_MARKER: &str = "### TASK: Generate Synthetic Psychological Defense Examples";

/// Keyword lexicon for the stub's stressor categorization.
const STRESSOR_KEYWORDS: &[(&str, &[&str])] = &[
    ("Job Loss", &["job", "fired", "laid", "layoff", "work", "boss", "manager", "unemployed", "promotion"]),
    ("Interpersonal Conflict", &["fight", "argue", "argument", "husband", "wife", "partner", "friend", "sister", "brother", "mother", "father", "mom", "dad", "boyfriend", "girlfriend"]),
    ("Breakup", &["breakup", "divorce", "ex", "cheated", "left", "dumped"]),
    ("Bereavement", &["died", "death", "funeral", "passed", "grief", "loss"]),
    ("Academic Pressure", &["exam", "exams", "school", "college", "grades", "study", "thesis"]),
    ("Health Concern", &["sick", "diagnosis", "hospital", "illness", "pain", "covid"]),
    ("Social Rejection", &["alone", "lonely", "rejected", "isolated", "excluded"]),
    ("Financial Strain", &["money", "debt", "rent", "bills", "afford"]),
];

/// Deterministic generator.
///
/// Replies are a function of `(prompt hash, seed)` only. Stressor prompts get
/// a well-formed two-line reply derived from keywords in the target utterance;
/// generation prompts get one of the few-shot exemplars found in the prompt
/// with a hash-selected tail anchored on the stressor. A configurable fraction
/// of replies is deliberately unparseable, for exercising fallback paths.
#[derive(Clone, Debug, Default)]
pub struct StubGenerator {
    garbage_rate: f64,
}

impl StubGenerator {
    pub fn new() -> Self {
        StubGenerator::default()
    }

    pub fn with_garbage_rate(rate: f64) -> Self {
        StubGenerator {
            garbage_rate: rate.clamp(0.0, 1.0),
        }
    }

    fn reply_for(&self, prompt: &str, h: u64) -> String {
        let garbage = unit_interval(mix64(h ^ 0x5eed)) < self.garbage_rate;
        if prompt.contains(STRESSOR_TASK_MARKER) {
            if garbage {
                return "I cannot determine this.".to_string();
            }
            let target = section_after(prompt, "### TARGET UTTERANCE:").unwrap_or("");
            let tokens = tokenize(target);
            let category = STRESSOR_KEYWORDS
                .iter()
                .find(|(_, words)| tokens.iter().any(|t| words.contains(&t.as_str())))
                .map(|(c, _)| *c)
                .unwrap_or("Self-Esteem Threat");
            return format!(
                "1. Stressor Category: {category}\n2. Description: The seeker is struggling with {}.",
                category.to_lowercase()
            );
        }
        if garbage {
            return "```\n```".to_string();
        }
        if prompt.contains(GENERATION_TASK_MARKER) {
            let exemplars = quoted_list_items(prompt);
            if !exemplars.is_empty() {
                let pick = exemplars[(h % exemplars.len() as u64) as usize];
                let stressor = line_value(prompt, "STRESSOR:")
                    .map(|s| s.split(':').next().unwrap_or(s).trim().to_lowercase())
                    .unwrap_or_default();
                const TAILS: &[&str] = &[
                    "",
                    " That's just how it is with the {s}.",
                    " All of this is about the {s}.",
                    " Anyway, the {s} is what it is.",
                    " It keeps coming back to the {s}.",
                    " Honestly.",
                    " Since the {s}, that is how I deal with it.",
                ];
                let tail = TAILS[((h >> 17) % TAILS.len() as u64) as usize].replace("{s}", &stressor);
                let body = format!("{pick}{tail}");
                return if (h >> 40).is_multiple_of(4) {
                    format!("\"{body}\"")
                } else {
                    body
                };
            }
        }
        format!("stub reply {:016x}", h)
    }
}

fn section_after<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = prompt[start..].trim_start();
    let line = rest.lines().next()?.trim();
    Some(line.strip_prefix('"').and_then(|l| l.strip_suffix('"')).unwrap_or(line))
}

fn line_value<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix(key))
        .map(str::trim)
}

/// Items of the form `N. "text"`.
fn quoted_list_items(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            let (num, rest) = l.split_once(". ")?;
            if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            rest.strip_prefix('"')?.strip_suffix('"')
        })
        .filter(|s| !s.trim().is_empty())
        .collect()
}

impl Generator for StubGenerator {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        require_text("prompt", prompt)?;
        params.validate()?;
        let h = mix64(fnv1a64(prompt.as_bytes()) ^ mix64(params.seed.unwrap_or(0)));
        Ok(self.reply_for(prompt, h))
    }
}

/// Lexical-overlap entailment: the overlap coefficient of the content-word
/// sets, `|P ∩ H| / min(|P|, |H|)`. Identical texts score 1, disjoint 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubNli;

impl NliScorer for StubNli {
    fn entail(&self, premise: &str, hypothesis: &str) -> Result<f64, BackendError> {
        require_text("premise", premise)?;
        require_text("hypothesis", hypothesis)?;
        let p: BTreeSet<String> = content_tokens(premise).into_iter().collect();
        let h: BTreeSet<String> = content_tokens(hypothesis).into_iter().collect();
        let denom = p.len().min(h.len());
        if denom == 0 {
            return Ok(0.0);
        }
        Ok(p.intersection(&h).count() as f64 / denom as f64)
    }
}

const EMOTION_LEXICON: &[(&str, &str)] = &[
    ("devastated", "sadness"),
    ("sad", "sadness"),
    ("depressed", "sadness"),
    ("cry", "sadness"),
    ("crying", "sadness"),
    ("lonely", "sadness"),
    ("hurt", "sadness"),
    ("hurts", "sadness"),
    ("grief", "sadness"),
    ("miserable", "sadness"),
    ("angry", "anger"),
    ("mad", "anger"),
    ("furious", "anger"),
    ("hate", "anger"),
    ("yelled", "anger"),
    ("snapped", "anger"),
    ("scared", "fear"),
    ("afraid", "fear"),
    ("anxious", "fear"),
    ("worried", "fear"),
    ("terrified", "fear"),
    ("panic", "fear"),
    ("ashamed", "shame"),
    ("embarrassed", "shame"),
    ("worthless", "shame"),
    ("happy", "joy"),
    ("grateful", "joy"),
    ("thrilled", "joy"),
    ("glad", "joy"),
    ("laugh", "joy"),
];

/// Lexicon-based emotion scorer. No hits gives `neutral` at 0.6 confidence;
/// `n` hits give the majority emotion at `0.5 + 0.5 * (1 - e^-n)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubEmotion;

impl EmotionScorer for StubEmotion {
    fn score(&self, text: &str) -> Result<EmotionResult, BackendError> {
        require_text("text", text)?;
        let mut tally: Vec<(&str, usize)> = Vec::new();
        let mut hits = 0usize;
        for token in tokenize(text) {
            if let Some((_, emotion)) = EMOTION_LEXICON.iter().find(|(w, _)| *w == token) {
                hits += 1;
                match tally.iter_mut().find(|(e, _)| e == emotion) {
                    Some(slot) => slot.1 += 1,
                    None => tally.push((emotion, 1)),
                }
            }
        }
        if hits == 0 {
            return Ok(EmotionResult::new(NEUTRAL_EMOTION, 0.6));
        }
        // first-seen wins ties
        let mut best = tally[0];
        for &(e, c) in &tally[1..] {
            if c > best.1 {
                best = (e, c);
            }
        }
        let confidence = 0.5 + 0.5 * (1.0 - libm::exp(-(hits as f64)));
        Ok(EmotionResult::new(best.0, confidence))
    }
}

/// Deterministic encoder: signed feature hashing of tokens into
/// `hash_dim` buckets, L2-normalized, then a trainable linear projection
/// to [`EMBEDDING_DIM`] components.
#[derive(Clone, Debug, PartialEq)]
pub struct StubEncoder {
    hash_dim: usize,
    /// Row-major `EMBEDDING_DIM x hash_dim`.
    projection: Vec<f64>,
}

impl StubEncoder {
    pub const DEFAULT_HASH_DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_hash_dim(Self::DEFAULT_HASH_DIM, seed)
    }

    pub fn with_hash_dim(hash_dim: usize, seed: u64) -> Self {
        let hash_dim = hash_dim.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // unit variance entries
        let bound = libm::sqrt(3.0);
        let projection = (0..EMBEDDING_DIM * hash_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        StubEncoder {
            hash_dim,
            projection,
        }
    }

    pub fn hash_dim(&self) -> usize {
        self.hash_dim
    }

    /// Rebuild from stored parameters (checkpoint restore).
    pub fn from_params(hash_dim: usize, projection: Vec<f64>) -> Result<Self, BackendError> {
        if hash_dim == 0 || projection.len() != EMBEDDING_DIM * hash_dim {
            return Err(BackendError::InvalidRequest(format!(
                "stub encoder expects {} parameters for hash_dim {hash_dim}, got {}",
                EMBEDDING_DIM * hash_dim,
                projection.len()
            )));
        }
        Ok(StubEncoder {
            hash_dim,
            projection,
        })
    }

    fn hashed_features(&self, text: &str) -> Vec<f64> {
        let mut features = alloc::vec![0.0; self.hash_dim];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.hash_dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            features[bucket] += sign;
        }
        let norm = libm::sqrt(features.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            features.iter_mut().for_each(|v| *v /= norm);
        }
        features
    }
}

impl TextEncoder for StubEncoder {
    fn encode(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        require_text("text", text)?;
        let h = self.hashed_features(text);
        Ok(self
            .projection
            .chunks_exact(self.hash_dim)
            .map(|row| row.iter().zip(&h).map(|(w, x)| w * x).sum())
            .collect())
    }

    fn kind(&self) -> &str {
        "stub"
    }

    fn trainable_params(&self) -> &[f64] {
        &self.projection
    }

    fn trainable_params_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    fn accumulate_grad(
        &self,
        text: &str,
        grad_embedding: &[f64],
        grad: &mut [f64],
    ) -> Result<(), BackendError> {
        if grad_embedding.len() != EMBEDDING_DIM || grad.len() != self.projection.len() {
            return Err(BackendError::InvalidRequest("gradient shape mismatch".into()));
        }
        let h = self.hashed_features(text);
        for (g_row, &g) in grad.chunks_exact_mut(self.hash_dim).zip(grad_embedding) {
            if g != 0.0 {
                for (slot, x) in g_row.iter_mut().zip(&h) {
                    *slot += g * x;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
        let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
        dot / (na * nb)
    }

    #[test]
    fn stub_generator_is_deterministic_and_seed_sensitive() {
        let g = StubGenerator::new();
        let p = GenerationParams::default();
        let a = g.complete("hello there", &p.with_seed(0)).unwrap();
        assert_eq!(a, g.complete("hello there", &p.with_seed(0)).unwrap());
        assert_ne!(a, g.complete("hello there", &p.with_seed(1)).unwrap());
        assert!(g.complete("  ", &p).is_err());
    }

    #[test]
    fn stub_generator_answers_stressor_prompts() {
        let prompt = "### TASK: Clinical Stressor Identification\n### TARGET UTTERANCE:\n    \"I lost my job\"\n";
        let reply = StubGenerator::new()
            .complete(prompt, &GenerationParams::default())
            .unwrap();
        assert!(reply.starts_with("1. Stressor Category: Job Loss"));
    }

    #[test]
    fn stub_nli_contract() {
        let nli = StubNli;
        let s = "I feel like nobody at work respects me";
        assert!(nli.entail(s, s).unwrap() >= 0.9);
        assert!(nli.entail("cats purr loudly", "markets crashed yesterday").unwrap() <= 0.1);
        let hyps: Vec<String> = (0..150).map(|i| format!("statement number {i}")).collect();
        let refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let scores = nli.entail_batch("statement number 7", &refs).unwrap();
        assert_eq!(scores.len(), 150);
        for (i, h) in refs.iter().enumerate() {
            assert_eq!(scores[i], nli.entail("statement number 7", h).unwrap());
            assert!((0.0..=1.0).contains(&scores[i]));
        }
    }

    #[test]
    fn stub_emotion_contract() {
        let e = StubEmotion;
        assert!(e.score("okay.").unwrap().is_neutral);
        let r = e.score("I am devastated").unwrap();
        assert!(!r.is_neutral);
        assert!(r.confidence > 0.5);
        assert!(e.score("").is_err());
    }

    #[test]
    fn stub_encoder_contract() {
        let enc = StubEncoder::new(3);
        let a = enc.encode("my boss fired me today").unwrap();
        assert_eq!(a.len(), EMBEDDING_DIM);
        assert_eq!(a, enc.encode("my boss fired me today").unwrap());
        let b = enc.encode("the weather in spain is sunny").unwrap();
        assert!(cosine(&a, &b) < 0.99);
    }

    #[test]
    fn stub_encoder_gradient_matches_finite_difference() {
        let mut enc = StubEncoder::with_hash_dim(8, 1);
        let text = "a small probe sentence";
        let g: Vec<f64> = (0..EMBEDDING_DIM).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let loss = |e: &StubEncoder| -> f64 {
            e.encode(text).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let mut grad = alloc::vec![0.0; enc.trainable_params().len()];
        enc.accumulate_grad(text, &g, &mut grad).unwrap();
        for idx in [0usize, 5, 100, 777, 6000] {
            let orig = enc.trainable_params()[idx];
            enc.trainable_params_mut()[idx] = orig + 1e-6;
            let up = loss(&enc);
            enc.trainable_params_mut()[idx] = orig - 1e-6;
            let down = loss(&enc);
            enc.trainable_params_mut()[idx] = orig;
            assert!(((up - down) / 2e-6 - grad[idx]).abs() < 1e-6);
        }
    }
}

//! Toxicity analysis of chat text and screenshots.
//!
//! A [`Scorer`] produces per-category scores in `[0, 1]` (and optionally the
//! spans that caused them); [`classify`] turns scores into a verdict using the
//! configured thresholds. Two scorers ship with the crate: the offline
//! [`Lexicon`] and the HTTP [`RemoteScorer`].
//!
//! Nothing in this module writes the analyzed text anywhere. Reports hold
//! spans of the input only so the caller can highlight them in a response.

mod extract;
mod lexicon;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use extract::{CommandExtractor, StubExtractor, TextExtractor};
pub use lexicon::{tokenize, Lexicon, LexiconEntry, LexiconError, Token, BUNDLED_LEXICON};
pub use remote::{parse_remote_response, remote_request_body, RemoteScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ToxicityCategory {
    Toxicity,
    SevereToxicity,
    Insult,
    Threat,
    IdentityAttack,
    Profanity,
}

impl ToxicityCategory {
    pub const ALL: [ToxicityCategory; 6] = [
        ToxicityCategory::Toxicity,
        ToxicityCategory::SevereToxicity,
        ToxicityCategory::Insult,
        ToxicityCategory::Threat,
        ToxicityCategory::IdentityAttack,
        ToxicityCategory::Profanity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToxicityCategory::Toxicity => "TOXICITY",
            ToxicityCategory::SevereToxicity => "SEVERE_TOXICITY",
            ToxicityCategory::Insult => "INSULT",
            ToxicityCategory::Threat => "THREAT",
            ToxicityCategory::IdentityAttack => "IDENTITY_ATTACK",
            ToxicityCategory::Profanity => "PROFANITY",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ToxicityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToxicityCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToxicityCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// One score per category, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CategoryScores([f64; 6]);

#[derive(Debug, Error, Clone, PartialEq)]
#[error("score {value} for {category} is outside [0, 1]")]
pub struct ScoreOutOfRange {
    pub category: ToxicityCategory,
    pub value: f64,
}

impl CategoryScores {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn get(&self, category: ToxicityCategory) -> f64 {
        self.0[category.index()]
    }

    pub fn set(&mut self, category: ToxicityCategory, value: f64) -> Result<(), ScoreOutOfRange> {
        if !(0.0..=1.0).contains(&value) {
            return Err(ScoreOutOfRange { category, value });
        }
        self.0[category.index()] = value;
        Ok(())
    }

    pub fn with(mut self, category: ToxicityCategory, value: f64) -> Result<Self, ScoreOutOfRange> {
        self.set(category, value)?;
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ToxicityCategory, f64)> + '_ {
        ToxicityCategory::ALL.into_iter().map(|c| (c, self.get(c)))
    }

    /// Highest score and the first category (in canonical order) holding it.
    pub fn max(&self) -> (ToxicityCategory, f64) {
        self.iter()
            .fold((ToxicityCategory::Toxicity, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best })
    }
}

impl Serialize for CategoryScores {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(self.iter())
    }
}

impl<'de> Deserialize<'de> for CategoryScores {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let map = BTreeMap::<ToxicityCategory, f64>::deserialize(deserializer)?;
        let mut scores = CategoryScores::zero();
        for c in ToxicityCategory::ALL {
            let v = map.get(&c).ok_or_else(|| D::Error::custom(format!("missing score for {c}")))?;
            scores.set(c, *v).map_err(D::Error::custom)?;
        }
        Ok(scores)
    }
}

/// A phrase in the analyzed text that contributed to a score. Offsets are
/// byte offsets into the analyzed text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedSpan {
    pub start: usize,
    pub length: usize,
    pub category: ToxicityCategory,
    pub matched: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    Caution,
    Abusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSource {
    DirectText,
    Screenshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityReport {
    pub scores: CategoryScores,
    pub spans: Vec<FlaggedSpan>,
    pub verdict: Verdict,
    pub source: InputSource,
    pub analyzed_at: DateTime<Utc>,
    pub scorer_id: String,
}

impl ToxicityReport {
    /// Verdict and scores only. Safe to persist.
    pub fn summary(&self) -> String {
        let scores = self
            .scores
            .iter()
            .map(|(c, v)| format!("{c}={v:.3}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!("verdict={:?} scorer={} {scores}", self.verdict, self.scorer_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerMode {
    Remote,
    Lexicon,
}

impl FromStr for ScorerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(ScorerMode::Remote),
            "lexicon" => Ok(ScorerMode::Lexicon),
            _ => Err(format!("unknown scorer mode {s:?} (expected lexicon or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub mode: ScorerMode,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_env: Option<String>,
    pub timeout_secs: u64,
    pub abusive_threshold: f64,
    pub caution_threshold: f64,
    pub max_text_bytes: usize,
    pub max_in_flight: usize,
    /// Lexicon file; the bundled English lexicon when unset.
    pub lexicon_path: Option<PathBuf>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            mode: ScorerMode::Lexicon,
            endpoint: None,
            credential_env: None,
            timeout_secs: 10,
            abusive_threshold: 0.8,
            caution_threshold: 0.5,
            max_text_bytes: 20_000,
            max_in_flight: 8,
            lexicon_path: None,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ToxError> {
        let (c, a) = (self.caution_threshold, self.abusive_threshold);
        if !(0.0 <= c && c <= a && a <= 1.0) {
            return Err(ToxError::InvalidConfig(format!(
                "thresholds must satisfy 0 <= caution ({c}) <= abusive ({a}) <= 1"
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ToxError::InvalidConfig("max_in_flight must be positive".into()));
        }
        if self.mode == ScorerMode::Remote && (self.endpoint.is_none() || self.credential_env.is_none()) {
            return Err(ToxError::InvalidConfig(
                "remote mode needs both endpoint and credential_env".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToxError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("input text is {len} bytes, the limit is {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("scorer protocol error: {0}")]
    ProtocolError(String),
    #[error("text extraction failed: {0}")]
    ExtractionFailed(String),
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
}

/// Scores plus whatever spans the scorer can attribute them to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredText {
    pub scores: CategoryScores,
    pub spans: Vec<FlaggedSpan>,
}

pub trait Scorer: Send + Sync {
    /// Short name recorded in reports.
    fn id(&self) -> &str;
    fn score(&self, text: &str) -> Result<ScoredText, ToxError>;
}

/// Abusive at or above the abusive threshold, Caution at or above the
/// caution threshold, otherwise Clean. Only the maximum category matters.
pub fn classify(scores: &CategoryScores, config: &ScorerConfig) -> Verdict {
    let (_, m) = scores.max();
    if m >= config.abusive_threshold {
        Verdict::Abusive
    } else if m >= config.caution_threshold {
        Verdict::Caution
    } else {
        Verdict::Clean
    }
}

pub fn analyze_text(text: &str, scorer: &dyn Scorer, config: &ScorerConfig) -> Result<ToxicityReport, ToxError> {
    if text.trim().is_empty() {
        return Err(ToxError::EmptyInput);
    }
    if text.len() > config.max_text_bytes {
        return Err(ToxError::TextTooLong {
            len: text.len(),
            max: config.max_text_bytes,
        });
    }
    let ScoredText { scores, spans } = scorer.score(text)?;
    Ok(ToxicityReport {
        verdict: classify(&scores, config),
        scores,
        spans,
        source: InputSource::DirectText,
        analyzed_at: Utc::now(),
        scorer_id: scorer.id().to_string(),
    })
}

pub fn analyze_image(
    image: &[u8],
    extractor: &dyn TextExtractor,
    scorer: &dyn Scorer,
    config: &ScorerConfig,
) -> Result<ToxicityReport, ToxError> {
    if image.is_empty() {
        return Err(ToxError::ExtractionFailed("image is empty".into()));
    }
    let text = extractor.extract(image)?;
    if text.trim().is_empty() {
        return Err(ToxError::ExtractionFailed("no text found in image".into()));
    }
    let mut report = analyze_text(&text, scorer, config)?;
    report.source = InputSource::Screenshot;
    Ok(report)
}

/// Builds the scorer selected by `config.mode`.
pub fn build_scorer(config: &ScorerConfig) -> Result<Box<dyn Scorer>, ToxError> {
    config.validate()?;
    Ok(match config.mode {
        ScorerMode::Lexicon => match &config.lexicon_path {
            Some(path) => Box::new(Lexicon::load(path).map_err(|e| ToxError::InvalidConfig(e.to_string()))?),
            None => Box::new(Lexicon::bundled()),
        },
        ScorerMode::Remote => Box::new(RemoteScorer::from_config(config)?),
    })
}

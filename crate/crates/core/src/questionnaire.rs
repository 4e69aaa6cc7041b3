//! Weighted relationship-health questionnaire.
//!
//! Positivity is the weighted mean of effective option scores, where
//! reverse-scored questions contribute `1 - s`. The same mean is reported per
//! dimension. The category comes from two band boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{HistoryEvent, HistoryKind};
use crate::model::{fresh_id, UserId};
use crate::store::{Collection, Put, Store, StoreError};

pub const BUNDLED_RELATIONSHIP_V1: &str = include_str!("../questionnaires/relationship_v1.json");

/// Tolerance applied at band boundaries so that a weighted mean that is
/// mathematically equal to a boundary is not pushed below it by rounding.
const BAND_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    Communication,
    Trust,
    EmotionalWellBeing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Healthy,
    NeedsReflection,
    Unhealthy,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Healthy => "Healthy",
            Category::NeedsReflection => "Needs Reflection",
            Category::Unhealthy => "Unhealthy",
        })
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Healthy" => Ok(Category::Healthy),
            "NeedsReflection" | "Needs Reflection" => Ok(Category::NeedsReflection),
            "Unhealthy" => Ok(Category::Unhealthy),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub dimension: Dimension,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub reverse: bool,
    pub options: Vec<AnswerOption>,
}

fn default_weight() -> f64 {
    1.0
}

impl Question {
    /// Score of the chosen option after reverse-scoring.
    pub fn effective_score(&self, index: usize) -> Option<f64> {
        let raw = self.options.get(index)?.score;
        Some(if self.reverse { 1.0 - raw } else { raw })
    }
}

/// Lower bounds of the Healthy and NeedsReflection bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bands {
    pub healthy: f64,
    pub needs_reflection: f64,
}

impl Default for Bands {
    fn default() -> Self {
        Self {
            healthy: 0.70,
            needs_reflection: 0.40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackTable {
    #[serde(rename = "Healthy")]
    pub healthy: String,
    #[serde(rename = "NeedsReflection")]
    pub needs_reflection: String,
    #[serde(rename = "Unhealthy")]
    pub unhealthy: String,
}

impl Default for FeedbackTable {
    fn default() -> Self {
        Self {
            healthy: "Healthy \u{2013} your answers describe mutual respect and support. Keep looking after each other."
                .into(),
            needs_reflection: "Caution \u{2013} signs of concern. Please reflect.".into(),
            unhealthy: "Unhealthy \u{2013} several answers describe patterns that can cause harm. Consider talking to someone you trust or a support service."
                .into(),
        }
    }
}

impl FeedbackTable {
    pub fn for_category(&self, category: Category) -> &str {
        match category {
            Category::Healthy => &self.healthy,
            Category::NeedsReflection => &self.needs_reflection,
            Category::Unhealthy => &self.unhealthy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub id: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub questions: Vec<Question>,
    #[serde(default)]
    pub feedback: FeedbackTable,
    #[serde(default)]
    pub bands: Bands,
}

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error("cannot read questionnaire: {0}")]
    Io(#[from] std::io::Error),
    #[error("questionnaire is not valid JSON: {0}")]
    Parse(String),
    #[error("invalid questionnaire: {0}")]
    Validation(String),
    #[error("unanswered questions: {}", .missing.join(", "))]
    IncompleteResponses { missing: Vec<String> },
    #[error("responses are for {got_id} v{got_version}, questionnaire is {expected_id} v{expected_version}")]
    VersionMismatch {
        expected_id: String,
        expected_version: u32,
        got_id: String,
        got_version: u32,
    },
    #[error("invalid answer for {question}: {reason}")]
    InvalidAnswer { question: String, reason: String },
    #[error("questionnaire {0} not found")]
    NotFound(String),
}

impl Questionnaire {
    pub fn parse(json: &str) -> Result<Self, QuestionnaireError> {
        let q: Questionnaire = serde_json::from_str(json).map_err(|e| QuestionnaireError::Parse(e.to_string()))?;
        q.validate()?;
        Ok(q)
    }

    pub fn load(path: &Path) -> Result<Self, QuestionnaireError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RELATIONSHIP_V1).expect("bundled questionnaire is valid")
    }

    pub fn validate(&self) -> Result<(), QuestionnaireError> {
        let invalid = |m: String| Err(QuestionnaireError::Validation(m));
        if self.id.trim().is_empty() {
            return invalid("id must not be empty".into());
        }
        if self.questions.is_empty() {
            return invalid("questionnaire has no questions".into());
        }
        let mut ids = HashSet::new();
        let mut total = 0.0;
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                return invalid(format!("duplicate question id {:?}", q.id));
            }
            if q.prompt.trim().is_empty() {
                return invalid(format!("{}: empty prompt", q.id));
            }
            if !(q.weight.is_finite() && q.weight > 0.0) {
                return invalid(format!("{}: weight must be positive, got {}", q.id, q.weight));
            }
            if q.options.len() < 2 {
                return invalid(format!("{}: needs at least two options", q.id));
            }
            for o in &q.options {
                if !(0.0..=1.0).contains(&o.score) {
                    return invalid(format!("{}: option {:?} score {} outside [0, 1]", q.id, o.label, o.score));
                }
            }
            total += q.weight;
        }
        if !(total.is_finite() && total > 0.0) {
            return invalid("total weight must be positive".into());
        }
        let b = self.bands;
        if !(0.0..=1.0).contains(&b.needs_reflection) || !(0.0..=1.0).contains(&b.healthy) || b.needs_reflection > b.healthy {
            return invalid(format!(
                "bands must satisfy 0 <= needs_reflection <= healthy <= 1, got {} and {}",
                b.needs_reflection, b.healthy
            ));
        }
        Ok(())
    }

    pub fn dimensions(&self) -> Vec<Dimension> {
        let mut d: Vec<Dimension> = self.questions.iter().map(|q| q.dimension).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn categorize(&self, positivity: f64) -> (Category, &str) {
        let category = categorize_with(positivity, &self.bands);
        (category, self.feedback.for_category(category))
    }
}

/// Band lookup: `P >= healthy` is Healthy, `P >= needs_reflection` is
/// NeedsReflection, anything lower is Unhealthy.
pub fn categorize_with(positivity: f64, bands: &Bands) -> Category {
    if positivity + BAND_EPSILON >= bands.healthy {
        Category::Healthy
    } else if positivity + BAND_EPSILON >= bands.needs_reflection {
        Category::NeedsReflection
    } else {
        Category::Unhealthy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub questionnaire_id: String,
    pub version: u32,
    /// Question id to selected option index.
    pub answers: BTreeMap<String, usize>,
    #[serde(default)]
    pub submitted_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub questionnaire_id: String,
    pub version: u32,
    pub positivity: f64,
    pub category: Category,
    pub dimensions: BTreeMap<Dimension, f64>,
    pub feedback: String,
    pub scored_at: DateTime<Utc>,
}

pub fn score_responses(
    q: &Questionnaire,
    responses: &ResponseSet,
    scored_at: DateTime<Utc>,
) -> Result<Assessment, QuestionnaireError> {
    if responses.questionnaire_id != q.id || responses.version != q.version {
        return Err(QuestionnaireError::VersionMismatch {
            expected_id: q.id.clone(),
            expected_version: q.version,
            got_id: responses.questionnaire_id.clone(),
            got_version: responses.version,
        });
    }
    let known: HashSet<&str> = q.questions.iter().map(|q| q.id.as_str()).collect();
    if let Some(unknown) = responses.answers.keys().find(|k| !known.contains(k.as_str())) {
        return Err(QuestionnaireError::InvalidAnswer {
            question: unknown.clone(),
            reason: "no such question".into(),
        });
    }
    let missing: Vec<String> = q
        .questions
        .iter()
        .filter(|question| !responses.answers.contains_key(&question.id))
        .map(|question| question.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(QuestionnaireError::IncompleteResponses { missing });
    }

    let mut total = (0.0, 0.0);
    let mut per_dim: BTreeMap<Dimension, (f64, f64)> = BTreeMap::new();
    for question in &q.questions {
        let index = responses.answers[&question.id];
        let s = question
            .effective_score(index)
            .ok_or_else(|| QuestionnaireError::InvalidAnswer {
                question: question.id.clone(),
                reason: format!("option index {index} out of range 0..{}", question.options.len()),
            })?;
        total.0 += question.weight * s;
        total.1 += question.weight;
        let d = per_dim.entry(question.dimension).or_insert((0.0, 0.0));
        d.0 += question.weight * s;
        d.1 += question.weight;
    }
    let positivity = (total.0 / total.1).clamp(0.0, 1.0);
    let (category, feedback) = q.categorize(positivity);
    Ok(Assessment {
        questionnaire_id: q.id.clone(),
        version: q.version,
        positivity,
        category,
        dimensions: per_dim
            .into_iter()
            .map(|(d, (num, den))| (d, (num / den).clamp(0.0, 1.0)))
            .collect(),
        feedback: feedback.to_string(),
        scored_at,
    })
}

/// Questionnaires available to the service, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct QuestionnaireRegistry {
    by_id: HashMap<String, Questionnaire>,
}

impl QuestionnaireRegistry {
    pub fn with_bundled() -> Self {
        let mut r = Self::default();
        r.insert(Questionnaire::bundled());
        r
    }

    pub fn insert(&mut self, q: Questionnaire) {
        self.by_id.insert(q.id.clone(), q);
    }

    pub fn get(&self, id: &str) -> Result<&Questionnaire, QuestionnaireError> {
        self.by_id.get(id).ok_or_else(|| QuestionnaireError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.by_id.keys().map(String::as_str).collect();
        ids.sort();
        ids
    }
}

/// What is kept of an assessment: the outcome, never the answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAssessment {
    pub assessment_id: String,
    pub user_id: UserId,
    pub questionnaire_id: String,
    pub version: u32,
    pub positivity: f64,
    pub category: Category,
    pub dimensions: BTreeMap<Dimension, f64>,
    pub scored_at: DateTime<Utc>,
}

/// Persists the outcome and a history entry in one batch.
pub fn record_assessment(store: &dyn Store, user: &UserId, a: &Assessment) -> Result<StoredAssessment, StoreError> {
    let stored = StoredAssessment {
        assessment_id: fresh_id("asm"),
        user_id: user.clone(),
        questionnaire_id: a.questionnaire_id.clone(),
        version: a.version,
        positivity: a.positivity,
        category: a.category,
        dimensions: a.dimensions.clone(),
        scored_at: a.scored_at,
    };
    let event = HistoryEvent::new(
        user.clone(),
        HistoryKind::QuestionnaireScored,
        format!("{} {:.2} ({})", a.questionnaire_id, a.positivity, a.category),
        a.scored_at,
    );
    store.apply(vec![
        Put::typed(Collection::Assessments, stored.assessment_id.as_str(), &stored)?.expecting(0),
        event.into_put()?,
    ])?;
    Ok(stored)
}

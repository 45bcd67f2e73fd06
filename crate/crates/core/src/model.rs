//! Candidate model declarations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One area-level random effect term.
///
/// Serialized as `"intercept"`, `{"slope": "experience"}` or
/// `{"interaction": "occupation"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomTerm {
    /// Random area intercept.
    Intercept,
    /// Random area slope on a continuous variable.
    Slope(String),
    /// One independent random area effect per non-reference level of a
    /// categorical variable.
    Interaction(String),
}

impl RandomTerm {
    pub fn variable(&self) -> Option<&str> {
        match self {
            RandomTerm::Intercept => None,
            RandomTerm::Slope(v) | RandomTerm::Interaction(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    /// Fixed-effect variables; an intercept is always added in front.
    pub fixed: Vec<String>,
    #[serde(default)]
    pub random: Vec<RandomTerm>,
}

impl ModelSpec {
    pub fn new(label: impl Into<String>, fixed: &[&str], random: Vec<RandomTerm>) -> Self {
        ModelSpec {
            label: label.into(),
            fixed: fixed.iter().map(|s| s.to_string()).collect(),
            random,
        }
    }

    pub fn is_fixed_only(&self) -> bool {
        self.random.is_empty()
    }

    /// The working model with some variables removed.
    ///
    /// Dropped variables leave the fixed part; a slope on a dropped variable
    /// disappears and an interaction with a dropped categorical collapses to a
    /// plain random intercept.
    pub fn without(&self, dropped: &[String]) -> ModelSpec {
        let is_dropped = |v: &str| dropped.iter().any(|d| d == v);
        let fixed = self
            .fixed
            .iter()
            .filter(|v| !is_dropped(v))
            .cloned()
            .collect();
        let mut random: Vec<RandomTerm> = Vec::new();
        for term in &self.random {
            let next = match term {
                RandomTerm::Slope(v) if is_dropped(v) => None,
                RandomTerm::Interaction(v) if is_dropped(v) => Some(RandomTerm::Intercept),
                other => Some(other.clone()),
            };
            if let Some(t) = next {
                if !random.contains(&t) {
                    random.push(t);
                }
            }
        }
        ModelSpec {
            label: self.label.clone(),
            fixed,
            random,
        }
    }
}

/// Contents of a candidate-model file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub models: Vec<ModelSpec>,
    /// Fixed-effect model used as the classic Oaxaca-Blinder benchmark in
    /// simulations. Defaults to the first candidate's fixed part.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ModelSpec>,
}

impl CandidateSet {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: CandidateSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config(vec!["candidate file lists no models".into()]));
        }
        let mut labels: Vec<&str> = self.models.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(vec![format!("duplicate model label `{}`", w[0])]));
        }
        Ok(())
    }

    pub fn baseline(&self) -> ModelSpec {
        self.baseline.clone().unwrap_or_else(|| ModelSpec {
            label: "OB".into(),
            fixed: self.models[0].fixed.clone(),
            random: Vec::new(),
        })
    }

    pub fn get(&self, label: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.label == label)
    }
}

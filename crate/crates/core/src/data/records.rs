use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// A sentence pair with a graded similarity label.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub sentence_a: String,
    pub sentence_b: String,
    /// Label as it appears in the file.
    pub score: f64,
    /// `score` mapped linearly from the dataset's declared range onto `[0, 1]`.
    pub score_norm: f64,
}

/// Declared label range of a scored-pair dataset, e.g. `(1, 5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn normalize(&self, score: f64) -> f64 {
        (score - self.min) / (self.max - self.min)
    }

    pub fn contains(&self, score: f64) -> bool {
        score >= self.min && score <= self.max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Queries, passages and relevance judgments of a retrieval dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QrelSet {
    /// `(id, text)` in file order.
    pub queries: Vec<(String, String)>,
    /// `(id, text)` in file order.
    pub passages: Vec<(String, String)>,
    /// Every query id maps to its (possibly empty) set of relevant passages.
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

impl QrelSet {
    pub fn relevant_for(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }
}

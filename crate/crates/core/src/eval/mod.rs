//! STS and retrieval evaluation: Spearman correlation, exact cosine ranking
//! and MRR@k.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{QrelSet, ScoredPair};
use crate::encoder::{EncoderError, EncoderModel};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {gold} gold values vs {pred} predictions")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("need at least 2 items for a correlation, got {0}")]
    TooFew(usize),
    #[error("undefined correlation: {0} has zero rank variance")]
    Undefined(&'static str),
    #[error("query {0:?} has no relevance judgments")]
    UnknownQuery(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(EvalError::Undefined("gold"));
    }
    if syy == 0.0 {
        return Err(EvalError::Undefined("prediction"));
    }
    // sqrt of a rounded square is exact, so identical rankings give exactly ±1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(gold: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.len() < 2 {
        return Err(EvalError::TooFew(gold.len()));
    }
    pearson(&midranks(gold), &midranks(pred))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Passage indices by descending cosine to `query`; ties go to the lower
/// index. A zero vector has cosine 0 with everything.
pub fn rank_passages(query: &[f32], passages: &Tensor<f32>) -> Vec<usize> {
    let m = passages.shape().first().copied().unwrap_or(0);
    let cos: Vec<f64> = (0..m).map(|j| cosine(query, passages.row(j))).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
    order
}

/// 1-based rank of the first relevant id within the top `k`, if any.
pub fn first_relevant_rank(
    ranking: &[String],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Option<usize> {
    ranking
        .iter()
        .take(k)
        .position(|p| relevant.contains(p))
        .map(|i| i + 1)
}

/// Mean reciprocal rank of the first relevant passage within the top `k`.
/// `rankings` pairs each query id with its ordered passage ids.
pub fn mrr_at_k(
    rankings: &[(String, Vec<String>)],
    qrels: &QrelSet,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if rankings.is_empty() {
        return Err(EvalError::Empty("no queries"));
    }
    let mut total = 0.0;
    for (q, ranking) in rankings {
        let rel = qrels
            .relevant_for(q)
            .ok_or_else(|| EvalError::UnknownQuery(q.clone()))?;
        if let Some(r) = first_relevant_rank(ranking, rel, k) {
            total += 1.0 / r as f64;
        }
    }
    Ok(total / rankings.len() as f64)
}

/// Per-item evaluation detail. Query ranks are uncut, so they may exceed `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalDetail {
    Pair {
        index: usize,
        cosine: f64,
        gold: f64,
    },
    Query {
        query_id: String,
        first_relevant_rank: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub n: usize,
    #[serde(skip)]
    pub details: Vec<EvalDetail>,
}

impl EvalReport {
    /// Summary record first, then one record per item when `details` is set.
    pub fn write_jsonl(&self, path: &Path, details: bool) -> Result<(), EvalError> {
        let io = |e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut out = Vec::new();
        let summary = serde_json::json!({
            "record": "summary", "metric": self.metric, "value": self.value, "dataset": self.dataset, "n": self.n,
        });
        writeln!(out, "{summary}").expect("write to vec");
        if details {
            for d in &self.details {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string(d).expect("detail serializes")
                )
                .expect("write to vec");
            }
        }
        std::fs::write(path, out).map_err(io)
    }
}

/// Cosine of each pair's embeddings, in pair order.
pub fn pair_cosines(model: &EncoderModel, pairs: &[ScoredPair]) -> Result<Vec<f64>, EvalError> {
    let a = model.embed_sentences(
        &pairs
            .iter()
            .map(|p| p.sentence_a.as_str())
            .collect::<Vec<_>>(),
    )?;
    let b = model.embed_sentences(
        &pairs
            .iter()
            .map(|p| p.sentence_b.as_str())
            .collect::<Vec<_>>(),
    )?;
    Ok((0..pairs.len())
        .map(|i| cosine(a.row(i), b.row(i)))
        .collect())
}

/// Spearman between raw gold scores and embedding cosines.
pub fn evaluate_sts(
    model: &EncoderModel,
    pairs: &[ScoredPair],
    dataset: &str,
) -> Result<EvalReport, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFew(pairs.len()));
    }
    let cos = pair_cosines(model, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let value = spearman(&gold, &cos)?;
    let details = cos
        .iter()
        .zip(&gold)
        .enumerate()
        .map(|(index, (&cosine, &gold))| EvalDetail::Pair {
            index,
            cosine,
            gold,
        })
        .collect();
    Ok(EvalReport {
        metric: "spearman".into(),
        value,
        dataset: dataset.into(),
        n: pairs.len(),
        details,
    })
}

/// Ranked passage ids for every query, by exact brute-force cosine.
pub fn rank_all(
    model: &EncoderModel,
    data: &QrelSet,
) -> Result<Vec<(String, Vec<String>)>, EvalError> {
    let passages = model.embed_sentences(
        &data
            .passages
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<Vec<_>>(),
    )?;
    let queries = model.embed_sentences(
        &data
            .queries
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<Vec<_>>(),
    )?;
    Ok(data
        .queries
        .iter()
        .enumerate()
        .map(|(qi, (qid, _))| {
            let order = rank_passages(queries.row(qi), &passages);
            (
                qid.clone(),
                order
                    .into_iter()
                    .map(|j| data.passages[j].0.clone())
                    .collect(),
            )
        })
        .collect())
}

/// MRR@k over every query in `data`.
pub fn evaluate_ir(
    model: &EncoderModel,
    data: &QrelSet,
    k: usize,
    dataset: &str,
) -> Result<EvalReport, EvalError> {
    if data.queries.is_empty() {
        return Err(EvalError::Empty("no queries"));
    }
    if data.passages.is_empty() {
        return Err(EvalError::Empty("no passages"));
    }
    let rankings = rank_all(model, data)?;
    let value = mrr_at_k(&rankings, data, k)?;
    let details = rankings
        .iter()
        .map(|(q, r)| EvalDetail::Query {
            query_id: q.clone(),
            first_relevant_rank: first_relevant_rank(r, &data.relevant[q], usize::MAX),
        })
        .collect();
    Ok(EvalReport {
        metric: format!("mrr@{k}"),
        value,
        dataset: dataset.into(),
        n: data.queries.len(),
        details,
    })
}

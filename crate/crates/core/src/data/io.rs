//! Line-oriented dataset files.
//!
//! | kind          | format                                                 |
//! |---------------|--------------------------------------------------------|
//! | scored pairs  | JSONL `{sentence_a, sentence_b, score}` or 3-column TSV |
//! | NLI pairs     | JSONL `{premise, hypothesis, label}`                   |
//! | triples       | JSONL `{anchor, positive, negative}`                   |
//! | sentences     | plain text, one per line                               |
//! | IR            | JSONL `{id, text}` + TSV `query_id \t passage_id`      |
//!
//! Files ending in `.tsv` are read as TSV where both forms exist. Blank lines
//! are skipped; line numbers in errors are 1-based.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::records::{LabeledPair, QrelSet, ScoreRange, ScoredPair, Triple};
use super::DataError;

fn read(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DataError::io(path, e))?;
    }
    std::fs::write(path, contents).map_err(|e| DataError::io(path, e))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn is_tsv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let text = read(path)?;
    lines(&text)
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| DataError::parse(path, n, e.to_string())))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    write(path, &out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoredRecord {
    sentence_a: String,
    sentence_b: String,
    score: f64,
}

/// Reads scored pairs and normalizes every label against `range`.
pub fn load_scored_pairs(path: &Path, range: ScoreRange) -> Result<Vec<ScoredPair>, DataError> {
    if range.min.partial_cmp(&range.max) != Some(std::cmp::Ordering::Less) {
        return Err(DataError::InvalidRange {
            min: range.min,
            max: range.max,
        });
    }
    let text = read(path)?;
    let tsv = is_tsv(path);
    let mut out = Vec::new();
    for (n, line) in lines(&text) {
        let rec: ScoredRecord = if tsv {
            let cols: Vec<&str> = line.split('\t').collect();
            let [a, b, s] = cols[..] else {
                return Err(DataError::parse(
                    path,
                    n,
                    format!("expected 3 tab-separated columns, got {}", cols.len()),
                ));
            };
            let score = s
                .trim()
                .parse()
                .map_err(|_| DataError::parse(path, n, format!("bad score {s:?}")))?;
            ScoredRecord {
                sentence_a: a.to_string(),
                sentence_b: b.to_string(),
                score,
            }
        } else {
            serde_json::from_str(line).map_err(|e| DataError::parse(path, n, e.to_string()))?
        };
        if !rec.score.is_finite() || !range.contains(rec.score) {
            return Err(DataError::ScoreOutOfRange {
                path: path.display().to_string(),
                line: n,
                score: rec.score,
                min: range.min,
                max: range.max,
            });
        }
        out.push(ScoredPair {
            score_norm: range.normalize(rec.score),
            sentence_a: rec.sentence_a,
            sentence_b: rec.sentence_b,
            score: rec.score,
        });
    }
    Ok(out)
}

/// Writes scored pairs in the format implied by the extension.
pub fn write_scored_pairs(path: &Path, pairs: &[ScoredPair]) -> Result<(), DataError> {
    if is_tsv(path) {
        let mut out = String::new();
        for p in pairs {
            writeln!(out, "{}\t{}\t{}", p.sentence_a, p.sentence_b, p.score).unwrap();
        }
        return write(path, &out);
    }
    let recs: Vec<ScoredRecord> = pairs
        .iter()
        .map(|p| ScoredRecord {
            sentence_a: p.sentence_a.clone(),
            sentence_b: p.sentence_b.clone(),
            score: p.score,
        })
        .collect();
    write_jsonl(path, &recs)
}

pub fn load_nli_pairs(path: &Path) -> Result<Vec<LabeledPair>, DataError> {
    read_jsonl(path)
}

pub fn write_nli_pairs(path: &Path, pairs: &[LabeledPair]) -> Result<(), DataError> {
    write_jsonl(path, pairs)
}

pub fn load_triples(path: &Path) -> Result<Vec<Triple>, DataError> {
    let text = read(path)?;
    lines(&text)
        .map(|(n, l)| {
            let t: Triple =
                serde_json::from_str(l).map_err(|e| DataError::parse(path, n, e.to_string()))?;
            if t.anchor.is_empty() || t.positive.is_empty() || t.negative.is_empty() {
                return Err(DataError::parse(
                    path,
                    n,
                    "triple fields must be non-empty".into(),
                ));
            }
            Ok(t)
        })
        .collect()
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<(), DataError> {
    write_jsonl(path, triples)
}

/// One sentence per non-blank line, surrounding whitespace trimmed.
pub fn load_sentences(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(lines(&read(path)?)
        .map(|(_, l)| l.trim().to_string())
        .collect())
}

pub fn write_sentences(path: &Path, sentences: &[String]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(s);
        out.push('\n');
    }
    write(path, &out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdText {
    id: String,
    text: String,
}

fn load_id_texts(path: &Path, kind: &'static str) -> Result<Vec<(String, String)>, DataError> {
    let recs: Vec<IdText> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &recs {
        if !seen.insert(r.id.as_str()) {
            return Err(DataError::DuplicateId {
                kind,
                id: r.id.clone(),
            });
        }
    }
    Ok(recs.into_iter().map(|r| (r.id, r.text)).collect())
}

/// Loads queries and passages (JSONL `{id, text}`) and qrels (TSV
/// `query_id \t passage_id`). Every query gets an entry in
/// [`QrelSet::relevant`], empty when no judgment names it.
pub fn load_ir_data(queries: &Path, passages: &Path, qrels: &Path) -> Result<QrelSet, DataError> {
    let queries = load_id_texts(queries, "query")?;
    let passages = load_id_texts(passages, "passage")?;
    let passage_ids: HashSet<&str> = passages.iter().map(|(id, _)| id.as_str()).collect();
    let mut relevant: BTreeMap<String, BTreeSet<String>> = queries
        .iter()
        .map(|(id, _)| (id.clone(), BTreeSet::new()))
        .collect();
    let text = read(qrels)?;
    for (n, line) in lines(&text) {
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [q, p] = cols[..] else {
            return Err(DataError::parse(
                qrels,
                n,
                format!("expected 2 tab-separated columns, got {}", cols.len()),
            ));
        };
        let Some(set) = relevant.get_mut(q) else {
            return Err(DataError::DanglingId {
                kind: "query",
                id: q.to_string(),
            });
        };
        if !passage_ids.contains(p) {
            return Err(DataError::DanglingId {
                kind: "passage",
                id: p.to_string(),
            });
        }
        set.insert(p.to_string());
    }
    Ok(QrelSet {
        queries,
        passages,
        relevant,
    })
}

/// Writes the three IR files in canonical form.
pub fn write_ir_data(
    queries: &Path,
    passages: &Path,
    qrels: &Path,
    data: &QrelSet,
) -> Result<(), DataError> {
    let to_recs = |v: &[(String, String)]| {
        v.iter()
            .map(|(id, text)| IdText {
                id: id.clone(),
                text: text.clone(),
            })
            .collect::<Vec<_>>()
    };
    write_jsonl(queries, &to_recs(&data.queries))?;
    write_jsonl(passages, &to_recs(&data.passages))?;
    let mut out = String::new();
    for (q, _) in &data.queries {
        for p in &data.relevant[q] {
            writeln!(out, "{q}\t{p}").unwrap();
        }
    }
    write(qrels, &out)
}

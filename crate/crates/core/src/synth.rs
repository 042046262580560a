//! Small synthetic Portuguese corpora for smoke tests and trend checks.
//!
//! *Clusters.* Five semantic clusters (weather, from hot sun to storm) whose
//! sentences fill three slots from per-cluster synonym lists, plus optional
//! filler words. Two sentences of the same cluster are paraphrases (gold 5);
//! clusters `c₁ ≠ c₂` score `4 − |c₁ − c₂|`, so gold is graded on 0–5.
//!
//! *Retrieval.* 40 invented entities × 5 topics give 200 passages. Queries
//! name the entity and ask about the topic with words that mostly differ from
//! the passage's. Three topics per entity are used for training triples; the
//! other two become held-out test queries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    nli_to_triples, write_ir_data, write_nli_pairs, write_scored_pairs, write_sentences,
    write_triples, DataError, LabeledPair, NliLabel, QrelSet, ScoredPair, Triple,
};

const CLUSTERS: [[[&str; 3]; 3]; 5] = [
    [
        ["sol", "astro", "claridade"],
        ["brilha", "arde", "queima"],
        ["forte", "intenso", "quente"],
    ],
    [
        ["tarde", "manhã", "jornada"],
        ["parece", "segue", "fica"],
        ["amena", "suave", "agradável"],
    ],
    [
        ["céu", "firmamento", "horizonte"],
        ["está", "permanece", "continua"],
        ["nublado", "cinzento", "encoberto"],
    ],
    [
        ["chuva", "garoa", "chuvisco"],
        ["cai", "desce", "molha"],
        ["fina", "leve", "constante"],
    ],
    [
        ["tempestade", "tormenta", "temporal"],
        ["destrói", "devasta", "arrasa"],
        ["telhados", "árvores", "cercas"],
    ],
];
const FILLERS: [&str; 5] = ["hoje", "agora", "ainda", "novamente", "aqui"];
pub const STS_RANGE: (f64, f64) = (0.0, 5.0);

const FIRST: [&str; 5] = ["ba", "ko", "ri", "mu", "te"];
const SECOND: [&str; 8] = ["sal", "dor", "nim", "vek", "lup", "tor", "zan", "pel"];
const TOPICS: [(&str, [&str; 3]); 5] = [
    (
        "nasceu numa vila costeira",
        ["onde nasceu", "terra natal de", "origem de"],
    ),
    (
        "trabalha como ferreiro na oficina",
        ["profissão de", "qual o ofício de", "emprego de"],
    ),
    (
        "gosta de pescar no rio",
        ["passatempo de", "hobby de", "lazer preferido de"],
    ),
    (
        "mora perto da montanha",
        ["residência de", "onde vive", "morada de"],
    ),
    (
        "casou com uma pintora",
        ["cônjuge de", "esposa de", "com quem casou"],
    ),
];
pub const N_ENTITIES: usize = 40;
pub const N_TOPICS: usize = 5;
pub const NEGATIVES_PER_QUERY: usize = 4;

/// Synonym choice per slot.
type Form = [usize; 3];

fn render(cluster: usize, form: Form, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = Vec::new();
    if rng.random_bool(0.5) {
        words.push(FILLERS.choose(rng).expect("fillers"));
    }
    words.extend((0..3).map(|s| CLUSTERS[cluster][s][form[s]]));
    if rng.random_bool(0.3) {
        words.push(FILLERS.choose(rng).expect("fillers"));
    }
    words.join(" ")
}

fn random_form(rng: &mut ChaCha8Rng) -> Form {
    [
        rng.random_range(0..3),
        rng.random_range(0..3),
        rng.random_range(0..3),
    ]
}

/// A form sharing no synonym with `other`.
fn disjoint_form(other: Form, rng: &mut ChaCha8Rng) -> Form {
    other.map(|o| (o + rng.random_range(1..3)) % 3)
}

pub fn cluster_sentence(cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let form = random_form(rng);
    render(cluster, form, rng)
}

pub fn cluster_gold(c1: usize, c2: usize) -> f64 {
    if c1 == c2 {
        5.0
    } else {
        4.0 - c1.abs_diff(c2) as f64
    }
}

/// `n` scored pairs, balanced over the five gold levels. Same-cluster pairs
/// never share a content word, so only learned synonymy links them.
pub fn sts_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<ScoredPair> {
    (0..n)
        .map(|i| {
            let distance = i % 5;
            let c1 = rng.random_range(0..5 - distance);
            let (c1, c2) = if rng.random_bool(0.5) {
                (c1, c1 + distance)
            } else {
                (c1 + distance, c1)
            };
            let fa = random_form(rng);
            let fb = if c1 == c2 {
                disjoint_form(fa, rng)
            } else {
                random_form(rng)
            };
            let score = cluster_gold(c1, c2);
            ScoredPair {
                sentence_a: render(c1, fa, rng),
                sentence_b: render(c2, fb, rng),
                score,
                score_norm: score / STS_RANGE.1,
            }
        })
        .collect()
}

/// NLI-style pairs: per premise two paraphrases (entailment), one
/// adjacent-cluster sentence (neutral) and two distant ones (contradiction).
pub fn nli_pairs(premises: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledPair> {
    let mut out = Vec::new();
    for _ in 0..premises {
        let c = rng.random_range(0..5);
        let form = random_form(rng);
        let premise = render(c, form, rng);
        let mut push = |hypothesis: String, label| {
            out.push(LabeledPair {
                premise: premise.clone(),
                hypothesis,
                label,
            });
        };
        for _ in 0..2 {
            let f = disjoint_form(form, rng);
            push(render(c, f, rng), NliLabel::Entailment);
        }
        let adjacent = if c == 0 || (c < 4 && rng.random_bool(0.5)) {
            c + 1
        } else {
            c - 1
        };
        push(cluster_sentence(adjacent, rng), NliLabel::Neutral);
        let far: Vec<usize> = (0..5usize).filter(|&o| o.abs_diff(c) >= 2).collect();
        for _ in 0..2 {
            let o = *far.choose(rng).expect("every cluster has a distant one");
            push(cluster_sentence(o, rng), NliLabel::Contradiction);
        }
    }
    out
}

pub fn entity_name(e: usize) -> String {
    format!("{}{}", FIRST[e % FIRST.len()], SECOND[e / FIRST.len()])
}

pub fn passage_id(e: usize, t: usize) -> String {
    format!("p{e:02}-{t}")
}

pub fn passage_text(e: usize, t: usize) -> String {
    format!("{} {}", entity_name(e), TOPICS[t].0)
}

pub fn query_text(e: usize, t: usize, variant: usize) -> String {
    format!("{} {}", TOPICS[t].1[variant], entity_name(e))
}

/// Topics of entity `e` used for training; the rest are held out.
pub fn is_train_topic(e: usize, t: usize) -> bool {
    (t + N_TOPICS - e % N_TOPICS) % N_TOPICS < 3
}

/// Training triples: each training combination, per query wording, with
/// `NEGATIVES_PER_QUERY` hard negatives sharing either the entity or the topic.
pub fn ir_train_triples(rng: &mut ChaCha8Rng) -> Vec<Triple> {
    let mut out = Vec::new();
    for e in 0..N_ENTITIES {
        for t in (0..N_TOPICS).filter(|&t| is_train_topic(e, t)) {
            for v in 0..3 {
                for _ in 0..NEGATIVES_PER_QUERY {
                    let (ne, nt) = if rng.random_bool(0.5) {
                        (e, (t + rng.random_range(1..N_TOPICS)) % N_TOPICS)
                    } else {
                        ((e + rng.random_range(1..N_ENTITIES)) % N_ENTITIES, t)
                    };
                    out.push(Triple {
                        anchor: query_text(e, t, v),
                        positive: passage_text(e, t),
                        negative: passage_text(ne, nt),
                    });
                }
            }
        }
    }
    out
}

/// Copies `triples` with a fraction of negatives replaced by the positive
/// itself, i.e. false negatives a guide model should filter.
pub fn with_false_negatives(
    triples: &[Triple],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Triple> {
    triples
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if rng.random_bool(fraction) {
                t.negative = t.positive.clone();
            }
            t
        })
        .collect()
}

/// Held-out queries over the full 200-passage collection.
pub fn ir_test_set(rng: &mut ChaCha8Rng) -> QrelSet {
    let passages: Vec<(String, String)> = (0..N_ENTITIES)
        .flat_map(|e| (0..N_TOPICS).map(move |t| (passage_id(e, t), passage_text(e, t))))
        .collect();
    let mut queries = Vec::new();
    let mut relevant = BTreeMap::new();
    for e in 0..N_ENTITIES {
        for t in (0..N_TOPICS).filter(|&t| !is_train_topic(e, t)) {
            let id = format!("q{e:02}-{t}");
            queries.push((id.clone(), query_text(e, t, rng.random_range(0..3))));
            relevant.insert(id, BTreeSet::from([passage_id(e, t)]));
        }
    }
    QrelSet {
        queries,
        passages,
        relevant,
    }
}

/// Everything a toy pipeline run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub raw_sentences: Vec<String>,
    pub nli_pairs: Vec<LabeledPair>,
    pub nli_triples: Vec<Triple>,
    pub sts_train: Vec<ScoredPair>,
    pub sts_validation: Vec<ScoredPair>,
    pub sts_test: Vec<ScoredPair>,
    pub ir_train: Vec<Triple>,
    pub ir_noisy_train: Vec<Triple>,
    pub ir_test: QrelSet,
}

pub fn toy_corpus(seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw_sentences: Vec<String> = (0..300)
        .map(|i| cluster_sentence(i % 5, &mut rng))
        .collect();
    raw_sentences
        .extend((0..N_ENTITIES).flat_map(|e| (0..N_TOPICS).map(move |t| passage_text(e, t))));
    let nli_pairs = nli_pairs(120, &mut rng);
    let nli_triples = nli_to_triples(&nli_pairs);
    let sts_train = sts_pairs(400, &mut rng);
    let sts_validation = sts_pairs(100, &mut rng);
    let sts_test = sts_pairs(200, &mut rng);
    let ir_train = ir_train_triples(&mut rng);
    let ir_noisy_train = with_false_negatives(&ir_train, 0.3, &mut rng);
    let ir_test = ir_test_set(&mut rng);
    ToyCorpus {
        raw_sentences,
        nli_pairs,
        nli_triples,
        sts_train,
        sts_validation,
        sts_test,
        ir_train,
        ir_noisy_train,
        ir_test,
    }
}

/// File names [`write_toy`] uses inside its directory.
pub mod files {
    pub const RAW: &str = "raw_sentences.txt";
    pub const NLI_PAIRS: &str = "nli_pairs.jsonl";
    pub const NLI_TRIPLES: &str = "nli_triples.jsonl";
    pub const STS_TRAIN: &str = "sts_train.tsv";
    pub const STS_VALIDATION: &str = "sts_validation.jsonl";
    pub const STS_TEST: &str = "sts_test.tsv";
    pub const IR_TRAIN: &str = "ir_train.jsonl";
    pub const IR_NOISY_TRAIN: &str = "ir_noisy_train.jsonl";
    pub const IR_QUERIES: &str = "ir_queries.jsonl";
    pub const IR_PASSAGES: &str = "ir_passages.jsonl";
    pub const IR_QRELS: &str = "ir_qrels.tsv";
    pub const CONFIG: &str = "config.toml";
}

/// Pipeline config tuned for the toy corpus: small model, few epochs, larger
/// learning rates than the full-scale defaults.
pub fn toy_config(seed: u64) -> String {
    format!(
        r#"seed = {seed}
output_dir = "out"

[encoder]
embed_dim = 64
num_layers = 1
max_seq_len = 16
ff_dim = 128
pooling = "mean"

[data]
raw_sentences = "{raw}"
nli_triples = "{nli}"
ir_triples = "{ir}"
sts_train = [{{ path = "{sts_train}", min = 0.0, max = 5.0 }}]
sts_validation = [{{ path = "{sts_val}", min = 0.0, max = 5.0 }}]

[stage1]
loss = "ct"
epochs = 1
batch_size = 16
learning_rate = 1e-3

[stage2]
epochs = 3
batch_size = 16
learning_rate = 2e-3

[stage3]
epochs = 4
batch_size = 16
learning_rate = 2e-3

[stage4]
epochs = 1
batch_size = 16
learning_rate = 4e-3
scale = 10.0
"#,
        raw = files::RAW,
        nli = files::NLI_TRIPLES,
        ir = files::IR_TRAIN,
        sts_train = files::STS_TRAIN,
        sts_val = files::STS_VALIDATION,
    )
}

/// Writes the toy corpus and its config into `dir`; returns the config path.
pub fn write_toy(dir: &Path, seed: u64) -> Result<PathBuf, DataError> {
    let c = toy_corpus(seed);
    write_sentences(&dir.join(files::RAW), &c.raw_sentences)?;
    write_nli_pairs(&dir.join(files::NLI_PAIRS), &c.nli_pairs)?;
    write_triples(&dir.join(files::NLI_TRIPLES), &c.nli_triples)?;
    write_scored_pairs(&dir.join(files::STS_TRAIN), &c.sts_train)?;
    write_scored_pairs(&dir.join(files::STS_VALIDATION), &c.sts_validation)?;
    write_scored_pairs(&dir.join(files::STS_TEST), &c.sts_test)?;
    write_triples(&dir.join(files::IR_TRAIN), &c.ir_train)?;
    write_triples(&dir.join(files::IR_NOISY_TRAIN), &c.ir_noisy_train)?;
    write_ir_data(
        &dir.join(files::IR_QUERIES),
        &dir.join(files::IR_PASSAGES),
        &dir.join(files::IR_QRELS),
        &c.ir_test,
    )?;
    let path = dir.join(files::CONFIG);
    std::fs::write(&path, toy_config(seed)).map_err(|e| DataError::io(&path, e))?;
    Ok(path)
}

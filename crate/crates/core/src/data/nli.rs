use std::collections::HashMap;

use super::records::{LabeledPair, NliLabel, Triple};

/// Turns NLI pairs into `(anchor, positive, negative)` triples.
///
/// Pairs are grouped by identical premise. Within a group, entailed
/// hypotheses are positives and contradicted ones are negatives; neutral pairs
/// are dropped. Every premise with at least one of each emits the full
/// positive × negative cross product. Output order: premise by first
/// appearance, then positive order, then negative order.
pub fn nli_to_triples(pairs: &[LabeledPair]) -> Vec<Triple> {
    struct Group<'a> {
        premise: &'a str,
        positives: Vec<&'a str>,
        negatives: Vec<&'a str>,
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for p in pairs {
        let slot = *index.entry(p.premise.as_str()).or_insert_with(|| {
            groups.push(Group {
                premise: &p.premise,
                positives: Vec::new(),
                negatives: Vec::new(),
            });
            groups.len() - 1
        });
        match p.label {
            NliLabel::Entailment => groups[slot].positives.push(&p.hypothesis),
            NliLabel::Contradiction => groups[slot].negatives.push(&p.hypothesis),
            NliLabel::Neutral => {}
        }
    }
    let mut out = Vec::new();
    for g in &groups {
        for pos in &g.positives {
            for neg in &g.negatives {
                out.push(Triple {
                    anchor: g.premise.to_string(),
                    positive: pos.to_string(),
                    negative: neg.to_string(),
                });
            }
        }
    }
    out
}

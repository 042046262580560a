//! Training objectives over batches of sentence embeddings.
//!
//! Every loss records its computation on a [`Tape`] and returns a scalar
//! [`Var`], so gradients reach whatever produced the embeddings. Embedding
//! batches are `[n, d]` matrices with one row per sentence.

mod tsdae;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderModel};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};

pub use tsdae::{tsdae_loss, DecoderParams, TsdaeDecoder};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_SCALE: f64 = 20.0;
pub const CT_PERTURBATION_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("no in-batch negatives available: batch has a single row and no explicit negatives")]
    NoInBatchNegatives,
    #[error("{what}: expected {expected} rows, got {got}")]
    RowMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("binary label {0} is neither 0 nor 1")]
    LabelOutOfRange(f64),
    #[error("filter mask has {got} entries, expected {expected}")]
    MaskShape { expected: usize, got: usize },
    #[error("cannot reconstruct an empty sentence")]
    EmptyTarget,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

type Result<T> = std::result::Result<T, LossError>;

fn rows<T: Real>(tape: &Tape<T>, v: Var) -> Result<usize> {
    match tape.shape(v) {
        [n, _] => Ok(*n),
        s => Err(NumericsError::ShapeMismatch {
            op: "loss",
            detail: format!("expected [n, d] embeddings, got {s:?}"),
        }
        .into()),
    }
}

fn check_scores(scores: &[f64], n: usize) -> Result<()> {
    if scores.len() != n {
        return Err(LossError::RowMismatch {
            what: "scores",
            expected: n,
            got: scores.len(),
        });
    }
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(&s) => Err(LossError::ScoreOutOfRange(s)),
        None => Ok(()),
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidHyperparameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

/// Mean of `((cos(aᵢ, bᵢ) + 1) / 2 − scoreᵢ)²`.
pub fn cosine_sts_loss<T: Real>(
    tape: &mut Tape<T>,
    emb_a: Var,
    emb_b: Var,
    scores: &[f64],
) -> Result<Var> {
    check_scores(scores, rows(tape, emb_a)?)?;
    let cos = tape.cosine_rows(emb_a, emb_b)?;
    let shifted = tape.add_const(cos, T::one())?;
    let mapped = tape.scale(shifted, T::lit(0.5))?;
    let gold = tape.constant(Tensor::vector(scores.iter().map(|&s| T::lit(s)).collect()));
    let diff = tape.sub(mapped, gold)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Ordered index pairs `(i, j)` with `scores[i] > scores[j]`.
pub fn ranked_pairs(scores: &[f64]) -> Vec<(usize, usize)> {
    let n = scores.len();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| scores[i] > scores[j])
        .collect()
}

/// `log(1 + Σ_{sᵢ > sⱼ} exp((simⱼ − simᵢ) / tau))` over a similarity vector.
fn ranking_objective<T: Real>(
    tape: &mut Tape<T>,
    sim: Var,
    scores: &[f64],
    tau: f64,
) -> Result<Var> {
    let diffs = tape.pair_diff(sim, &ranked_pairs(scores))?;
    let scaled = tape.scale(diffs, T::lit(1.0 / tau))?;
    Ok(tape.log1p_sum_exp(scaled)?)
}

pub fn cosent_loss<T: Real>(
    tape: &mut Tape<T>,
    emb_a: Var,
    emb_b: Var,
    scores: &[f64],
    tau: f64,
) -> Result<Var> {
    positive("tau", tau)?;
    check_scores(scores, rows(tape, emb_a)?)?;
    let cos = tape.cosine_rows(emb_a, emb_b)?;
    ranking_objective(tape, cos, scores, tau)
}

/// `w_cos · CoSENT + w_angle · CoSENT-over-angle-similarity`, where the angle
/// similarity reads each embedding as `x + iy` (first half real, second half
/// imaginary) and is `−mean |arg(z_a / z_b)| / π`.
pub fn angle_loss<T: Real>(
    tape: &mut Tape<T>,
    emb_a: Var,
    emb_b: Var,
    scores: &[f64],
    w_cos: f64,
    w_angle: f64,
    tau: f64,
) -> Result<Var> {
    if !(w_cos >= 0.0 && w_angle >= 0.0 && w_cos + w_angle > 0.0) {
        return Err(LossError::InvalidHyperparameter(format!(
            "angle weights must be non-negative and not both zero, got ({w_cos}, {w_angle})"
        )));
    }
    let d = tape.shape(emb_a).last().copied().unwrap_or(0);
    if d % 2 != 0 {
        return Err(NumericsError::OddDimension { dim: d }.into());
    }
    let cos_term = cosent_loss(tape, emb_a, emb_b, scores, tau)?;
    let cos_term = tape.scale(cos_term, T::lit(w_cos))?;
    if w_angle == 0.0 {
        return Ok(cos_term);
    }
    let sim = tape.angle_sim_rows(emb_a, emb_b)?;
    let angle_term = ranking_objective(tape, sim, scores, tau)?;
    let angle_term = tape.scale(angle_term, T::lit(w_angle))?;
    Ok(tape.add(cos_term, angle_term)?)
}

/// `scale · cos(anchorᵢ, candidateⱼ)` as an `[n, m]` matrix.
pub fn similarity_logits<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    candidates: Var,
    scale: f64,
) -> Result<Var> {
    let na = tape.normalize_rows(anchors)?;
    let nc = tape.normalize_rows(candidates)?;
    let cos = tape.matmul_t(na, nc)?;
    Ok(tape.scale(cos, T::lit(scale))?)
}

fn check_triples<T: Real>(
    tape: &Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
) -> Result<usize> {
    let n = rows(tape, anchors)?;
    for (what, v) in [("positives", Some(positives)), ("negatives", negatives)] {
        if let Some(v) = v {
            let got = rows(tape, v)?;
            if got != n {
                return Err(LossError::RowMismatch {
                    what,
                    expected: n,
                    got,
                });
            }
        }
    }
    if n < 2 && negatives.is_none() {
        return Err(LossError::NoInBatchNegatives);
    }
    Ok(n)
}

/// Candidate columns for MNR: the positives, then the explicit negatives.
pub fn mnr_logits<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
    scale: f64,
) -> Result<Var> {
    positive("scale", scale)?;
    check_triples(tape, anchors, positives, negatives)?;
    let candidates = match negatives {
        Some(neg) => tape.concat_rows(&[positives, neg])?,
        None => positives,
    };
    similarity_logits(tape, anchors, candidates, scale)
}

/// Multiple-negatives ranking loss: softmax cross-entropy of each anchor
/// against every candidate, with its own positive as the target.
pub fn mnr_loss<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
    scale: f64,
) -> Result<Var> {
    let logits = mnr_logits(tape, anchors, positives, negatives, scale)?;
    let n = rows(tape, anchors)?;
    Ok(tape.cross_entropy_rows(logits, &(0..n).collect::<Vec<_>>(), None)?)
}

/// Candidate columns for GIST: positives, and when explicit negatives exist,
/// the negatives followed by the anchors themselves.
pub fn gist_logits<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
    scale: f64,
) -> Result<Var> {
    positive("scale", scale)?;
    check_triples(tape, anchors, positives, negatives)?;
    let candidates = match negatives {
        Some(neg) => tape.concat_rows(&[positives, neg, anchors])?,
        None => positives,
    };
    similarity_logits(tape, anchors, candidates, scale)
}

/// Number of GIST candidate columns for a batch of `n` rows.
pub fn gist_columns(n: usize, has_negatives: bool) -> usize {
    if has_negatives {
        3 * n
    } else {
        n
    }
}

/// Filter rule over an `[n, m]` guide-cosine matrix whose column `i` holds
/// anchor `i`'s positive: cell `(i, j)` is filtered iff
/// `cos[i][j] ≥ cos[i][i] − margin`. The diagonal is never filtered.
pub fn filter_from_cosines(guide_cos: &[f64], n: usize, m: usize, margin: f64) -> Vec<bool> {
    assert_eq!(guide_cos.len(), n * m, "guide cosine matrix shape");
    let mut mask = vec![false; n * m];
    for i in 0..n {
        let pos = guide_cos[i * m + i];
        for j in (0..m).filter(|&j| j != i) {
            mask[i * m + j] = guide_cos[i * m + j] >= pos - margin;
        }
    }
    mask
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
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

/// GIST exclusion mask from guide embeddings, laid out like [`gist_logits`].
/// Besides the guide filter, an anchor is always excluded as its own
/// in-batch negative.
pub fn gist_mask(
    anchors: &Tensor<f32>,
    positives: &Tensor<f32>,
    negatives: Option<&Tensor<f32>>,
    margin: f64,
) -> Vec<bool> {
    let n = anchors.shape()[0];
    let mut candidates: Vec<&[f32]> = (0..n).map(|j| positives.row(j)).collect();
    if let Some(neg) = negatives {
        candidates.extend((0..n).map(|j| neg.row(j)));
        candidates.extend((0..n).map(|j| anchors.row(j)));
    }
    let m = candidates.len();
    let cos: Vec<f64> = (0..n)
        .flat_map(|i| candidates.iter().map(move |c| cos64(anchors.row(i), c)))
        .collect();
    let mut mask = filter_from_cosines(&cos, n, m, margin);
    if negatives.is_some() {
        for i in 0..n {
            mask[i * m + 2 * n + i] = true;
        }
    }
    mask
}

/// Embeds the batch texts with a frozen guide and builds the GIST mask.
pub fn gist_filter_mask<S: AsRef<str>>(
    guide: &EncoderModel,
    anchors: &[S],
    positives: &[S],
    negatives: Option<&[S]>,
    margin: f64,
) -> Result<Vec<bool>> {
    let a = guide.embed_sentences(anchors)?;
    let p = guide.embed_sentences(positives)?;
    let n = negatives.map(|t| guide.embed_sentences(t)).transpose()?;
    Ok(gist_mask(&a, &p, n.as_ref(), margin))
}

/// MNR with guide-filtered candidates left out of the softmax. A row whose
/// off-diagonal entries are all filtered contributes zero.
pub fn gist_loss<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<Var>,
    mask: &[bool],
    scale: f64,
) -> Result<Var> {
    let logits = gist_logits(tape, anchors, positives, negatives, scale)?;
    let n = rows(tape, anchors)?;
    let expected = n * gist_columns(n, negatives.is_some());
    if mask.len() != expected {
        return Err(LossError::MaskShape {
            expected,
            got: mask.len(),
        });
    }
    Ok(tape.cross_entropy_rows(logits, &(0..n).collect::<Vec<_>>(), Some(mask))?)
}

/// Contrastive-tension BCE over explicit pairs: row `p` of `emb_a` (first
/// model) against row `p` of `emb_b` (second model), logit = dot product.
pub fn ct_pair_loss<T: Real>(
    tape: &mut Tape<T>,
    emb_a: Var,
    emb_b: Var,
    labels: &[f64],
) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(LossError::LabelOutOfRange(bad));
    }
    let n = rows(tape, emb_a)?;
    if labels.len() != n {
        return Err(LossError::RowMismatch {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let dots = tape.row_dot(emb_a, emb_b)?;
    let labels: Vec<T> = labels.iter().map(|&y| T::lit(y)).collect();
    Ok(tape.bce_with_logits(dots, &labels)?)
}

/// Contrastive tension over a batch of `k` sentences: all `k²` pairs, the
/// `k` self-pairs labelled 1 and the `k(k−1)` cross pairs labelled 0.
pub fn ct_loss<T: Real>(tape: &mut Tape<T>, emb_a: Var, emb_b: Var) -> Result<Var> {
    let k = rows(tape, emb_a)?;
    let kb = rows(tape, emb_b)?;
    if kb != k {
        return Err(LossError::RowMismatch {
            what: "second-model embeddings",
            expected: k,
            got: kb,
        });
    }
    let logits = tape.matmul_t(emb_a, emb_b)?;
    let labels: Vec<T> = (0..k * k)
        .map(|p| if p / k == p % k { T::one() } else { T::zero() })
        .collect();
    Ok(tape.bce_with_logits(logits, &labels)?)
}

/// The second contrastive-tension instance: a copy of `model` with every
/// parameter perturbed by `N(0, std²)` noise.
pub fn ct_partner(model: &EncoderModel, std: f64, seed: u64) -> EncoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut out = model.clone();
    for t in out.params.values_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    out
}

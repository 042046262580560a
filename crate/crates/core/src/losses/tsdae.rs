use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LossError, Result};
use crate::encoder::{BoundParams, EncoderModel, TokenId};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Reconstruction decoder for denoising auto-encoding.
///
/// Step `t` sees only the gold token `t − 1` plus the sentence embedding, runs
/// them through a two-layer feed-forward net, and scores the vocabulary
/// against the encoder's own token-embedding table. The table is passed in as
/// a tape variable at loss time, so the output projection is tied by
/// construction and the decoder owns no copy of it.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdaeDecoder {
    pub params: BTreeMap<String, Tensor<f32>>,
}

/// Decoder parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderParams {
    pub fn vars(&self) -> [(&'static str, Var); 4] {
        [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
    }
}

impl TsdaeDecoder {
    /// The second layer starts at zero, so an untrained decoder predicts the
    /// uniform distribution over the vocabulary.
    pub fn new(embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (embed_dim as f32).sqrt()).expect("positive std");
        let w1 = (0..embed_dim * hidden)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let mut params = BTreeMap::new();
        params.insert(
            "w1".into(),
            Tensor::matrix(embed_dim, hidden, w1).expect("shape"),
        );
        params.insert("b1".into(), Tensor::zeros(&[hidden]));
        params.insert("w2".into(), Tensor::zeros(&[hidden, embed_dim]));
        params.insert("b2".into(), Tensor::zeros(&[embed_dim]));
        Self { params }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> DecoderParams {
        let mut get = |name: &str| {
            let t = self.params[name].cast::<T>();
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        DecoderParams {
            w1: get("w1"),
            b1: get("b1"),
            w2: get("w2"),
            b2: get("b2"),
        }
    }

    /// Mean token cross-entropy of predicting `original[1..]` from the gold
    /// prefix and `sentence` (a `[d]` embedding).
    pub fn loss<T: Real>(
        tape: &mut Tape<T>,
        params: &DecoderParams,
        token_table: Var,
        sentence: Var,
        original: &[TokenId],
    ) -> Result<Var> {
        if original.len() < 2 {
            return Err(LossError::EmptyTarget);
        }
        let prev: Vec<usize> = original[..original.len() - 1]
            .iter()
            .map(|&t| t as usize)
            .collect();
        let targets: Vec<usize> = original[1..].iter().map(|&t| t as usize).collect();
        let x = tape.gather(token_table, &prev)?;
        let x = tape.add_row(x, sentence)?;
        let h = tape.matmul(x, params.w1)?;
        let h = tape.add_row(h, params.b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, params.w2)?;
        let h = tape.add_row(h, params.b2)?;
        let logits = tape.matmul_t(h, token_table)?;
        Ok(tape.cross_entropy_rows(logits, &targets, None)?)
    }
}

/// Encodes the noisy ids into one sentence embedding and asks the decoder to
/// reconstruct the original ids from it.
pub fn tsdae_loss<T: Real>(
    tape: &mut Tape<T>,
    encoder: &EncoderModel,
    encoder_params: &BoundParams,
    decoder: &DecoderParams,
    noisy_ids: &[TokenId],
    original_ids: &[TokenId],
) -> Result<Var> {
    if original_ids.len() < 2 {
        return Err(LossError::EmptyTarget);
    }
    let sentence = encoder.ids_embedding(tape, encoder_params, noisy_ids)?;
    TsdaeDecoder::loss(
        tape,
        decoder,
        encoder_params.get("token_embedding"),
        sentence,
        original_ids,
    )
}

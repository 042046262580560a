use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, TokenId, Vocab};
use super::EncoderError;
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    /// Hidden width of each feed-forward block.
    pub ff_dim: usize,
    pub pooling: Pooling,
    pub normalize_output: bool,
    /// When false, positional embeddings are not added.
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            embed_dim: 64,
            num_layers: 2,
            max_seq_len: 64,
            ff_dim: 128,
            pooling: Pooling::Mean,
            normalize_output: true,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.embed_dim < 2 {
            return fail(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            ));
        }
        if self.num_layers < 1 {
            return fail("num_layers must be at least 1".into());
        }
        if !(4..=512).contains(&self.max_seq_len) {
            return fail(format!(
                "max_seq_len must be in 4..=512, got {}",
                self.max_seq_len
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size must cover the 4 reserved ids, got {}",
                self.vocab_size
            ));
        }
        if self.ff_dim < 1 {
            return fail("ff_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Expected parameter names and shapes, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.embed_dim, self.ff_dim);
        let mut out = vec![
            ("token_embedding".to_string(), vec![self.vocab_size, d]),
            ("position_embedding".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn.query"), vec![d, d]),
                (p("attn.key"), vec![d, d]),
                (p("attn.value"), vec![d, d]),
                (p("attn.output"), vec![d, d]),
                (p("attn_norm.gain"), vec![d]),
                (p("attn_norm.bias"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
                (p("ff_norm.gain"), vec![d]),
                (p("ff_norm.bias"), vec![d]),
            ]);
        }
        out
    }
}

/// Named parameter tensors, iterated in name order.
pub type ParamStore = BTreeMap<String, Tensor<f32>>;

/// The siamese sentence encoder: one parameter set applied to every input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

/// Parameters of one model registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds an explicit name → node mapping, e.g. parameters that were
    /// registered on the tape by the caller.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

const LN_EPS: f64 = 1e-5;
const TOKEN_INIT_STD: f32 = 1.0;
const POSITION_INIT_STD: f32 = 0.1;

impl EncoderModel {
    /// Fresh model with seeded Gaussian initialization. `config.vocab_size`
    /// is overwritten with the vocabulary's size.
    pub fn new(mut config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; n]
            } else {
                let std = match name.as_str() {
                    "token_embedding" => TOKEN_INIT_STD,
                    "position_embedding" => POSITION_INIT_STD,
                    _ => 1.0 / (shape[0] as f32).sqrt(),
                };
                let normal = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data).expect("shape from config"));
        }
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    /// Checks that every expected parameter is present with the right shape
    /// and nothing else is.
    pub fn validate(&self) -> Result<(), EncoderError> {
        self.config.validate()?;
        if self.vocab.len() != self.config.vocab_size {
            return Err(EncoderError::InvalidConfig(format!(
                "vocabulary has {} entries but vocab_size is {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let expected = self.config.parameter_shapes();
        if expected.len() != self.params.len() {
            return Err(EncoderError::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(EncoderError::InvalidConfig(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(EncoderError::InvalidConfig(format!(
                        "missing parameter {name}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, &self.vocab, self.config.max_seq_len)
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                (
                    name.clone(),
                    if trainable {
                        tape.param(t)
                    } else {
                        tape.constant(t)
                    },
                )
            })
            .collect();
        BoundParams { vars }
    }

    /// Per-token contextual vectors `[len, d]`. Positions with `mask = false`
    /// are never attended to, so they cannot influence unmasked rows.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        ids: &[TokenId],
        mask: &[bool],
    ) -> Result<Var, EncoderError> {
        if ids.len() != mask.len() {
            return Err(EncoderError::MaskLength {
                ids: ids.len(),
                mask: mask.len(),
            });
        }
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(EncoderError::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        if ids.len() > self.config.max_seq_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(EncoderError::AllMasked);
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let mut x = tape.gather(params.get("token_embedding"), &idx)?;
        if self.config.positional {
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.gather(params.get("position_embedding"), &positions)?;
            x = tape.add(x, pos)?;
        }
        let inv_sqrt_d = T::lit(1.0 / (self.config.embed_dim as f64).sqrt());
        for l in 0..self.config.num_layers {
            let p = |s: &str| params.get(&format!("layers.{l}.{s}"));
            let q = tape.matmul(x, p("attn.query"))?;
            let k = tape.matmul(x, p("attn.key"))?;
            let v = tape.matmul(x, p("attn.value"))?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, inv_sqrt_d)?;
            let weights = tape.masked_softmax_rows(scores, mask)?;
            let mixed = tape.matmul(weights, v)?;
            let attn = tape.matmul(mixed, p("attn.output"))?;
            let res = tape.add(x, attn)?;
            x = self.norm(tape, res, p("attn_norm.gain"), p("attn_norm.bias"))?;

            let h = tape.matmul(x, p("ff.w1"))?;
            let h = tape.add_row(h, p("ff.b1"))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, p("ff.w2"))?;
            let h = tape.add_row(h, p("ff.b2"))?;
            let res = tape.add(x, h)?;
            x = self.norm(tape, res, p("ff_norm.gain"), p("ff_norm.bias"))?;
        }
        Ok(x)
    }

    fn norm<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gain: Var,
        bias: Var,
    ) -> Result<Var, EncoderError> {
        let n = tape.layer_norm_rows(x, T::lit(LN_EPS))?;
        let n = tape.mul_row(n, gain)?;
        Ok(tape.add_row(n, bias)?)
    }

    /// Pools with the configured strategy and normalization.
    pub fn pool<T: Real>(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        mask: &[bool],
    ) -> Result<Var, EncoderError> {
        pool(
            tape,
            tokens,
            mask,
            self.config.pooling,
            self.config.normalize_output,
        )
    }

    /// Tokenize → encode → pool for one text, recorded on `tape`.
    pub fn sentence_embedding<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        text: &str,
    ) -> Result<Var, EncoderError> {
        let ids = self.tokenize(text);
        self.ids_embedding(tape, params, &ids)
    }

    /// Encode → pool for an unpadded id sequence.
    pub fn ids_embedding<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        ids: &[TokenId],
    ) -> Result<Var, EncoderError> {
        let mask = vec![true; ids.len()];
        let tokens = self.encode(tape, params, ids, &mask)?;
        self.pool(tape, tokens, &mask)
    }

    /// Inference-mode embeddings `[n, d]`, one row per text in input order.
    /// Every text is encoded on its own, so a row never depends on the other
    /// texts in the call.
    pub fn embed_sentences<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor<f32>, EncoderError> {
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        let mut tape = Tape::<f32>::new();
        let params = self.bind(&mut tape, false);
        let base = tape.len();
        for text in texts {
            let v = self.sentence_embedding(&mut tape, &params, text.as_ref())?;
            data.extend_from_slice(tape.value(v).data());
            tape.truncate(base);
        }
        Ok(Tensor::matrix(texts.len(), d, data)?)
    }
}

/// Reduces `[len, d]` token vectors to one `[d]` sentence vector.
pub fn pool<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    mask: &[bool],
    strategy: Pooling,
    normalize: bool,
) -> Result<Var, EncoderError> {
    if !mask.iter().any(|&m| m) {
        return Err(EncoderError::AllMasked);
    }
    let pooled = match strategy {
        Pooling::Mean => tape.masked_mean_rows(tokens, mask)?,
        Pooling::Max => tape.masked_max_rows(tokens, mask)?,
        Pooling::Cls => tape.select_row(tokens, 0)?,
    };
    Ok(if normalize {
        tape.normalize_rows(pooled)?
    } else {
        pooled
    })
}

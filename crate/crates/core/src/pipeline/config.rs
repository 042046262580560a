use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::ScoreRange;
use crate::encoder::{EncoderConfig, Pooling};
use crate::losses::{CT_PERTURBATION_STD, DEFAULT_SCALE, DEFAULT_TAU};

/// Architecture keys of the `[encoder]` section; the vocabulary size comes
/// from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub ff_dim: usize,
    pub pooling: Pooling,
    pub normalize_output: bool,
    pub positional: bool,
    /// Words seen fewer times than this in the training data map to `[UNK]`.
    pub min_freq: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            embed_dim: e.embed_dim,
            num_layers: e.num_layers,
            max_seq_len: e.max_seq_len,
            ff_dim: e.ff_dim,
            pooling: e.pooling,
            normalize_output: e.normalize_output,
            positional: e.positional,
            min_freq: 1,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            max_seq_len: self.max_seq_len,
            ff_dim: self.ff_dim,
            pooling: self.pooling,
            normalize_output: self.normalize_output,
            positional: self.positional,
        }
    }
}

/// A scored-pair file with its declared label range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredSource {
    pub path: PathBuf,
    pub min: f64,
    pub max: f64,
}

impl ScoredSource {
    pub fn range(&self) -> ScoreRange {
        ScoreRange::new(self.min, self.max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// One sentence per line (stage 1).
    pub raw_sentences: Option<PathBuf>,
    /// `(anchor, positive, negative)` JSONL from NLI pairs (stage 2).
    pub nli_triples: Option<PathBuf>,
    /// Scored training pairs (stage 3).
    pub sts_train: Vec<ScoredSource>,
    /// Scored validation pairs, combined into one set (stages 2 and 3).
    pub sts_validation: Vec<ScoredSource>,
    /// `(query, relevant, irrelevant)` JSONL (stage 4).
    pub ir_triples: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Contrastive tension with in-batch negatives.
    Ct,
    /// Denoising auto-encoder.
    Tsdae,
    Gist,
    Cosent,
    Angle,
    /// CoSENT and AnglE trained separately; the better one is kept.
    CosentAngle,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ct => "ct",
            LossKind::Tsdae => "tsdae",
            LossKind::Gist => "gist",
            LossKind::Cosent => "cosent",
            LossKind::Angle => "angle",
            LossKind::CosentAngle => "cosent_angle",
        }
    }
}

/// One `[stageN]` section. Every key is optional; defaults depend on the
/// stage number.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub enabled: Option<bool>,
    pub loss: Option<LossKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    /// Steps between mid-epoch checkpoints; 0 means epoch ends only.
    pub checkpoint_every: Option<usize>,
    pub tau: Option<f64>,
    pub scale: Option<f64>,
    pub margin: Option<f64>,
    pub w_cos: Option<f64>,
    pub w_angle: Option<f64>,
    pub ct_noise_std: Option<f64>,
    pub noise_ratio: Option<f64>,
    pub decoder_hidden: Option<usize>,
    /// Guide checkpoint for GIST stages; the frozen stage-start model otherwise.
    pub guide: Option<PathBuf>,
}

/// The on-disk config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub stage3: StageSection,
    #[serde(default)]
    pub stage4: StageSection,
}

/// Fully resolved settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u8,
    pub enabled: bool,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub tau: f64,
    pub scale: f64,
    pub margin: f64,
    pub w_cos: f64,
    pub w_angle: f64,
    pub ct_noise_std: f64,
    pub noise_ratio: f64,
    pub decoder_hidden: usize,
    pub guide: Option<PathBuf>,
}

impl StageConfig {
    /// Defaults for `stage_id`: CT for 1 epoch, GIST for 10, CoSENT and AnglE
    /// for 20, GIST for 1.
    pub fn defaults(stage_id: u8) -> Self {
        let (loss, epochs) = match stage_id {
            1 => (LossKind::Ct, 1),
            2 => (LossKind::Gist, 10),
            3 => (LossKind::CosentAngle, 20),
            _ => (LossKind::Gist, 1),
        };
        Self {
            stage_id,
            enabled: true,
            loss,
            epochs,
            batch_size: 16,
            learning_rate: 2e-4,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            tau: DEFAULT_TAU,
            scale: DEFAULT_SCALE,
            margin: 0.0,
            w_cos: 1.0,
            w_angle: 1.0,
            ct_noise_std: CT_PERTURBATION_STD,
            noise_ratio: 0.6,
            decoder_hidden: 128,
            guide: None,
        }
    }

    fn resolve(stage_id: u8, s: &StageSection, base: &Path) -> Self {
        let d = Self::defaults(stage_id);
        Self {
            stage_id,
            enabled: s.enabled.unwrap_or(true),
            loss: s.loss.unwrap_or(d.loss),
            epochs: s.epochs.unwrap_or(d.epochs),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            warmup_ratio: s.warmup_ratio.unwrap_or(d.warmup_ratio),
            weight_decay: s.weight_decay.unwrap_or(d.weight_decay),
            beta1: s.beta1.unwrap_or(d.beta1),
            beta2: s.beta2.unwrap_or(d.beta2),
            adam_eps: s.adam_eps.unwrap_or(d.adam_eps),
            checkpoint_every: s.checkpoint_every.unwrap_or(d.checkpoint_every),
            tau: s.tau.unwrap_or(d.tau),
            scale: s.scale.unwrap_or(d.scale),
            margin: s.margin.unwrap_or(d.margin),
            w_cos: s.w_cos.unwrap_or(d.w_cos),
            w_angle: s.w_angle.unwrap_or(d.w_angle),
            ct_noise_std: s.ct_noise_std.unwrap_or(d.ct_noise_std),
            noise_ratio: s.noise_ratio.unwrap_or(d.noise_ratio),
            decoder_hidden: s.decoder_hidden.unwrap_or(d.decoder_hidden),
            guide: s.guide.as_ref().map(|p| base.join(p)),
        }
    }

    /// Losses each stage accepts.
    pub fn allowed_losses(stage_id: u8) -> &'static [LossKind] {
        match stage_id {
            1 => &[LossKind::Ct, LossKind::Tsdae],
            2 | 4 => &[LossKind::Gist],
            _ => &[LossKind::CosentAngle, LossKind::Cosent, LossKind::Angle],
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| {
            Err(PipelineError::Config(format!(
                "stage {}: {msg}",
                self.stage_id
            )))
        };
        if !Self::allowed_losses(self.stage_id).contains(&self.loss) {
            return bad(format!(
                "loss {:?} is not valid for this stage",
                self.loss.name()
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("scale", self.scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) || (name != "learning_rate" && v == 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad("warmup_ratio and noise_ratio must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return bad("beta1/beta2 must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.ct_noise_std < 0.0 || !self.margin.is_finite() {
            return bad("weight_decay and ct_noise_std must be non-negative, margin finite".into());
        }
        if self.w_cos < 0.0 || self.w_angle < 0.0 || self.w_cos + self.w_angle == 0.0 {
            return bad("w_cos and w_angle must be non-negative and not both zero".into());
        }
        if self.decoder_hidden == 0 {
            return bad("decoder_hidden must be at least 1".into());
        }
        Ok(())
    }
}

/// Resolved pipeline settings; relative paths are anchored at the config
/// file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub encoder: EncoderSection,
    pub data: DataSection,
    /// All four stages in order, enabled or not.
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_file(file, base)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    pub fn from_file(file: ConfigFile, base: &Path) -> Result<Self, PipelineError> {
        let sections = [&file.stage1, &file.stage2, &file.stage3, &file.stage4];
        let mut stages = Vec::new();
        for (i, s) in sections.into_iter().enumerate() {
            let stage = StageConfig::resolve(i as u8 + 1, s, base);
            stage.validate()?;
            stages.push(stage);
        }
        let mut data = file.data;
        let join = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                *x = base.join(&*x);
            }
        };
        join(&mut data.raw_sentences);
        join(&mut data.nli_triples);
        join(&mut data.ir_triples);
        for s in data
            .sts_train
            .iter_mut()
            .chain(data.sts_validation.iter_mut())
        {
            s.path = base.join(&s.path);
            if s.min.partial_cmp(&s.max) != Some(std::cmp::Ordering::Less) {
                return Err(PipelineError::Config(format!(
                    "{}: score range min must be below max",
                    s.path.display()
                )));
            }
        }
        let cfg = Self {
            seed: file.seed,
            output_dir: base.join(file.output_dir),
            encoder: file.encoder,
            data,
            stages,
        };
        cfg.encoder
            .to_config(4)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Enables exactly the listed stage ids (which must be 1–4), overriding
    /// the `enabled` keys of the file.
    pub fn restrict(&mut self, ids: &[u8]) -> Result<(), PipelineError> {
        if let Some(bad) = ids.iter().find(|&&i| !(1..=4).contains(&i)) {
            return Err(PipelineError::Config(format!(
                "unknown stage {bad}; stages are 1-4"
            )));
        }
        for s in &mut self.stages {
            s.enabled = ids.contains(&s.stage_id);
        }
        Ok(())
    }

    pub fn stage(&self, id: u8) -> &StageConfig {
        &self.stages[usize::from(id) - 1]
    }

    pub fn stage_mut(&mut self, id: u8) -> &mut StageConfig {
        &mut self.stages[usize::from(id) - 1]
    }

    pub fn enabled_stages(&self) -> impl Iterator<Item = &StageConfig> {
        self.stages.iter().filter(|s| s.enabled)
    }
}

//! The four-stage training schedule: contrastive tension on raw sentences,
//! GIST on NLI triples, CoSENT/AnglE on scored pairs (the STS model), then
//! GIST on retrieval triples (the IR model).

mod config;
mod optim;
mod report;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{load_scored_pairs, load_sentences, load_triples, DataError, ScoredPair};
use crate::encoder::{load, save, EncoderError, EncoderModel, ModelMeta, Vocab};
use crate::eval::EvalError;
use crate::losses::LossError;
use crate::numerics::NumericsError;

pub use config::{
    ConfigFile, DataSection, EncoderSection, LossKind, PipelineConfig, ScoredSource, StageConfig,
    StageSection,
};
pub use optim::{scheduled_lr, AdamW, AdamWParams};
pub use report::{select_checkpoint, CheckpointRecord, RunReport, StageReport, TrainReport};
pub use train::{
    derive_seed, run_stage, train_run, validate, CheckpointSink, RunLoss, RunSpec, StageData,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "stage {stage} requires an initial model (pass one explicitly or run stage {prev} first)"
    )]
    MissingInit { stage: u8, prev: u8 },
    #[error("stage {stage} requires data.{key}")]
    MissingData { stage: u8, key: &'static str },
    #[error("non-finite {loss_fn} loss in stage {stage}, epoch {epoch}, step {step} (batch {batch} of the epoch)")]
    NonFiniteLoss {
        stage: u8,
        loss_fn: &'static str,
        epoch: usize,
        step: usize,
        batch: usize,
    },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("empty checkpoint history")]
    EmptyHistory,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Artifacts of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Output of stage 3, when it ran.
    pub sts_model: Option<EncoderModel>,
    /// Output of stage 4, when it ran.
    pub ir_model: Option<EncoderModel>,
    /// Output of every stage that ran, by stage id.
    pub stage_models: Vec<(u8, EncoderModel)>,
    pub report: TrainReport,
}

pub const STS_MODEL_FILE: &str = "sts_model.srfm";
pub const IR_MODEL_FILE: &str = "ir_model.srfm";
pub const REPORT_FILE: &str = "report.jsonl";

/// Path of a stage's selected model inside `output_dir`.
pub fn stage_best_path(output_dir: &Path, stage: u8) -> PathBuf {
    output_dir.join(format!("stage{stage}")).join("best.srfm")
}

fn require<'a>(
    path: &'a Option<PathBuf>,
    stage: u8,
    key: &'static str,
) -> Result<&'a Path, PipelineError> {
    path.as_deref()
        .ok_or(PipelineError::MissingData { stage, key })
}

fn load_scored(sources: &[ScoredSource]) -> Result<Vec<ScoredPair>, PipelineError> {
    let mut out = Vec::new();
    for s in sources {
        out.extend(load_scored_pairs(&s.path, s.range())?);
    }
    Ok(out)
}

/// Loads the training data of `stage`.
pub fn load_stage_data(
    config: &PipelineConfig,
    stage: &StageConfig,
) -> Result<StageData, PipelineError> {
    let d = &config.data;
    let id = stage.stage_id;
    Ok(match id {
        1 => StageData::Sentences(load_sentences(require(
            &d.raw_sentences,
            id,
            "raw_sentences",
        )?)?),
        2 => StageData::Triples(load_triples(require(&d.nli_triples, id, "nli_triples")?)?),
        3 => {
            if d.sts_train.is_empty() {
                return Err(PipelineError::MissingData {
                    stage: id,
                    key: "sts_train",
                });
            }
            StageData::Scored(load_scored(&d.sts_train)?)
        }
        _ => StageData::Triples(load_triples(require(&d.ir_triples, id, "ir_triples")?)?),
    })
}

/// Every text of every configured training file; the vocabulary source.
pub fn training_texts(config: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let d = &config.data;
    let mut texts = Vec::new();
    if let Some(p) = &d.raw_sentences {
        texts.extend(load_sentences(p)?);
    }
    for p in [&d.nli_triples, &d.ir_triples].into_iter().flatten() {
        for t in load_triples(p)? {
            texts.extend([t.anchor, t.positive, t.negative]);
        }
    }
    for p in load_scored(&d.sts_train)? {
        texts.extend([p.sentence_a, p.sentence_b]);
    }
    Ok(texts)
}

/// A freshly initialized encoder with a vocabulary built from the training
/// data.
pub fn initial_model(config: &PipelineConfig) -> Result<EncoderModel, PipelineError> {
    let vocab = Vocab::build(training_texts(config)?, config.encoder.min_freq);
    let cfg = config.encoder.to_config(vocab.len());
    Ok(EncoderModel::new(
        cfg,
        vocab,
        derive_seed(config.seed, 0xE1),
    )?)
}

/// Runs every enabled stage in order, each starting from the previous
/// stage's selected model, and writes per-stage checkpoints, the STS and IR
/// models and the report under `config.output_dir`.
///
/// Without `init`, a run that starts at stage 1 begins from a fresh model;
/// one that starts later resumes from the previous stage's saved output.
pub fn run_pipeline(
    config: &PipelineConfig,
    init: Option<EncoderModel>,
) -> Result<PipelineOutput, PipelineError> {
    let stages: Vec<&StageConfig> = config.enabled_stages().collect();
    let Some(first) = stages.first() else {
        return Err(PipelineError::Config("no stages enabled".into()));
    };
    // validate every input before any training step
    let mut inputs = Vec::new();
    for s in &stages {
        let data = load_stage_data(config, s)?;
        let validation = match s.stage_id {
            2 | 3 => {
                if config.data.sts_validation.is_empty() {
                    return Err(PipelineError::MissingData {
                        stage: s.stage_id,
                        key: "sts_validation",
                    });
                }
                Some(load_scored(&config.data.sts_validation)?)
            }
            _ => None,
        };
        let guide = s.guide.as_deref().map(load).transpose()?.map(|(m, _)| m);
        inputs.push((data, validation, guide));
    }
    let mut model = match init {
        Some(m) => m,
        None if first.stage_id == 1 => initial_model(config)?,
        None => {
            let prev = first.stage_id - 1;
            let path = stage_best_path(&config.output_dir, prev);
            if !path.exists() {
                return Err(PipelineError::MissingInit {
                    stage: first.stage_id,
                    prev,
                });
            }
            load(&path)?.0
        }
    };
    model.validate()?;

    let mut report = TrainReport {
        seed: config.seed,
        ..Default::default()
    };
    let mut stage_models = Vec::new();
    for (s, (data, validation, guide)) in stages.iter().zip(&inputs) {
        let (next, stage_report) = run_stage(
            &model,
            s,
            data,
            validation.as_deref(),
            guide.as_ref(),
            config.seed,
            Some(&config.output_dir),
        )?;
        model = next;
        stage_models.push((s.stage_id, model.clone()));
        report.stages.push(stage_report);
    }
    let pick = |id: u8| {
        stage_models
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, m)| m.clone())
    };
    let (sts_model, ir_model) = (pick(3), pick(4));
    for (m, file, stage) in [
        (&sts_model, STS_MODEL_FILE, 3u8),
        (&ir_model, IR_MODEL_FILE, 4u8),
    ] {
        if let Some(m) = m {
            let run = report
                .stages
                .iter()
                .find(|r| r.stage == stage)
                .expect("stage ran");
            let meta = ModelMeta {
                id: Some(file.trim_end_matches(".srfm").to_string()),
                stage: Some(stage),
                variant: Some(run.winner.clone()),
                ..Default::default()
            };
            save(&config.output_dir.join(file), m, &meta)?;
            let name = Some(file.to_string());
            if stage == 3 {
                report.sts_model = name;
            } else {
                report.ir_model = name;
            }
        }
    }
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| PipelineError::io(&config.output_dir, e))?;
    report.write(&config.output_dir.join(REPORT_FILE))?;
    Ok(PipelineOutput {
        sts_model,
        ir_model,
        stage_models,
        report,
    })
}

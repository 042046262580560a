use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::config::{LossKind, StageConfig};
use super::optim::{scheduled_lr, AdamW, AdamWParams};
use super::report::{select_checkpoint, CheckpointRecord, RunReport, StageReport};
use super::PipelineError;
use crate::data::{delete_noise, make_batches, ScoredPair, Triple};
use crate::encoder::{save, BoundParams, EncoderModel, ModelMeta};
use crate::eval::{pair_cosines, spearman};
use crate::losses::{
    angle_loss, cosent_loss, ct_loss, ct_partner, gist_loss, gist_mask, mnr_loss, tsdae_loss,
    TsdaeDecoder,
};
use crate::numerics::{Tape, Tensor, Var};

/// Mixes `tag` into `seed` (splitmix64 finalizer), so every stage, epoch and
/// step draws from its own stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        ^ tag
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training examples of one stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageData {
    Sentences(Vec<String>),
    Triples(Vec<Triple>),
    Scored(Vec<ScoredPair>),
}

impl StageData {
    fn len(&self) -> usize {
        match self {
            StageData::Sentences(v) => v.len(),
            StageData::Triples(v) => v.len(),
            StageData::Scored(v) => v.len(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            StageData::Sentences(_) => "sentences",
            StageData::Triples(_) => "triples",
            StageData::Scored(_) => "scored pairs",
        }
    }
}

/// Objective of a single training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunLoss {
    Ct,
    Tsdae,
    Gist,
    /// Plain in-batch-negatives ranking; the unguided GIST baseline.
    Mnr,
    Cosent,
    Angle,
}

impl RunLoss {
    pub fn name(self) -> &'static str {
        match self {
            RunLoss::Ct => "ct",
            RunLoss::Tsdae => "tsdae",
            RunLoss::Gist => "gist",
            RunLoss::Mnr => "mnr",
            RunLoss::Cosent => "cosent",
            RunLoss::Angle => "angle",
        }
    }

    fn data_kind(self) -> &'static str {
        match self {
            RunLoss::Ct | RunLoss::Tsdae => "sentences",
            RunLoss::Gist | RunLoss::Mnr => "triples",
            RunLoss::Cosent | RunLoss::Angle => "scored pairs",
        }
    }
}

/// Where a run writes its checkpoints, and under which id prefix.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub prefix: String,
}

/// Embeddings of a frozen guide model, computed once per distinct text.
struct GuideCache<'a> {
    guide: &'a EncoderModel,
    cache: HashMap<String, Vec<f32>>,
}

impl GuideCache<'_> {
    fn embed(&mut self, texts: &[&str]) -> Result<Tensor<f32>, PipelineError> {
        let missing: Vec<&str> = texts
            .iter()
            .copied()
            .filter(|t| !self.cache.contains_key(*t))
            .collect();
        if !missing.is_empty() {
            let e = self.guide.embed_sentences(&missing)?;
            for (i, t) in missing.iter().enumerate() {
                self.cache.insert(t.to_string(), e.row(i).to_vec());
            }
        }
        let rows: Vec<Vec<f32>> = texts.iter().map(|t| self.cache[*t].clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    }
}

/// Sentence embeddings `[n, d]` of `texts`, each encoded on its own.
fn embed_batch(
    tape: &mut Tape<f32>,
    model: &EncoderModel,
    params: &BoundParams,
    texts: &[&str],
) -> Result<Var, PipelineError> {
    let rows = texts
        .iter()
        .map(|t| model.sentence_embedding(tape, params, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&rows)?)
}

fn grads_by_name(
    tape: &Tape<f32>,
    loss: Var,
    groups: &[&BoundParams],
) -> Result<Vec<BTreeMap<String, Vec<f32>>>, PipelineError> {
    let g = tape.backward(loss)?;
    Ok(groups
        .iter()
        .map(|p| {
            p.iter()
                .filter_map(|(name, v)| g.get(*v).map(|x| (name.clone(), x.to_vec())))
                .collect()
        })
        .collect())
}

/// Spearman between normalized gold scores and model cosines.
pub fn validate(model: &EncoderModel, pairs: &[ScoredPair]) -> Result<f64, PipelineError> {
    let cos = pair_cosines(model, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.score_norm).collect();
    Ok(spearman(&gold, &cos)?)
}

/// Settings of a single training run; built from a [`StageConfig`] or by
/// hand for experiments outside the four-stage schedule.
#[derive(Clone, Debug)]
pub struct RunSpec<'a> {
    pub stage: &'a StageConfig,
    pub loss: RunLoss,
    pub seed: u64,
    pub guide: Option<&'a EncoderModel>,
    pub validation: Option<&'a [ScoredPair]>,
    pub sink: Option<CheckpointSink>,
}

/// Trains `initial` for `stage.epochs` epochs and returns the chosen
/// checkpoint's model: the best-validating one when validation pairs are
/// given, the last one otherwise.
pub fn train_run(
    initial: &EncoderModel,
    data: &StageData,
    spec: &RunSpec,
) -> Result<(EncoderModel, RunReport), PipelineError> {
    let stage = spec.stage;
    if data.kind() != spec.loss.data_kind() {
        return Err(PipelineError::Config(format!(
            "stage {}: loss {} needs {}, got {}",
            stage.stage_id,
            spec.loss.name(),
            spec.loss.data_kind(),
            data.kind()
        )));
    }
    if data.len() == 0 {
        return Err(PipelineError::Config(format!(
            "stage {}: training data is empty",
            stage.stage_id
        )));
    }
    if spec.loss == RunLoss::Gist && spec.guide.is_none() {
        return Err(PipelineError::Config(format!(
            "stage {}: GIST needs a guide model",
            stage.stage_id
        )));
    }
    let hyper = AdamWParams {
        beta1: stage.beta1,
        beta2: stage.beta2,
        eps: stage.adam_eps,
        weight_decay: stage.weight_decay,
    };
    let mut model = initial.clone();
    let mut opt = AdamW::new(hyper);
    let mut partner = (spec.loss == RunLoss::Ct).then(|| {
        (
            ct_partner(&model, stage.ct_noise_std, derive_seed(spec.seed, 0xC7)),
            AdamW::new(hyper),
        )
    });
    let mut decoder = (spec.loss == RunLoss::Tsdae).then(|| {
        let dec = TsdaeDecoder::new(
            model.embed_dim(),
            stage.decoder_hidden,
            derive_seed(spec.seed, 0xDEC),
        );
        (dec, AdamW::new(hyper))
    });
    let mut guide = spec.guide.map(|g| GuideCache {
        guide: g,
        cache: HashMap::new(),
    });

    let epoch_batches = |epoch: usize| -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let seed = derive_seed(spec.seed, epoch as u64);
        match data {
            StageData::Sentences(s) => {
                make_batches(idx, stage.batch_size, seed, Some(|&i: &usize| s[i].clone()))
            }
            StageData::Triples(t) => make_batches(
                idx,
                stage.batch_size,
                seed,
                Some(|&i: &usize| t[i].anchor.clone()),
            ),
            StageData::Scored(_) => {
                make_batches(idx, stage.batch_size, seed, None::<fn(&usize) -> usize>)
            }
        }
    };
    let per_epoch: Vec<usize> = (1..=stage.epochs).map(|e| epoch_batches(e).len()).collect();
    let total: usize = per_epoch.iter().sum();

    let mut report = RunReport {
        stage: stage.stage_id,
        loss: spec.loss.name().into(),
        ..Default::default()
    };
    let mut best: Option<(f64, EncoderModel)> = None;
    let mut step = 0usize;
    for epoch in 1..=stage.epochs {
        let batches = epoch_batches(epoch);
        for (bi, batch) in batches.iter().enumerate() {
            let lr = scheduled_lr(stage.learning_rate, step, total, stage.warmup_ratio);
            let step_seed = derive_seed(spec.seed, (1 << 32) + step as u64);
            step += 1;
            let mut tape = Tape::<f32>::new();
            let params = model.bind(&mut tape, true);
            let (loss, extra): (Var, Option<BoundParams>) = match (spec.loss, data) {
                (RunLoss::Ct, StageData::Sentences(s)) => {
                    let (pm, _) = partner.as_ref().expect("ct partner");
                    let pp = pm.bind(&mut tape, true);
                    let texts: Vec<&str> = batch.iter().map(|&i| s[i].as_str()).collect();
                    let a = embed_batch(&mut tape, &model, &params, &texts)?;
                    let b = embed_batch(&mut tape, pm, &pp, &texts)?;
                    (ct_loss(&mut tape, a, b)?, Some(pp))
                }
                (RunLoss::Tsdae, StageData::Sentences(s)) => {
                    let (dec, _) = decoder.as_ref().expect("decoder");
                    let dp = dec.bind(&mut tape, true);
                    let mut parts = Vec::with_capacity(batch.len());
                    for (k, &i) in batch.iter().enumerate() {
                        let ids = model.tokenize(&s[i]);
                        let noisy =
                            delete_noise(&ids, stage.noise_ratio, derive_seed(step_seed, k as u64));
                        parts.push(tsdae_loss(&mut tape, &model, &params, &dp, &noisy, &ids)?);
                    }
                    let mut total = parts[0];
                    for &p in &parts[1..] {
                        total = tape.add(total, p)?;
                    }
                    let loss = tape.scale(total, 1.0 / parts.len() as f32)?;
                    let names = dp.vars().map(|(n, v)| (n.to_string(), v));
                    (loss, Some(BoundParams::from_vars(names)))
                }
                (RunLoss::Gist | RunLoss::Mnr, StageData::Triples(t)) => {
                    let pick = |f: fn(&Triple) -> &str| {
                        batch.iter().map(|&i| f(&t[i])).collect::<Vec<&str>>()
                    };
                    let (at, pt, nt) = (
                        pick(|x| &x.anchor),
                        pick(|x| &x.positive),
                        pick(|x| &x.negative),
                    );
                    let a = embed_batch(&mut tape, &model, &params, &at)?;
                    let p = embed_batch(&mut tape, &model, &params, &pt)?;
                    let n = embed_batch(&mut tape, &model, &params, &nt)?;
                    let loss = if spec.loss == RunLoss::Gist {
                        let g = guide.as_mut().expect("guide");
                        let mask = gist_mask(
                            &g.embed(&at)?,
                            &g.embed(&pt)?,
                            Some(&g.embed(&nt)?),
                            stage.margin,
                        );
                        gist_loss(&mut tape, a, p, Some(n), &mask, stage.scale)?
                    } else {
                        mnr_loss(&mut tape, a, p, Some(n), stage.scale)?
                    };
                    (loss, None)
                }
                (RunLoss::Cosent | RunLoss::Angle, StageData::Scored(sp)) => {
                    let at: Vec<&str> = batch.iter().map(|&i| sp[i].sentence_a.as_str()).collect();
                    let bt: Vec<&str> = batch.iter().map(|&i| sp[i].sentence_b.as_str()).collect();
                    let scores: Vec<f64> = batch.iter().map(|&i| sp[i].score_norm).collect();
                    let a = embed_batch(&mut tape, &model, &params, &at)?;
                    let b = embed_batch(&mut tape, &model, &params, &bt)?;
                    let loss = if spec.loss == RunLoss::Cosent {
                        cosent_loss(&mut tape, a, b, &scores, stage.tau)?
                    } else {
                        angle_loss(
                            &mut tape,
                            a,
                            b,
                            &scores,
                            stage.w_cos,
                            stage.w_angle,
                            stage.tau,
                        )?
                    };
                    (loss, None)
                }
                _ => unreachable!("data kind checked above"),
            };
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    stage: stage.stage_id,
                    loss_fn: spec.loss.name(),
                    epoch,
                    step,
                    batch: bi,
                });
            }
            report.losses.push(value);
            let mut groups = vec![&params];
            groups.extend(extra.as_ref());
            let grads = grads_by_name(&tape, loss, &groups)?;
            opt.step(&mut model.params, &grads[0], lr)?;
            if let Some(g) = grads.get(1) {
                if let Some((pm, popt)) = partner.as_mut() {
                    popt.step(&mut pm.params, g, lr)?;
                } else if let Some((dec, dopt)) = decoder.as_mut() {
                    dopt.step(&mut dec.params, g, lr)?;
                }
            }

            let epoch_end = bi + 1 == batches.len();
            if epoch_end
                || (stage.checkpoint_every > 0 && step.is_multiple_of(stage.checkpoint_every))
            {
                let validation = spec.validation.map(|v| validate(&model, v)).transpose()?;
                let id = format!(
                    "{}e{epoch:03}-s{step:06}",
                    spec.sink.as_ref().map_or("", |s| s.prefix.as_str())
                );
                if let Some(sink) = &spec.sink {
                    let meta =
                        checkpoint_meta(&id, stage.stage_id, spec.loss, epoch, step, validation);
                    save(
                        &sink.dir.join(format!("e{epoch:03}-s{step:06}.srfm")),
                        &model,
                        &meta,
                    )?;
                }
                report.checkpoints.push(CheckpointRecord {
                    id,
                    epoch,
                    step,
                    validation,
                });
                if let Some(v) = validation {
                    if best.as_ref().is_none_or(|(b, _)| v > *b) {
                        best = Some((v, model.clone()));
                    }
                }
            }
        }
    }

    let history: Vec<(&str, f64)> = match spec.validation {
        Some(_) => report
            .checkpoints
            .iter()
            .map(|c| (c.id.as_str(), c.validation.expect("validated")))
            .collect(),
        None => vec![(
            report
                .checkpoints
                .last()
                .expect("one checkpoint per epoch")
                .id
                .as_str(),
            0.0,
        )],
    };
    let chosen = select_checkpoint(&history)?.to_string();
    let chosen_record = report
        .checkpoints
        .iter()
        .find(|c| c.id == chosen)
        .expect("chosen from history")
        .clone();
    report.chosen = chosen;
    report.chosen_validation = chosen_record.validation;
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    if let Some(sink) = &spec.sink {
        let meta = checkpoint_meta(
            &report.chosen,
            stage.stage_id,
            spec.loss,
            chosen_record.epoch,
            chosen_record.step,
            chosen_record.validation,
        );
        save(&sink.dir.join("best.srfm"), &model, &meta)?;
    }
    Ok((model, report))
}

pub(crate) fn checkpoint_meta(
    id: &str,
    stage: u8,
    loss: RunLoss,
    epoch: usize,
    step: usize,
    validation: Option<f64>,
) -> ModelMeta {
    ModelMeta {
        id: Some(id.to_string()),
        stage: Some(stage),
        variant: Some(loss.name().to_string()),
        epoch: Some(epoch),
        step: Some(step),
        validation,
    }
}

/// Runs one stage of the schedule. Stage 3 with both STS losses trains a
/// CoSENT and an AnglE model from the same start and seed and returns the one
/// with the higher validation score (CoSENT on ties).
pub fn run_stage(
    model: &EncoderModel,
    stage: &StageConfig,
    data: &StageData,
    validation: Option<&[ScoredPair]>,
    guide: Option<&EncoderModel>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(EncoderModel, StageReport), PipelineError> {
    stage.validate()?;
    if matches!(stage.stage_id, 2 | 3) && validation.is_none_or(|v| v.len() < 2) {
        return Err(PipelineError::Config(format!(
            "stage {} needs at least two STS validation pairs",
            stage.stage_id
        )));
    }
    let losses: &[RunLoss] = match stage.loss {
        LossKind::Ct => &[RunLoss::Ct],
        LossKind::Tsdae => &[RunLoss::Tsdae],
        LossKind::Gist => &[RunLoss::Gist],
        LossKind::Cosent => &[RunLoss::Cosent],
        LossKind::Angle => &[RunLoss::Angle],
        LossKind::CosentAngle => &[RunLoss::Cosent, RunLoss::Angle],
    };
    // a guide is the stage-start model unless one is supplied
    let frozen = (stage.loss == LossKind::Gist && guide.is_none()).then(|| model.clone());
    let guide = guide.or(frozen.as_ref());
    let run_seed = derive_seed(seed, u64::from(stage.stage_id));
    let mut results = Vec::new();
    for &loss in losses {
        let sink = out_dir.map(|d| {
            let mut dir = d.join(format!("stage{}", stage.stage_id));
            let mut prefix = format!("stage{}/", stage.stage_id);
            if losses.len() > 1 {
                dir = dir.join(loss.name());
                prefix = format!("{prefix}{}/", loss.name());
            }
            CheckpointSink { dir, prefix }
        });
        let spec = RunSpec {
            stage,
            loss,
            seed: run_seed,
            guide,
            validation,
            sink,
        };
        results.push(train_run(model, data, &spec)?);
    }
    let history: Vec<(&str, f64)> = results
        .iter()
        .map(|(_, r)| {
            (
                r.loss.as_str(),
                r.chosen_validation.unwrap_or(f64::NEG_INFINITY),
            )
        })
        .collect();
    let winner = select_checkpoint(&history)?.to_string();
    let (runs, mut models): (Vec<RunReport>, Vec<EncoderModel>) =
        results.into_iter().map(|(m, r)| (r, m)).unzip();
    let idx = runs
        .iter()
        .position(|r| r.loss == winner)
        .expect("winner is a run");
    let chosen = models.swap_remove(idx);
    if let Some(d) = out_dir {
        let r = &runs[idx];
        let rec = r
            .checkpoints
            .iter()
            .find(|c| c.id == r.chosen)
            .expect("chosen checkpoint");
        let meta = checkpoint_meta(
            &r.chosen,
            stage.stage_id,
            losses[idx],
            rec.epoch,
            rec.step,
            rec.validation,
        );
        save(
            &d.join(format!("stage{}", stage.stage_id)).join("best.srfm"),
            &chosen,
            &meta,
        )?;
    }
    Ok((
        chosen,
        StageReport {
            stage: stage.stage_id,
            runs,
            winner,
        },
    ))
}

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Id of the best checkpoint: highest score, earliest on ties.
pub fn select_checkpoint<S: AsRef<str>>(history: &[(S, f64)]) -> Result<&str, PipelineError> {
    let mut best: Option<&(S, f64)> = None;
    for entry in history {
        if best.is_none_or(|b| entry.1 > b.1) {
            best = Some(entry);
        }
    }
    best.map(|b| b.0.as_ref())
        .ok_or(PipelineError::EmptyHistory)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub epoch: usize,
    pub step: usize,
    pub validation: Option<f64>,
}

/// One training run of one stage (stage 3 has one per loss variant).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: u8,
    pub loss: String,
    /// Training loss after every optimizer step.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub chosen: String,
    pub chosen_validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub runs: Vec<RunReport>,
    /// Loss name of the run whose model the stage returns.
    pub winner: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub sts_model: Option<String>,
    pub ir_model: Option<String>,
}

impl TrainReport {
    /// One JSON event per line: every step, every checkpoint, each run's
    /// choice, each stage's winner, and a final summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: serde_json::Value| writeln!(out, "{v}").expect("write to string");
        for stage in &self.stages {
            for run in &stage.runs {
                for (step, loss) in run.losses.iter().enumerate() {
                    line(
                        serde_json::json!({"event": "step", "stage": stage.stage, "loss_fn": run.loss, "step": step + 1, "loss": loss}),
                    );
                }
                for c in &run.checkpoints {
                    line(serde_json::json!({
                        "event": "checkpoint", "stage": stage.stage, "loss_fn": run.loss,
                        "id": c.id, "epoch": c.epoch, "step": c.step, "validation": c.validation,
                    }));
                }
                line(serde_json::json!({
                    "event": "run_end", "stage": stage.stage, "loss_fn": run.loss,
                    "chosen": run.chosen, "validation": run.chosen_validation,
                }));
            }
            let results: Vec<_> = stage
                .runs
                .iter()
                .map(|r| serde_json::json!({"loss_fn": r.loss, "validation": r.chosen_validation}))
                .collect();
            line(
                serde_json::json!({"event": "stage_end", "stage": stage.stage, "winner": stage.winner, "results": results}),
            );
        }
        line(serde_json::json!({
            "event": "summary", "seed": self.seed,
            "stages": self.stages.iter().map(|s| s.stage).collect::<Vec<_>>(),
            "sts_model": self.sts_model, "ir_model": self.ir_model,
        }));
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| PipelineError::io(path, e))
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sembed::data::{
    load_ir_data, load_nli_pairs, load_scored_pairs, load_sentences, nli_to_triples, write_triples,
    DataError, ScoreRange,
};
use sembed::encoder::{load, EncoderError, EncoderModel};
use sembed::eval::{evaluate_ir, evaluate_sts, EvalReport};
use sembed::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use sembed::synth::write_toy;

/// Train and evaluate siamese sentence encoders.
#[derive(Parser)]
#[command(name = "sembed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn labeled NLI pairs (JSONL) into (anchor, positive, negative) triples.
    ConvertNli {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training schedule described by a config file.
    Train(TrainArgs),
    /// Evaluate a model on STS pairs or a retrieval collection.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Embed one sentence per line into JSONL `{text, vector}` records.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic corpus and a matching config.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated stage ids to run, e.g. `1,2,3`; default: the config's.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<u8>>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this model instead of a fresh one or the previous stage's.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the config output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Where to write the evaluation report (JSONL).
    #[arg(long, default_value = "eval_report.jsonl")]
    report: PathBuf,
    /// Add one record per pair or query to the report.
    #[arg(long)]
    details: bool,
    /// Dataset name recorded in the report; default: the data file stem.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Spearman correlation of pair cosines with gold scores.
    Sts {
        #[arg(long)]
        model: PathBuf,
        /// Scored pairs, `.jsonl` or tab-separated.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min: f64,
        #[arg(long, default_value_t = 5.0)]
        max: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// MRR@k of exact cosine retrieval.
    Ir {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
}

/// Exit codes: 1 usage or config, 2 data, 3 training.
#[derive(Clone, Copy)]
enum Kind {
    Usage = 1,
    Data = 2,
    Training = 3,
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

trait Classify<T> {
    fn or_exit(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind,
            error: e.into(),
        })
    }
}

fn encoder_kind(e: &EncoderError) -> Kind {
    match e {
        EncoderError::Io { .. }
        | EncoderError::BadMagic
        | EncoderError::Truncated
        | EncoderError::Format(_) => Kind::Data,
        _ => Kind::Training,
    }
}

fn pipeline_kind(e: &PipelineError) -> Kind {
    match e {
        PipelineError::Config(_)
        | PipelineError::MissingInit { .. }
        | PipelineError::MissingData { .. } => Kind::Usage,
        PipelineError::Data(_) | PipelineError::Io { .. } => Kind::Data,
        PipelineError::Encoder(e) => encoder_kind(e),
        _ => Kind::Training,
    }
}

fn load_model(path: &Path) -> Result<EncoderModel, Failure> {
    load(path)
        .map(|(m, _)| m)
        .with_context(|| format!("loading model {}", path.display()))
        .or_exit(Kind::Data)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn finish(report: &EvalReport, args: &ReportArgs) -> Result<(), Failure> {
    report
        .write_jsonl(&args.report, args.details)
        .or_exit(Kind::Data)?;
    println!("{} {:.4}", report.metric, report.value);
    Ok(())
}

fn convert_nli(input: &Path, out: &Path) -> Result<(), Failure> {
    let pairs = load_nli_pairs(input).or_exit(Kind::Data)?;
    let triples = nli_to_triples(&pairs);
    write_triples(out, &triples).or_exit(Kind::Data)?;
    println!("{}", triples.len());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = PipelineConfig::load(&args.config).or_exit(Kind::Usage)?;
    if let Some(stages) = &args.stages {
        config.restrict(stages).or_exit(Kind::Usage)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    let init = args.init.as_deref().map(load_model).transpose()?;
    let out = run_pipeline(&config, init).map_err(|e| Failure {
        kind: pipeline_kind(&e),
        error: e.into(),
    })?;
    for s in &out.report.stages {
        println!("stage {} winner {}", s.stage, s.winner);
    }
    println!("output {}", config.output_dir.display());
    Ok(())
}

fn eval(cmd: EvalCommand) -> Result<(), Failure> {
    match cmd {
        EvalCommand::Sts {
            model,
            data,
            min,
            max,
            report,
        } => {
            if min.partial_cmp(&max) != Some(std::cmp::Ordering::Less) {
                return Err(Failure {
                    kind: Kind::Usage,
                    error: anyhow::anyhow!("--min must be below --max"),
                });
            }
            let range = ScoreRange::new(min, max);
            let pairs = load_scored_pairs(&data, range).or_exit(Kind::Data)?;
            let model = load_model(&model)?;
            let dataset = report.dataset.clone().unwrap_or_else(|| stem(&data));
            let r = evaluate_sts(&model, &pairs, &dataset).or_exit(Kind::Data)?;
            finish(&r, &report)
        }
        EvalCommand::Ir {
            model,
            queries,
            passages,
            qrels,
            k,
            report,
        } => {
            if k == 0 {
                return Err(Failure {
                    kind: Kind::Usage,
                    error: anyhow::anyhow!("--k must be at least 1"),
                });
            }
            let data = load_ir_data(&queries, &passages, &qrels).or_exit(Kind::Data)?;
            let model = load_model(&model)?;
            let dataset = report.dataset.clone().unwrap_or_else(|| stem(&passages));
            let r = evaluate_ir(&model, &data, k, &dataset).or_exit(Kind::Data)?;
            finish(&r, &report)
        }
    }
}

fn embed(model: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_model(model)?;
    let texts = load_sentences(input).or_exit(Kind::Data)?;
    let vectors = model.embed_sentences(&texts).or_exit(Kind::Training)?;
    let mut buf = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let rec = serde_json::json!({"text": text, "vector": vectors.row(i)});
        writeln!(buf, "{rec}").expect("write to vec");
    }
    std::fs::write(out, buf)
        .map_err(|e| DataError::io(out, e))
        .or_exit(Kind::Data)?;
    println!("{}", texts.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ConvertNli { input, out } => convert_nli(&input, &out),
        Command::Train(args) => train(args),
        Command::Eval(cmd) => eval(cmd),
        Command::Embed { model, input, out } => embed(&model, &input, &out),
        Command::GenToy { out, seed } => {
            std::fs::create_dir_all(&out)
                .map_err(|e| DataError::io(&out, e))
                .or_exit(Kind::Data)?;
            let config = write_toy(&out, seed).or_exit(Kind::Data)?;
            println!("{}", config.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Kind::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}

//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sembed::data::{
    load_ir_data, load_scored_pairs, load_triples, nli_to_triples, LabeledPair, NliLabel, QrelSet,
    ScoreRange,
};
use sembed::encoder::{
    format, BoundParams, EncoderConfig, EncoderError, EncoderModel, ModelMeta, TokenId, Vocab, BOS,
    EOS,
};
use sembed::eval::{evaluate_ir, evaluate_sts, mrr_at_k, spearman};
use sembed::losses::{
    angle_loss, cosent_loss, cosine_sts_loss, ct_loss, gist_logits, gist_loss, mnr_logits,
    mnr_loss, DecoderParams, TsdaeDecoder,
};
use sembed::numerics::{grad_check, GradCheckReport, Tape, Tensor, Var};
use sembed::pipeline::{
    initial_model, run_pipeline, train_run, PipelineConfig, RunLoss, RunSpec, StageData,
};
use sembed::synth::{files, write_toy, STS_RANGE};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

const GRAD_SEEDS: u64 = 50;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rand_vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Pairs whose complex-split angles stay clear of 0 and π, where the angle
/// term's |·| has a kink and finite differences are meaningless.
fn angle_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Tensor<f64>> {
    let h = d / 2;
    loop {
        let a = rand_matrix(rng, n, d);
        let b = rand_matrix(rng, n, d);
        let ok = (0..n).all(|r| {
            (0..h).all(|k| {
                let (x, y) = (a.data()[r * d + k], a.data()[r * d + h + k]);
                let (c, e) = (b.data()[r * d + k], b.data()[r * d + h + k]);
                let theta = (y * c - x * e).atan2(x * c + y * e).abs();
                x.hypot(y).min(c.hypot(e)) > 0.2
                    && theta > 0.05
                    && theta < std::f64::consts::PI - 0.05
            })
        });
        if ok {
            return vec![a, b];
        }
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut record = |what: &'static str, seed: u64, r: Result<GradCheckReport, _>| match r {
        Ok(r) => {
            let w = worst.entry(what).or_insert((0.0, 0.0));
            *w = (w.0.max(r.max_rel_error), w.1.max(r.max_abs_error));
            if !r.passed {
                let (i, j) = r.worst;
                failures.push(format!(
                        "{what} seed {seed}: rel {:.2e} at input {i}[{j}] (analytic {:.6e}, numeric {:.6e})",
                        r.max_rel_error, r.analytic[i][j], r.numeric[i][j]
                    ));
            }
        }
        Err(e) => failures.push(format!("{what} seed {seed}: {e}")),
    };
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0000 + seed);
        let n = rng.random_range(2..=4);
        let d = 2 * rng.random_range(1..=4);
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let pair = [rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d)];
        let triple = [
            pair[0].clone(),
            pair[1].clone(),
            rand_matrix(&mut rng, n, d),
        ];
        let (e, t) = (GRAD_EPS, GRAD_TOL);

        record(
            "cosine",
            seed,
            grad_check(|tp, v| cosine_sts_loss(tp, v[0], v[1], &s), &pair, e, t),
        );
        record(
            "cosent",
            seed,
            grad_check(|tp, v| cosent_loss(tp, v[0], v[1], &s, 0.05), &pair, e, t),
        );
        let ang = angle_inputs(&mut rng, n, d);
        record(
            "angle",
            seed,
            grad_check(
                |tp, v| angle_loss(tp, v[0], v[1], &s, 1.0, 1.0, 0.05),
                &ang,
                e,
                t,
            ),
        );
        record(
            "mnr",
            seed,
            grad_check(
                |tp, v| mnr_loss(tp, v[0], v[1], Some(v[2]), 20.0),
                &triple,
                e,
                t,
            ),
        );
        let mask: Vec<bool> = (0..n * 3 * n)
            .map(|c| c % (3 * n) != c / (3 * n) && rng.random_bool(0.4))
            .collect();
        record(
            "gist",
            seed,
            grad_check(
                |tp, v| gist_loss(tp, v[0], v[1], Some(v[2]), &mask, 20.0),
                &triple,
                e,
                t,
            ),
        );
        record(
            "ct",
            seed,
            grad_check(|tp, v| ct_loss(tp, v[0], v[1]), &pair, e, t),
        );

        let vocab = 6;
        let ids: Vec<TokenId> = [BOS]
            .into_iter()
            .chain((0..n).map(|_| rng.random_range(4..vocab as TokenId)))
            .chain([EOS])
            .collect();
        let hidden = 4;
        let dec = [
            rand_matrix(&mut rng, vocab, d),
            rand_vector(&mut rng, d),
            rand_matrix(&mut rng, d, hidden),
            rand_vector(&mut rng, hidden),
            rand_matrix(&mut rng, hidden, d),
            rand_vector(&mut rng, d),
        ];
        record(
            "tsdae",
            seed,
            grad_check(
                |tp, v| {
                    let p = DecoderParams {
                        w1: v[2],
                        b1: v[3],
                        w2: v[4],
                        b2: v[5],
                    };
                    TsdaeDecoder::loss(tp, &p, v[0], v[1], &ids)
                },
                &dec,
                e,
                t,
            ),
        );

        // encoder: every parameter, through a fixed projection of the pooled
        // output; at width 2 layer-norm rows are exactly ±(1, -1) and their
        // mean can cancel to ~0, where L2 normalization is singular
        let d = d.max(4);
        let cfg = EncoderConfig {
            embed_dim: d,
            num_layers: 1,
            max_seq_len: 8,
            ff_dim: d,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::new(cfg, Vocab::from_words(["a", "b", "c", "d"]), seed).unwrap();
        let words = ["a", "b", "c", "d"];
        let text: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..4)]).collect();
        let ids = model.tokenize(&text.join(" "));
        let names: Vec<String> = model.params.keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> = model.params.values().map(|t| t.cast()).collect();
        let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        record(
            "encoder",
            seed,
            grad_check(
                |tp, vars| -> Result<Var, EncoderError> {
                    let bound =
                        BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
                    let pooled = model.ids_embedding(tp, &bound, &ids)?;
                    let w = tp.constant(Tensor::vector(probe.clone()));
                    let p = tp.mul(pooled, w)?;
                    Ok(tp.sum(p)?)
                },
                &inputs,
                e,
                t,
            ),
        );
    }
    let elapsed = start.elapsed();
    let summary = worst
        .iter()
        .map(|(k, (rel, abs))| format!("{k} rel {rel:.1e} abs {abs:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        failures.is_empty(),
        format!(
            "{} failures: {}",
            failures.len(),
            failures[..failures.len().min(5)].join("; ")
        ),
    )?;
    ensure(elapsed < GRAD_BUDGET, format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "{GRAD_SEEDS} seeds x 8 functions, max rel error < {GRAD_TOL:e} [{summary}] in {}",
        secs(elapsed)
    ))
}

// ------------------------------------------------------------------ metrics

/// Midranks by counting; an independent O(n²) formulation.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&o| o < v).count() as f64;
            let equal = x.iter().filter(|&&o| o == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn brute_mrr(
    rankings: &[(String, Vec<String>)],
    rel: &BTreeMap<String, BTreeSet<String>>,
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for (q, ranked) in rankings {
        for (i, p) in ranked.iter().take(k).enumerate() {
            if rel[q].contains(p) {
                total += 1.0 / (i + 1) as f64;
                break;
            }
        }
    }
    total / rankings.len() as f64
}

fn qrels(rel: BTreeMap<String, BTreeSet<String>>) -> QrelSet {
    QrelSet {
        queries: rel.keys().map(|q| (q.clone(), q.clone())).collect(),
        passages: Vec::new(),
        relevant: rel,
    }
}

fn metric_oracles() -> Outcome {
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.2, 0.1, 0.4, 0.3]).map_err(|e| e.to_string())?;
    ensure((rho - 0.6).abs() < 1e-9, format!("4-point spearman {rho}"))?;

    let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let rankings = vec![
        ("q1".to_string(), ids(&["x", "p1", "y"])),
        ("q2".to_string(), ids(&["a", "b", "c", "d", "p2", "e"])),
    ];
    let rel = BTreeMap::from([
        ("q1".to_string(), BTreeSet::from(["p1".to_string()])),
        ("q2".to_string(), BTreeSet::from(["p2".to_string()])),
    ]);
    let mrr = mrr_at_k(&rankings, &qrels(rel), 10).map_err(|e| e.to_string())?;
    ensure(mrr == 0.35, format!("2-query mrr {mrr}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let mut max_rho_diff = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=100);
        // small value ranges force ties
        let levels = rng.random_range(2..=20);
        let gold: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let pred: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * 0.1)
            .collect();
        let want = brute_spearman(&gold, &pred);
        match spearman(&gold, &pred) {
            Ok(got) => max_rho_diff = max_rho_diff.max((got - want).abs()),
            Err(_) => ensure(
                !want.is_finite(),
                format!("spearman refused a defined case n={n}"),
            )?,
        }
    }
    ensure(
        max_rho_diff < 1e-9,
        format!("spearman off by {max_rho_diff:e}"),
    )?;

    let mut max_mrr_diff = 0.0f64;
    for _ in 0..1000 {
        let nq = rng.random_range(1..=10);
        let np = rng.random_range(1..=30);
        let k = rng.random_range(1..=15);
        let mut rankings = Vec::new();
        let mut rel = BTreeMap::new();
        for q in 0..nq {
            let mut order: Vec<String> = (0..np).map(|p| format!("p{p}")).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let relevant: BTreeSet<String> = (0..np)
                .filter(|_| rng.random_bool(0.1))
                .map(|p| format!("p{p}"))
                .collect();
            rankings.push((format!("q{q}"), order));
            rel.insert(format!("q{q}"), relevant);
        }
        let want = brute_mrr(&rankings, &rel, k);
        let got = mrr_at_k(&rankings, &qrels(rel), k).map_err(|e| e.to_string())?;
        max_mrr_diff = max_mrr_diff.max((got - want).abs());
    }
    ensure(max_mrr_diff < 1e-12, format!("mrr off by {max_mrr_diff:e}"))?;
    Ok(format!(
        "spearman 0.6 and mrr 0.35 exact; 1000 random instances each agree (max diff {max_rho_diff:.1e} / {max_mrr_diff:.1e})"
    ))
}

// ------------------------------------------------------------ loss identities

fn with_tape<F: FnOnce(&mut Tape<f64>, &[Var]) -> Var>(
    inputs: &[Tensor<f64>],
    f: F,
) -> Tensor<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = f(&mut t, &vars);
    t.value(out).clone()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1D);
    for trial in 0..20 {
        let n = rng.random_range(2..=6);
        let d = 2 * rng.random_range(1..=4);
        let x = [rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d)];

        let g = with_tape(&x, |t, v| gist_logits(t, v[0], v[1], None, 20.0).unwrap());
        let m = with_tape(&x, |t, v| mnr_logits(t, v[0], v[1], None, 20.0).unwrap());
        ensure(
            bits(&g) == bits(&m),
            format!("trial {trial}: gist logits differ from mnr"),
        )?;
        let open = vec![false; n * n];
        let gl = with_tape(&x, |t, v| {
            gist_loss(t, v[0], v[1], None, &open, 20.0).unwrap()
        });
        let ml = with_tape(&x, |t, v| mnr_loss(t, v[0], v[1], None, 20.0).unwrap());
        ensure(
            bits(&gl) == bits(&ml),
            format!("trial {trial}: unfiltered gist loss differs from mnr"),
        )?;

        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let a = with_tape(&x, |t, v| {
            angle_loss(t, v[0], v[1], &s, 1.0, 0.0, 0.05).unwrap()
        });
        let c = with_tape(&x, |t, v| cosent_loss(t, v[0], v[1], &s, 0.05).unwrap());
        ensure(
            (a.item() - c.item()).abs() < 1e-12,
            format!(
                "trial {trial}: angle(w_angle=0) {} vs cosent {}",
                a.item(),
                c.item()
            ),
        )?;

        let flat = vec![0.7; n];
        let z = with_tape(&x, |t, v| cosent_loss(t, v[0], v[1], &flat, 0.05).unwrap());
        ensure(
            z.item() == 0.0,
            format!("trial {trial}: equal scores give {}", z.item()),
        )?;
    }

    let n = 8;
    let x = [rand_matrix(&mut rng, n, 6), rand_matrix(&mut rng, n, 6)];
    let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let base = with_tape(&x, |t, v| cosent_loss(t, v[0], v[1], &s, 0.05).unwrap()).item();
    let mut max_diff = 0.0f64;
    for i in 0..20 {
        let (a, b, p): (f64, f64, f64) = (
            rng.random_range(0.1..10.0),
            rng.random_range(0.0..5.0),
            rng.random_range(0.2..3.0),
        );
        // strictly increasing maps of [0, 1] into [0, 1]
        let relabel: Box<dyn Fn(f64) -> f64> = match i % 4 {
            0 => Box::new(move |v: f64| (v + b) / (1.0 + b)),
            1 => Box::new(move |v: f64| v.powf(p)),
            2 => Box::new(move |v: f64| (a * v).exp_m1() / a.exp_m1()),
            _ => Box::new(move |v: f64| (1.0 + a * v).ln() / (1.0 + a).ln()),
        };
        let mapped: Vec<f64> = s.iter().map(|&v| relabel(v)).collect();
        let l = with_tape(&x, |t, v| {
            cosent_loss(t, v[0], v[1], &mapped, 0.05).unwrap()
        })
        .item();
        max_diff = max_diff.max((l - base).abs());
    }
    ensure(
        max_diff < 1e-6,
        format!("monotone relabeling moved cosent by {max_diff:e}"),
    )?;
    Ok(format!(
        "gist==mnr bitwise, angle(w=0)==cosent, flat cosent=0; relabel max diff {max_diff:.1e}"
    ))
}

// ---------------------------------------------------------------------- NLI

fn nli_conversion() -> Outcome {
    let pair = |p: &str, h: &str, label| LabeledPair {
        premise: p.into(),
        hypothesis: h.into(),
        label,
    };
    let minimal = [
        pair("a man sleeps", "a person rests", NliLabel::Entailment),
        pair("a man sleeps", "a man runs", NliLabel::Contradiction),
    ];
    let t = nli_to_triples(&minimal);
    ensure(
        t.len() == 1
            && t[0].anchor == "a man sleeps"
            && t[0].positive == "a person rests"
            && t[0].negative == "a man runs",
        "minimal case",
    )?;
    ensure(nli_to_triples(&[]).is_empty(), "empty input")?;
    ensure(
        nli_to_triples(&[pair("x", "y", NliLabel::Neutral)]).is_empty(),
        "neutral-only input",
    )?;
    ensure(
        nli_to_triples(&minimal[..1]).is_empty(),
        "entailment without contradiction",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    let labels = [
        NliLabel::Entailment,
        NliLabel::Neutral,
        NliLabel::Contradiction,
    ];
    for trial in 0..1000 {
        let n = rng.random_range(0..40);
        let premises = rng.random_range(1..=6);
        let pairs: Vec<LabeledPair> = (0..n)
            .map(|i| {
                pair(
                    &format!("p{}", rng.random_range(0..premises)),
                    &format!("h{i}"),
                    labels[rng.random_range(0..3)],
                )
            })
            .collect();
        let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for p in &pairs {
            let g = groups.entry(p.premise.as_str()).or_default();
            match p.label {
                NliLabel::Entailment => g.0 += 1,
                NliLabel::Contradiction => g.1 += 1,
                NliLabel::Neutral => {}
            }
        }
        let triples = nli_to_triples(&pairs);
        let want: usize = groups.values().map(|(e, c)| e * c).sum();
        ensure(
            triples.len() == want,
            format!("trial {trial}: {} triples, oracle {want}", triples.len()),
        )?;
        for (prem, (e, c)) in &groups {
            let got = triples.iter().filter(|t| t.anchor == *prem).count();
            ensure(
                got == e * c,
                format!("trial {trial}: premise {prem} has {got}, oracle {}", e * c),
            )?;
        }
    }
    Ok("minimal cases exact; 1000 random sets match group-and-count".into())
}

// ------------------------------------------------------------ toy end to end

const TOY_SEED: u64 = 7;

struct Toy {
    dir: tempfile::TempDir,
    config: PipelineConfig,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy(dir.path(), TOY_SEED).unwrap();
        let config = PipelineConfig::load(&path).unwrap();
        Toy { dir, config }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn ir(&self) -> QrelSet {
        load_ir_data(
            &self.path(files::IR_QUERIES),
            &self.path(files::IR_PASSAGES),
            &self.path(files::IR_QRELS),
        )
        .unwrap()
    }
}

struct Trained {
    sts_model: EncoderModel,
    ir_model: EncoderModel,
}

fn sts_trend(toy: &Toy, trained: &mut Option<EncoderModel>) -> Outcome {
    let test = load_scored_pairs(
        &toy.path(files::STS_TEST),
        ScoreRange::new(STS_RANGE.0, STS_RANGE.1),
    )
    .map_err(|e| e.to_string())?;
    let untrained = initial_model(&toy.config).map_err(|e| e.to_string())?;
    let before = evaluate_sts(&untrained, &test, "sts_test")
        .map_err(|e| e.to_string())?
        .value;
    let mut cfg = toy.config.clone();
    cfg.restrict(&[1, 2, 3]).unwrap();
    let start = Instant::now();
    let out = run_pipeline(&cfg, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let model = out.sts_model.ok_or("stage 3 produced no model")?;
    let after = evaluate_sts(&model, &test, "sts_test")
        .map_err(|e| e.to_string())?
        .value;
    *trained = Some(model);
    let detail = format!(
        "untrained {before:.4} -> stages 1-3 {after:.4} on {} held-out pairs in {}",
        test.len(),
        secs(elapsed)
    );
    ensure(after >= 0.8, format!("{detail}: below 0.8"))?;
    ensure(after - before >= 0.3, format!("{detail}: gain below 0.3"))?;
    ensure(
        elapsed < Duration::from_secs(300),
        format!("{detail}: over 5 min"),
    )?;
    Ok(detail)
}

fn ir_trend(toy: &Toy, sts_model: &EncoderModel, trained: &mut Option<EncoderModel>) -> Outcome {
    let ir = toy.ir();
    let before = evaluate_ir(sts_model, &ir, 10, "ir")
        .map_err(|e| e.to_string())?
        .value;
    let mut cfg = toy.config.clone();
    cfg.restrict(&[4]).unwrap();
    let start = Instant::now();
    let out = run_pipeline(&cfg, Some(sts_model.clone())).map_err(|e| e.to_string())?;
    let model = out.ir_model.ok_or("stage 4 produced no model")?;
    let after = evaluate_ir(&model, &ir, 10, "ir")
        .map_err(|e| e.to_string())?
        .value;
    let elapsed = start.elapsed();
    *trained = Some(model);
    let detail = format!(
        "pre-stage-4 {before:.4} -> {after:.4} MRR@10 over {} queries / {} passages in {}",
        ir.queries.len(),
        ir.passages.len(),
        secs(elapsed)
    );
    ensure(after >= 0.9, format!("{detail}: below 0.9"))?;
    ensure(after > before, format!("{detail}: no improvement"))?;
    ensure(
        elapsed < Duration::from_secs(120),
        format!("{detail}: over 2 min"),
    )?;
    Ok(detail)
}

fn gist_vs_mnr(toy: &Toy, start_model: &EncoderModel) -> Outcome {
    let triples = load_triples(&toy.path(files::IR_NOISY_TRAIN)).map_err(|e| e.to_string())?;
    let false_negatives = triples.iter().filter(|t| t.negative == t.positive).count();
    let data = StageData::Triples(triples);
    let ir = toy.ir();
    let stage = toy.config.stage(4).clone();
    let run = |loss: RunLoss| -> Result<f64, String> {
        let spec = RunSpec {
            stage: &stage,
            loss,
            seed: TOY_SEED,
            guide: Some(start_model),
            validation: None,
            sink: None,
        };
        let (model, _) = train_run(start_model, &data, &spec).map_err(|e| e.to_string())?;
        Ok(evaluate_ir(&model, &ir, 10, "ir")
            .map_err(|e| e.to_string())?
            .value)
    };
    let first = (run(RunLoss::Gist)?, run(RunLoss::Mnr)?);
    let second = (run(RunLoss::Gist)?, run(RunLoss::Mnr)?);
    ensure(
        first.0.to_bits() == second.0.to_bits() && first.1.to_bits() == second.1.to_bits(),
        format!("repeat runs differ: {first:?} vs {second:?}"),
    )?;
    Ok(format!(
        "noisy triples ({false_negatives} false negatives): GIST MRR@10 {:.4}, MNR MRR@10 {:.4}; repeat identical",
        first.0, first.1
    ))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism(toy: &Toy) -> Outcome {
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut cfg = toy.config.clone();
        cfg.output_dir = toy.path(name);
        run_pipeline(&cfg, None).map_err(|e| e.to_string())?;
        Ok(tree(&cfg.output_dir))
    };
    let a = run("det_a")?;
    let b = run("det_b")?;
    ensure(a.keys().eq(b.keys()), "different file sets")?;
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure(
        differing.is_empty(),
        format!("differing files: {differing:?}"),
    )?;
    let checkpoints = a.keys().filter(|k| k.ends_with(".srfm")).count();
    ensure(
        a.contains_key("report.jsonl") && checkpoints > 4,
        "missing outputs",
    )?;
    Ok(format!(
        "two full runs: {checkpoints} checkpoints + report byte-identical"
    ))
}

fn checkpoint_format(trained: &Trained) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let meta = ModelMeta {
        id: Some("acceptance".into()),
        stage: Some(4),
        validation: Some(0.25),
        ..Default::default()
    };
    let mut sizes = Vec::new();
    for (i, model) in [&trained.sts_model, &trained.ir_model]
        .into_iter()
        .enumerate()
    {
        let p1 = dir.path().join(format!("m{i}.srfm"));
        let p2 = dir.path().join(format!("m{i}b.srfm"));
        format::save(&p1, model, &meta).map_err(|e| e.to_string())?;
        let (back, back_meta) = format::load(&p1).map_err(|e| e.to_string())?;
        ensure(&back == model && back_meta == meta, "loaded model differs")?;
        format::save(&p2, &back, &back_meta).map_err(|e| e.to_string())?;
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        ensure(b1 == b2, "save-load-save bytes differ")?;
        sizes.push(b1.len());
    }
    let mut bytes = std::fs::read(dir.path().join("m0.srfm")).unwrap();
    bytes[0] = b'X';
    match format::from_bytes(&bytes) {
        Err(EncoderError::BadMagic) => {}
        other => return Err(format!("corrupted magic gave {:?}", other.map(|_| ()))),
    }
    let msg = EncoderError::BadMagic.to_string();
    ensure(msg.contains("magic"), format!("unclear error {msg:?}"))?;
    Ok(format!(
        "round trip byte-identical ({} / {} bytes); bad magic -> \"{msg}\"",
        sizes[0], sizes[1]
    ))
}

// --------------------------------------------------------------------- main

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut check = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {name}: {detail}");
        results.push((name, outcome));
    };

    check("gradient suite", &mut gradient_suite);
    check("metric oracles", &mut metric_oracles);
    check("loss identities", &mut loss_identities);
    check("nli conversion", &mut nli_conversion);

    let toy = Toy::new();
    let mut sts_model = None;
    let mut ir_model = None;
    check("toy sts trend", &mut || sts_trend(&toy, &mut sts_model));
    check("toy ir trend", &mut || match &sts_model {
        Some(m) => ir_trend(&toy, m, &mut ir_model),
        None => Err("needs the stage-3 model".into()),
    });
    check("gist vs mnr comparison", &mut || match &sts_model {
        Some(m) => gist_vs_mnr(&toy, m),
        None => Err("needs the stage-3 model".into()),
    });
    check("determinism", &mut || determinism(&toy));
    check("checkpoint format", &mut || match (&sts_model, &ir_model) {
        (Some(s), Some(i)) => checkpoint_format(&Trained {
            sts_model: s.clone(),
            ir_model: i.clone(),
        }),
        _ => Err("needs trained models".into()),
    });

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::path::{Path, PathBuf};
use std::time::Instant;

use blockdiff::analysis::{bias_curve, builtin_family, eos_confidence_stats};
use blockdiff::corpus::{
    derive_seed, generate_corpus, read_dataset, write_dataset, PhraseMatcher, ReportGrammar, ReportRecord, Vocabulary,
};
use blockdiff::decoding::{
    decode_blocks, ledger_compare, measure_throughput, CacheStrategy, DecodeConfig, DecodeMode, DecodeOutput, DecodeTokens,
};
use blockdiff::denoiser::{init_params, ModelParams};
use blockdiff::layout::{build_full_dup_layout, build_rad_layout, rad_savings, rad_savings_detail, FlopsModel, Specials};
use blockdiff::metrics::{evaluate, EvalReport};
use blockdiff::tensor::AttentionKernel;
use blockdiff::training::{distill, train_ar, train_rad, DistillObjective, StepMetrics, Tokens, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{ensure_dir, read_json, write_csv, write_json, write_jsonl, write_text};
use crate::{Command, Objective};

const TIMING_FILE: &str = "timing.json";

/// Runs one command, writing its artifacts under `out`, and returns the
/// summary that was written to `<stage>/summary.json`.
pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<Value> {
    match command {
        Command::GenCorpus => gen_corpus(cfg, out),
        Command::TrainAr => train_ar_cmd(cfg, out),
        Command::AdaptRad => adapt_rad(cfg, out),
        Command::Distill { objective } => distill_cmd(cfg, out, *objective),
        Command::Decode => decode_cmd(cfg, out),
        Command::BenchKv => bench_kv(cfg, out),
        Command::BenchRadFlops => bench_rad_flops(cfg, out),
        Command::AnalyzeBias => analyze_bias(cfg, out),
        Command::AnalyzeEos => analyze_eos(cfg, out),
        Command::Eval => eval_cmd(cfg, out),
        Command::Compare => compare(cfg, out),
    }
}

/// Stage RNG seeds mix the global seed with the stage's own seed field.
fn stage_seed(global: u64, stage: u64, local: u64) -> u64 {
    derive_seed(global, 1000 + stage, local)
}

struct Stage {
    dir: PathBuf,
    command: &'static str,
}

impl Stage {
    fn open(out: &Path, name: &str, command: &'static str, cfg: &RunConfig) -> Result<Self> {
        let dir = ensure_dir(&out.join(name))?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        Ok(Stage { dir, command })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Writes `summary.json`; wall-clock values go to a separate file that
    /// the summary flags as nondeterministic.
    fn finish(&self, mut summary: Value, timing: Option<Value>) -> Result<Value> {
        let obj = summary.as_object_mut().expect("summary is an object");
        obj.insert("command".into(), json!(self.command));
        let nondet: Vec<&str> = if timing.is_some() { vec![TIMING_FILE] } else { vec![] };
        obj.insert("nondeterministic_files".into(), json!(nondet));
        if let Some(t) = timing {
            write_json(&self.path(TIMING_FILE), &t)?;
        }
        write_json(&self.path("summary.json"), &summary)?;
        Ok(summary)
    }
}

struct Corpus {
    grammar: ReportGrammar,
    vocab: Vocabulary,
    train: Vec<ReportRecord>,
    eval: Vec<ReportRecord>,
}

impl Corpus {
    fn tokens(&self) -> Tokens {
        Tokens {
            mask: self.vocab.mask_id(),
            eos: self.vocab.eos_id(),
            pad: self.vocab.pad_id(),
        }
    }

    fn decode_tokens(&self) -> DecodeTokens {
        DecodeTokens {
            mask: self.vocab.mask_id(),
            eos: self.vocab.eos_id(),
        }
    }

    fn eval_slice(&self, limit: Option<usize>) -> &[ReportRecord] {
        &self.eval[..limit.unwrap_or(self.eval.len()).min(self.eval.len())]
    }
}

fn require(path: PathBuf, requires: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Dependency {
            requires: requires.to_string(),
            missing: path,
        })
    }
}

fn load_corpus(out: &Path) -> Result<Corpus> {
    let dir = out.join("corpus");
    let grammar = ReportGrammar::load(&require(dir.join("grammar.toml"), "gen-corpus")?)?;
    let vocab = Vocabulary::from_grammar(&grammar)?;
    let train = read_dataset(&require(dir.join("train.jsonl"), "gen-corpus")?)?;
    let eval = read_dataset(&require(dir.join("eval.jsonl"), "gen-corpus")?)?;
    Ok(Corpus {
        grammar,
        vocab,
        train,
        eval,
    })
}

fn producer(stage: &str) -> String {
    match stage {
        "ar" => "train-ar".into(),
        "rad" => "adapt-rad".into(),
        s => match s.strip_prefix("distill-") {
            Some(tag) => format!("distill (tag `{tag}`)"),
            None => format!("the command producing stage `{s}`"),
        },
    }
}

fn load_model(out: &Path, stage: &str) -> Result<ModelParams> {
    let path = require(out.join(stage).join("model.bin"), &producer(stage))?;
    Ok(ModelParams::load(&path)?)
}

fn contexts(records: &[ReportRecord]) -> Vec<Vec<usize>> {
    records.iter().map(|r| r.context_tokens.clone()).collect()
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let c = &cfg.corpus;
    let mut grammar = match &c.grammar {
        Some(p) => ReportGrammar::load(p)?,
        None => ReportGrammar::default(),
    };
    if let Some(p) = c.abnormal_prob {
        grammar.abnormal_prob = p;
    }
    if let Some(b) = c.variant_bias {
        grammar.variant_bias = b;
    }
    grammar.validate()?;
    let vocab = Vocabulary::from_grammar(&grammar)?;
    let train = generate_corpus(&grammar, &vocab, cfg.seed, 0, c.n_train, c.normalized)?;
    let eval = generate_corpus(&grammar, &vocab, cfg.seed, 1, c.n_eval, c.normalized)?;
    let stage = Stage::open(out, "corpus", "gen-corpus", cfg)?;
    write_text(&stage.path("grammar.toml"), &grammar.to_toml_string())?;
    write_json(&stage.path("vocab.json"), &vocab.symbols())?;
    write_dataset(&train, &stage.path("train.jsonl"))?;
    write_dataset(&eval, &stage.path("eval.jsonl"))?;
    let mean_len = |rs: &[ReportRecord]| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().map(|r| r.response_tokens.len()).sum::<usize>() as f64 / rs.len() as f64
        }
    };
    stage.finish(
        json!({
            "vocab_size": vocab.len(),
            "n_train": train.len(),
            "n_eval": eval.len(),
            "normalized": c.normalized,
            "mean_response_len_train": mean_len(&train),
            "max_response_len": grammar.max_response_len(),
        }),
        None,
    )
}

#[derive(Serialize)]
struct MetricRow {
    step: usize,
    loss: f64,
    ce: f64,
    kl: f64,
    eos_ce: f64,
    lr: f64,
    grad_norm: f64,
}

fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let rows: Vec<MetricRow> = metrics
        .iter()
        .map(|m| MetricRow {
            step: m.step,
            loss: m.loss,
            ce: m.ce,
            kl: m.kl,
            eos_ce: m.eos_ce,
            lr: m.lr,
            grad_norm: m.grad_norm,
        })
        .collect();
    write_csv(path, &rows)
}

fn with_seed(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..*t }
}

fn train_summary(metrics: &[StepMetrics], params: &ModelParams) -> Value {
    let tail = &metrics[metrics.len().saturating_sub(20)..];
    let mean_tail = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64
    };
    json!({
        "steps": metrics.len(),
        "final_loss": metrics.last().map(|m| m.loss),
        "mean_loss_last_20": mean_tail,
        "n_params": params.n_params(),
    })
}

fn train_ar_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let corpus = load_corpus(out)?;
    let start = Instant::now();
    let mc = cfg.model.with_vocab(corpus.vocab.len());
    let mut params = init_params(&mc, stage_seed(cfg.seed, 1, 0))?;
    let tc = with_seed(&cfg.train_ar, stage_seed(cfg.seed, 1, cfg.train_ar.seed));
    let metrics = train_ar(&mut params, &corpus.train, &tc)?;
    let stage = Stage::open(out, "ar", "train-ar", cfg)?;
    params.save(&stage.path("model.bin"))?;
    write_metrics(&stage.path("metrics.csv"), &metrics)?;
    stage.finish(train_summary(&metrics, &params), Some(json!({ "wall_time_s": start.elapsed().as_secs_f64() })))
}

fn adapt_rad(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let corpus = load_corpus(out)?;
    let mut params = load_model(out, "ar")?;
    let start = Instant::now();
    let r = &cfg.adapt_rad;
    let tc = with_seed(&r.train, stage_seed(cfg.seed, 2, r.train.seed));
    let metrics = train_rad(&mut params, &corpus.train, r.block_size, &tc, corpus.tokens())?;
    let stage = Stage::open(out, "rad", "adapt-rad", cfg)?;
    params.save(&stage.path("model.bin"))?;
    write_metrics(&stage.path("metrics.csv"), &metrics)?;
    let mut summary = train_summary(&metrics, &params);
    summary["block_size"] = json!(r.block_size);
    stage.finish(summary, Some(json!({ "wall_time_s": start.elapsed().as_secs_f64() })))
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Dcd => "dcd",
        Objective::TrajectoryCe => "trajectory-ce",
    }
}

fn distill_cmd(cfg: &RunConfig, out: &Path, objective: Objective) -> Result<Value> {
    let d = &cfg.distill;
    let corpus = load_corpus(out)?;
    let teacher = load_model(out, &d.teacher)?;
    let mut student = teacher.clone();
    let start = Instant::now();
    let n = d.n_contexts.min(corpus.train.len());
    let ctxs = contexts(&corpus.train[..n]);
    let kind = match objective {
        Objective::Dcd => DistillObjective::Dcd,
        Objective::TrajectoryCe => DistillObjective::TrajectoryCe,
    };
    let tc = with_seed(&d.train, stage_seed(cfg.seed, 3, d.train.seed));
    let report = distill(&teacher, &mut student, &ctxs, kind, &d.trajectory, &tc, corpus.tokens())?;
    let tag = d.tag.clone().unwrap_or_else(|| objective_name(objective).to_string());
    let stage = Stage::open(out, &format!("distill-{tag}"), "distill", cfg)?;
    student.save(&stage.path("model.bin"))?;
    write_metrics(&stage.path("metrics.csv"), &report.metrics)?;
    let mut summary = train_summary(&report.metrics, &student);
    summary["objective"] = json!(objective_name(objective));
    summary["teacher"] = json!(d.teacher);
    summary["contexts"] = json!(report.contexts);
    summary["kept"] = json!(report.kept);
    summary["discarded"] = json!(report.discarded);
    summary["mean_steps_per_block"] = json!(report.mean_steps_per_block);
    stage.finish(summary, Some(json!({ "wall_time_s": start.elapsed().as_secs_f64() })))
}

#[derive(Serialize)]
struct OutputLine<'a> {
    index: usize,
    tokens: &'a [usize],
    text: String,
    terminated: bool,
    blocks: usize,
    decoded_tokens: usize,
    forward_passes: usize,
}

fn decode_eval_set(cfg: &RunConfig, out: &Path) -> Result<(Corpus, Vec<DecodeOutput>, Value, Value)> {
    let corpus = load_corpus(out)?;
    let params = load_model(out, &cfg.decode.model)?;
    let dc = cfg.decode.to_config(cfg.seed);
    let records = corpus.eval_slice(cfg.decode.limit);
    if records.is_empty() {
        return Err(CliError::Config("no evaluation records to decode".into()));
    }
    let (tp, outputs) = measure_throughput(&params, &contexts(records), &dc, corpus.decode_tokens())?;
    let summary = json!({
        "model": cfg.decode.model,
        "mode": cfg.decode.mode_name(),
        "samples": tp.samples,
        "tpf": tp.tpf,
        "termination_rate": tp.termination_rate,
        "decoded_tokens": tp.decoded_tokens,
        "output_tokens": tp.output_tokens,
        "forward_passes": tp.forward_passes,
    });
    let timing = json!({ "wall_time_s": tp.wall_time_s, "tps": tp.tps });
    Ok((corpus, outputs, summary, timing))
}

fn write_outputs(path: &Path, vocab: &Vocabulary, outputs: &[DecodeOutput]) -> Result<()> {
    let lines: Vec<OutputLine> = outputs
        .iter()
        .enumerate()
        .map(|(i, o)| OutputLine {
            index: i,
            tokens: &o.tokens,
            text: vocab.detokenize(&o.tokens),
            terminated: o.terminated,
            blocks: o.blocks,
            decoded_tokens: o.decoded_tokens,
            forward_passes: o.ledger.forward_passes(),
        })
        .collect();
    write_jsonl(path, &lines)
}

fn decode_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (corpus, outputs, summary, timing) = decode_eval_set(cfg, out)?;
    let stage = Stage::open(out, &format!("decode-{}-{}", cfg.decode.model, cfg.decode.mode_name()), "decode", cfg)?;
    write_outputs(&stage.path("outputs.jsonl"), &corpus.vocab, &outputs)?;
    stage.finish(summary, Some(timing))
}

#[derive(Serialize)]
struct SampleRow {
    index: usize,
    rouge_l: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    precision_undefined: bool,
    false_positive_rate: f64,
    false_negative_rate: f64,
    garbage_fraction: f64,
    teacher_ppl: Option<f64>,
    terminated: bool,
    tpf: f64,
}

pub fn eval_stage_name(cfg: &RunConfig) -> String {
    let tag = cfg
        .eval
        .tag
        .clone()
        .unwrap_or_else(|| format!("{}-{}", cfg.decode.model, cfg.decode.mode_name()));
    format!("eval-{tag}")
}

fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (corpus, outputs, dsum, timing) = decode_eval_set(cfg, out)?;
    let teacher = match &cfg.eval.teacher {
        Some(t) if out.join(t).join("model.bin").exists() => Some(load_model(out, t)?),
        _ => None,
    };
    let matcher = PhraseMatcher::new(&corpus.grammar, &corpus.vocab)?;
    let records = corpus.eval_slice(cfg.decode.limit);
    let report: EvalReport = evaluate(&outputs, records, &matcher, teacher.as_ref(), None)?;
    let stage = Stage::open(out, &eval_stage_name(cfg), "eval", cfg)?;
    write_outputs(&stage.path("outputs.jsonl"), &corpus.vocab, &outputs)?;
    let rows: Vec<SampleRow> = report
        .per_sample
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRow {
            index: i,
            rouge_l: s.rouge_l,
            precision: s.findings.precision,
            recall: s.findings.recall,
            f1: s.findings.f1,
            precision_undefined: s.findings.precision_undefined,
            false_positive_rate: s.findings.false_positive_rate,
            false_negative_rate: s.findings.false_negative_rate,
            garbage_fraction: s.findings.garbage_fraction,
            teacher_ppl: s.teacher_ppl,
            terminated: s.terminated,
            tpf: s.tpf,
        })
        .collect();
    write_csv(&stage.path("per_sample.csv"), &rows)?;
    let summary = json!({
        "model": dsum["model"],
        "mode": dsum["mode"],
        "teacher": teacher.as_ref().and(cfg.eval.teacher.clone()),
        "aggregate": report.aggregate,
    });
    stage.finish(summary, Some(timing))
}

#[derive(Deserialize)]
struct EvalSummary {
    aggregate: AggregateOnDisk,
}

/// The subset of the aggregate metrics that `compare` reads back.
#[derive(Deserialize)]
struct AggregateOnDisk {
    finding_f1: f64,
    false_positive_rate: f64,
    false_negative_rate: f64,
    rouge_l: f64,
    tpf: f64,
    termination_rate: f64,
    teacher_ppl: Option<f64>,
    garbage_fraction: f64,
}

#[derive(Serialize)]
struct CompareRow {
    run: String,
    role: &'static str,
    finding_f1: f64,
    false_positive_rate: f64,
    false_negative_rate: f64,
    rouge_l: f64,
    garbage_fraction: f64,
    teacher_ppl: Option<f64>,
    termination_rate: f64,
    tpf: f64,
    gap_recovered: Option<f64>,
}

fn compare(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let c = &cfg.compare;
    let load = |run: &str| -> Result<AggregateOnDisk> {
        let p = require(out.join(run).join("summary.json"), "eval")?;
        Ok(read_json::<EvalSummary>(&p)?.aggregate)
    };
    let base = load(&c.base)?;
    let native = load(&c.native)?;
    let gap = base.finding_f1 - native.finding_f1;
    let recovered = |f1: f64| if gap.abs() > 0.0 { Some((f1 - native.finding_f1) / gap) } else { None };
    let row = |run: &str, role: &'static str, a: &AggregateOnDisk, g: Option<f64>| CompareRow {
        run: run.to_string(),
        role,
        finding_f1: a.finding_f1,
        false_positive_rate: a.false_positive_rate,
        false_negative_rate: a.false_negative_rate,
        rouge_l: a.rouge_l,
        garbage_fraction: a.garbage_fraction,
        teacher_ppl: a.teacher_ppl,
        termination_rate: a.termination_rate,
        tpf: a.tpf,
        gap_recovered: g,
    };
    let mut rows = vec![row(&c.base, "base", &base, None), row(&c.native, "native", &native, Some(0.0))];
    for cand in &c.candidates {
        let a = load(cand)?;
        let g = recovered(a.finding_f1);
        rows.push(row(cand, "candidate", &a, g));
    }
    let stage = Stage::open(out, "compare", "compare", cfg)?;
    write_csv(&stage.path("compare.csv"), &rows)?;
    let cands: Vec<Value> = rows[2..]
        .iter()
        .map(|r| json!({ "run": r.run, "finding_f1": r.finding_f1, "gap_recovered": r.gap_recovered }))
        .collect();
    stage.finish(
        json!({
            "base_f1": base.finding_f1,
            "native_f1": native.finding_f1,
            "gap": gap,
            "candidates": cands,
        }),
        None,
    )
}

#[derive(Serialize)]
struct KvRow {
    prompt_len: usize,
    block_size: usize,
    max_blocks: usize,
    context: usize,
    blocks: usize,
    vanilla_passes: usize,
    fused_passes: usize,
    vanilla_flops: u64,
    fused_flops: u64,
    final_kv_update_flops: u64,
    tokens_equal: bool,
    ok: bool,
}

fn bench_kv(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let b = &cfg.bench_kv;
    let (params, special) = match &b.model {
        Some(stage) => {
            let corpus = load_corpus(out)?;
            (load_model(out, stage)?, corpus.decode_tokens())
        }
        None => {
            // Special ids follow the vocabulary layout: mask, eos, pad first.
            let mc = cfg.model.with_vocab(16);
            (init_params(&mc, stage_seed(cfg.seed, 4, 0))?, DecodeTokens { mask: 0, eos: 1 })
        }
    };
    let v = params.config.vocab_size;
    let mut rows = Vec::new();
    for &p in &b.prompt_lengths {
        for &bs in &b.block_sizes {
            for &n in &b.max_blocks {
                for c in 0..b.contexts_per_cell {
                    let ctx: Vec<usize> = (0..p)
                        .map(|i| 3 + (derive_seed(cfg.seed, (p * 1000 + c) as u64, i as u64) as usize) % (v - 3))
                        .collect();
                    let run = |cache| {
                        let dc = DecodeConfig {
                            mode: DecodeMode::Onestep,
                            block_size: bs,
                            max_blocks: n,
                            cache,
                            ..Default::default()
                        };
                        decode_blocks(&params, &ctx, &dc, special)
                    };
                    let van = run(CacheStrategy::Vanilla)?;
                    let fus = run(CacheStrategy::Fused)?;
                    let rep = ledger_compare(&van.ledger, &fus.ledger);
                    let tokens_equal = van.tokens == fus.tokens;
                    rows.push(KvRow {
                        prompt_len: p,
                        block_size: bs,
                        max_blocks: n,
                        context: c,
                        blocks: rep.blocks,
                        vanilla_passes: rep.vanilla_passes,
                        fused_passes: rep.fused_passes,
                        vanilla_flops: rep.vanilla_flops,
                        fused_flops: rep.fused_flops,
                        final_kv_update_flops: rep.final_kv_update_flops,
                        tokens_equal,
                        ok: rep.ok() && tokens_equal,
                    });
                }
            }
        }
    }
    let stage = Stage::open(out, "bench-kv", "bench-kv", cfg)?;
    write_csv(&stage.path("bench_kv.csv"), &rows)?;
    let all_ok = rows.iter().all(|r| r.ok);
    stage.finish(json!({ "cells": rows.len(), "all_ok": all_ok }), None)
}

#[derive(Serialize)]
struct RadRow {
    prompt_len: usize,
    response_len: usize,
    block_size: usize,
    rad_len: usize,
    full_dup_len: usize,
    savings_analytic: f64,
    savings_counted: f64,
    exact: bool,
    attention_sparse: f64,
    total_dense: f64,
    total_sparse: f64,
}

/// Counted dense-convention attention work of both layouts.
pub fn counted_attention(model: &FlopsModel, p: usize, r: usize, b: usize) -> Result<(u64, u64)> {
    let specials = Specials { mask: 0, pad: 1 };
    let ctx = vec![2; p];
    let resp = vec![2; r];
    let nb = r.div_ceil(b.max(1));
    let rad = build_rad_layout(&ctx, &resp, b, &vec![1.0; nb], 0, specials, usize::MAX)?;
    let dup = build_full_dup_layout(&ctx, &resp, b, specials)?;
    Ok((
        model.layout_attention_flops(&rad, AttentionKernel::Dense),
        model.layout_attention_flops(&dup, AttentionKernel::Dense),
    ))
}

fn bench_rad_flops(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let s = &cfg.bench_rad_flops;
    let model = FlopsModel::from(&cfg.model.with_vocab(4));
    let mut rows = Vec::new();
    for &p in &s.prompt_lengths {
        let d = rad_savings_detail(&model, p, s.response_len, s.block_size)?;
        let (rad, dup) = counted_attention(&model, p, s.response_len, s.block_size)?;
        // Exact test of rad/dup = (P + 2R′)² / (2(P + R′))² in integers.
        let rp = (s.response_len.div_ceil(s.block_size) * s.block_size) as u128;
        let (pp, rad, dup) = (p as u128, rad as u128, dup as u128);
        let exact = rad * (2 * (pp + rp)).pow(2) == dup * (pp + 2 * rp).pow(2);
        rows.push(RadRow {
            prompt_len: p,
            response_len: s.response_len,
            block_size: s.block_size,
            rad_len: d.rad_len,
            full_dup_len: d.full_dup_len,
            savings_analytic: rad_savings(p, s.response_len, s.block_size),
            savings_counted: d.attention_dense,
            exact,
            attention_sparse: d.attention_sparse,
            total_dense: d.total_dense,
            total_sparse: d.total_sparse,
        });
    }
    let stage = Stage::open(out, "bench-rad-flops", "bench-rad-flops", cfg)?;
    write_csv(&stage.path("rad_flops.csv"), &rows)?;
    let monotone = rows.windows(2).all(|w| w[1].savings_analytic > w[0].savings_analytic);
    stage.finish(
        json!({
            "points": rows.len(),
            "all_exact": rows.iter().all(|r| r.exact),
            "strictly_increasing": monotone,
        }),
        None,
    )
}

#[derive(Serialize)]
struct BiasRow {
    distribution: &'static str,
    m: usize,
    epsilon_bar: f64,
}

fn analyze_bias(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let mut rows = Vec::new();
    let mut monotone = Vec::new();
    for (name, q) in builtin_family() {
        let curve = bias_curve(&q)?;
        monotone.push(json!({
            "distribution": name,
            "nondecreasing": curve.windows(2).all(|w| w[1] - w[0] >= -1e-9),
            "full_mask": curve.last(),
        }));
        rows.extend(curve.into_iter().enumerate().map(|(m, e)| BiasRow {
            distribution: name,
            m,
            epsilon_bar: e,
        }));
    }
    let stage = Stage::open(out, "analyze-bias", "analyze-bias", cfg)?;
    write_csv(&stage.path("bias_curve.csv"), &rows)?;
    stage.finish(json!({ "distributions": monotone }), None)
}

#[derive(Serialize)]
struct EosRow {
    class: &'static str,
    block_size: usize,
    count: usize,
    mean: Option<f64>,
    variance: Option<f64>,
}

fn analyze_eos(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let e = &cfg.analyze_eos;
    let corpus = load_corpus(out)?;
    let params = load_model(out, &e.model)?;
    let tau = e.threshold.unwrap_or(cfg.decode.threshold);
    let recs = corpus.eval_slice(e.limit);
    let stats = eos_confidence_stats(&params, &contexts(recs), &e.block_sizes, tau, cfg.decode.max_blocks, corpus.decode_tokens())?;
    let mut rows = Vec::new();
    for s in &stats {
        for (class, c) in [("eos", s.eos), ("content", s.content)] {
            rows.push(EosRow {
                class,
                block_size: s.block_size,
                count: c.map_or(0, |c| c.count),
                mean: c.map(|c| c.mean),
                variance: c.map(|c| c.variance),
            });
        }
    }
    let stage = Stage::open(out, &format!("analyze-eos-{}", e.model), "analyze-eos", cfg)?;
    write_csv(&stage.path("eos_confidence.csv"), &rows)?;
    stage.finish(json!({ "model": e.model, "threshold": tau, "samples": recs.len(), "stats": stats }), None)
}

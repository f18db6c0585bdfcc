//! Report-quality metrics: ROUGE-L, finding identification against grammar
//! labels, and perplexity under the autoregressive teacher.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpus::{Label, PhraseMatcher, ReportRecord};
use crate::decoding::DecodeOutput;
use crate::denoiser::{forward, ModelParams};
use crate::error::{Error, Result};
use crate::layout::build_ar_layout;
use crate::tensor::{log_softmax_row, AttentionKernel};

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β = 1.
pub fn rouge_l(hypothesis: &[usize], reference: &[usize]) -> f64 {
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FindingCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Gold-normal regions for which a finding was asserted.
    pub normal_regions_flagged: usize,
    pub normal_regions: usize,
    pub garbage_tokens: usize,
    pub total_tokens: usize,
}

impl FindingCounts {
    pub fn add(&mut self, o: &FindingCounts) {
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
        self.normal_regions_flagged += o.normal_regions_flagged;
        self.normal_regions += o.normal_regions;
        self.garbage_tokens += o.garbage_tokens;
        self.total_tokens += o.total_tokens;
    }

    pub fn scores(&self) -> FindingScores {
        let (tp, fp, fneg) = (self.true_positives, self.false_positives, self.false_negatives);
        let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let predicted = tp + fp;
        let gold = tp + fneg;
        let (precision, recall, precision_undefined) = match (predicted, gold) {
            (0, 0) => (1.0, 1.0, false),
            (0, _) => (0.0, 0.0, true),
            (_, 0) => (0.0, 1.0, false),
            _ => (tp as f64 / predicted as f64, tp as f64 / gold as f64, false),
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        FindingScores {
            precision,
            recall,
            f1,
            precision_undefined,
            false_positive_rate: ratio(self.normal_regions_flagged, self.normal_regions).unwrap_or(0.0),
            false_negative_rate: ratio(fneg, gold).unwrap_or(0.0),
            garbage_fraction: ratio(self.garbage_tokens, self.total_tokens).unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FindingScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when nothing was predicted but gold had findings; precision is then reported as 0.
    pub precision_undefined: bool,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub garbage_fraction: f64,
}

/// Counts for one response against per-region gold labels.
pub fn finding_counts(response: &[usize], gold: &[Label], matcher: &PhraseMatcher) -> FindingCounts {
    let parsed = matcher.parse(response);
    let predicted = parsed.findings();
    let gold_set: BTreeSet<(usize, usize)> = gold
        .iter()
        .enumerate()
        .filter_map(|(r, l)| match l {
            Label::Finding(f) => Some((r, *f)),
            Label::Normal => None,
        })
        .collect();
    let tp = predicted.intersection(&gold_set).count();
    let normal: Vec<usize> = (0..gold.len()).filter(|&r| gold[r] == Label::Normal).collect();
    let flagged = normal.iter().filter(|&&r| predicted.iter().any(|&(pr, _)| pr == r)).count();
    FindingCounts {
        true_positives: tp,
        false_positives: predicted.len() - tp,
        false_negatives: gold_set.len() - tp,
        normal_regions_flagged: flagged,
        normal_regions: normal.len(),
        garbage_tokens: parsed.garbage_tokens,
        total_tokens: parsed.total_tokens,
    }
}

pub fn finding_f1(response: &[usize], gold: &[Label], matcher: &PhraseMatcher) -> FindingScores {
    finding_counts(response, gold, matcher).scores()
}

/// Summed next-token NLL of `response` given `context` and the number of
/// scored tokens.
pub fn response_nll(teacher: &ModelParams, context: &[usize], response: &[usize]) -> Result<(f64, usize)> {
    let layout = build_ar_layout(context, response, teacher.config.max_positions)?;
    let rows = layout.loss_rows();
    let out = forward(
        teacher,
        &layout.token_ids,
        &layout.position_ids,
        &layout.mask(),
        None,
        &[],
        AttentionKernel::Sparse,
    )?;
    let mut lp = vec![0.0; out.logits.cols()];
    let mut nll = 0.0;
    for &(row, target) in &rows {
        log_softmax_row(out.logits.row(row), &mut lp);
        nll -= lp[target];
    }
    Ok((nll, rows.len()))
}

/// `exp` of the mean per-token NLL over all `(context, response)` pairs.
pub fn teacher_ppl(teacher: &ModelParams, pairs: &[(&[usize], &[usize])]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (c, r) in pairs {
        let (nll, n) = response_nll(teacher, c, r)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMean("teacher_ppl"));
    }
    Ok((total / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEval {
    pub rouge_l: f64,
    pub findings: FindingScores,
    pub counts: FindingCounts,
    pub teacher_ppl: Option<f64>,
    pub terminated: bool,
    pub tpf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateEval {
    pub samples: usize,
    pub rouge_l: f64,
    /// Micro-averaged over all samples' counts.
    pub finding_precision: f64,
    pub finding_recall: f64,
    pub finding_f1: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub garbage_fraction: f64,
    pub teacher_ppl: Option<f64>,
    pub termination_rate: f64,
    pub tpf: f64,
    pub tps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleEval>,
    pub aggregate: AggregateEval,
}

/// Scores decoder outputs against their gold records. Perplexity is computed
/// when a teacher is given; `tps` is copied from a throughput measurement.
pub fn evaluate(
    outputs: &[DecodeOutput],
    gold: &[ReportRecord],
    matcher: &PhraseMatcher,
    teacher: Option<&ModelParams>,
    tps: Option<f64>,
) -> Result<EvalReport> {
    if outputs.len() != gold.len() {
        return Err(Error::dim("evaluate", format!("{} outputs for {} records", outputs.len(), gold.len())));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyMean("evaluate"));
    }
    let mut per_sample = Vec::with_capacity(outputs.len());
    let mut counts = FindingCounts::default();
    let (mut nll, mut scored) = (0.0, 0usize);
    for (out, rec) in outputs.iter().zip(gold) {
        let c = finding_counts(&out.tokens, &rec.labels, matcher);
        counts.add(&c);
        let ppl = match teacher {
            Some(t) if !out.tokens.is_empty() => {
                let (s, n) = response_nll(t, &rec.context_tokens, &out.tokens)?;
                nll += s;
                scored += n;
                Some((s / n as f64).exp())
            }
            _ => None,
        };
        per_sample.push(SampleEval {
            rouge_l: rouge_l(&out.tokens, &rec.response_tokens),
            findings: c.scores(),
            counts: c,
            teacher_ppl: ppl,
            terminated: out.terminated,
            tpf: out.tpf(),
        });
    }
    let n = per_sample.len() as f64;
    let scores = counts.scores();
    let passes: usize = outputs.iter().map(|o| o.ledger.forward_passes()).sum();
    let decoded: usize = outputs.iter().map(|o| o.decoded_tokens).sum();
    let aggregate = AggregateEval {
        samples: per_sample.len(),
        rouge_l: per_sample.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        finding_precision: scores.precision,
        finding_recall: scores.recall,
        finding_f1: scores.f1,
        false_positive_rate: scores.false_positive_rate,
        false_negative_rate: scores.false_negative_rate,
        garbage_fraction: scores.garbage_fraction,
        teacher_ppl: (teacher.is_some() && scored > 0).then(|| (nll / scored as f64).exp()),
        termination_rate: per_sample.iter().filter(|s| s.terminated).count() as f64 / n,
        tpf: if passes == 0 { 0.0 } else { decoded as f64 / passes as f64 },
        tps,
    };
    Ok(EvalReport { per_sample, aggregate })
}

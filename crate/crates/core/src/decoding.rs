//! Greedy decoders: autoregressive, threshold-commit block diffusion and
//! one-step-per-block, with three key/value cache strategies and an exact
//! multiply-add ledger.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, KvCache, ModelParams};
use crate::error::{Error, Result};
use crate::layout::FlopsModel;
use crate::tensor::{argmax, softmax_rows, AttentionKernel, AttentionMask, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStrategy {
    /// Recompute the whole visible prefix on every pass.
    None,
    /// A separate pass writes each committed block's keys and values.
    Vanilla,
    /// The write for a committed block rides along with the next block's
    /// first denoising pass.
    #[default]
    Fused,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Ar,
    #[default]
    Multistep,
    Onestep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub block_size: usize,
    pub max_blocks: usize,
    pub threshold: f64,
    pub cache: CacheStrategy,
    pub kernel: AttentionKernel,
    /// Unused by the greedy decoders; carried for provenance.
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Multistep,
            block_size: 4,
            max_blocks: 16,
            threshold: 0.9,
            cache: CacheStrategy::Fused,
            kernel: AttentionKernel::Sparse,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != DecodeMode::Ar && self.block_size == 0 {
            return Err(Error::Config("decode.block_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("decode.threshold {} not in [0,1]", self.threshold)));
        }
        Ok(())
    }

    /// Token budget `N·B`.
    pub fn budget(&self) -> usize {
        self.max_blocks * self.block_size.max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    /// Context-only cache fill; not counted as a decoding pass.
    Prefill,
    Ar,
    Denoise,
    KvUpdate,
    /// Key/value write of the previous block plus denoising of the current one.
    Fused,
    /// Whole-prefix recomputation (cache strategy `none`).
    Recompute,
}

/// `q` query rows that each attend `ell` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub q: u64,
    pub ell: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub kind: PassKind,
    pub segments: Vec<Segment>,
    /// Multiply-adds counted inside the kernels (body only).
    pub counted: u64,
}

impl PassRecord {
    pub fn flops(&self) -> u64 {
        self.segments.iter().map(|s| s.flops).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub passes: Vec<PassRecord>,
}

impl FlopsLedger {
    /// Decoding passes, excluding context prefill.
    pub fn forward_passes(&self) -> usize {
        self.passes.iter().filter(|p| p.kind != PassKind::Prefill).count()
    }

    /// Analytic multiply-adds over decoding passes.
    pub fn multiply_adds(&self) -> u64 {
        self.decoding_passes().map(PassRecord::flops).sum()
    }

    pub fn counted_multiply_adds(&self) -> u64 {
        self.decoding_passes().map(|p| p.counted).sum()
    }

    pub fn decoding_passes(&self) -> impl Iterator<Item = &PassRecord> {
        self.passes.iter().filter(|p| p.kind != PassKind::Prefill)
    }

    /// Whether every pass's kernel count equals its analytic count.
    pub fn is_exact(&self) -> bool {
        self.passes.iter().all(|p| p.counted == p.flops())
    }

    /// Rows `(pass_index, kind, segment, q, ell, flops)` over decoding passes.
    pub fn rows(&self) -> Vec<(usize, PassKind, usize, u64, u64, u64)> {
        self.decoding_passes()
            .enumerate()
            .flat_map(|(i, p)| {
                p.segments
                    .iter()
                    .enumerate()
                    .map(move |(s, seg)| (i, p.kind, s, seg.q, seg.ell, seg.flops))
            })
            .collect()
    }
}

/// Groups consecutive rows of `mask` with equal attended-column count.
fn segments(model: &FlopsModel, mask: &AttentionMask, kernel: AttentionKernel) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for i in 0..mask.n_rows() {
        let ell = match kernel {
            AttentionKernel::Sparse => mask.row_len(i),
            AttentionKernel::Dense => mask.n_cols(),
        } as u64;
        match out.last_mut() {
            Some(s) if s.ell == ell => s.q += 1,
            _ => out.push(Segment { q: 1, ell, flops: 0 }),
        }
    }
    for s in &mut out {
        s.flops = model.pass(s.q, s.ell);
    }
    out
}

/// Key/value state of one decoding session.
#[derive(Clone, Debug)]
pub struct BlockKVCache {
    pub kv: KvCache,
    pub strategy: CacheStrategy,
    /// Committed block whose keys and values are not yet written (fused only).
    pub pending_block: Option<Vec<usize>>,
}

impl BlockKVCache {
    pub fn cached_length(&self) -> usize {
        self.kv.len()
    }
}

/// A model that proposes distributions for the current block and is told
/// which tokens were committed.
pub trait BlockDenoiser {
    /// Probability rows, one per block position, for the current block.
    fn denoise(&mut self, block: &[usize]) -> Result<Tensor>;
    /// Called once per finished block, in order.
    fn commit(&mut self, block: &[usize]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub position: usize,
    pub token: usize,
    pub confidence: f64,
    /// 1-based step within the block.
    pub step: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub tokens: Vec<usize>,
    pub steps: usize,
    pub commits: Vec<Commit>,
}

/// Fills one block by repeated threshold commitment: every masked position
/// whose confidence reaches `tau` is committed; if none does, the single most
/// confident position (lowest index on ties) is.
pub fn denoise_block(model: &mut impl BlockDenoiser, b: usize, tau: f64, mask_id: usize) -> Result<BlockTrace> {
    let mut block = vec![mask_id; b];
    let mut open: Vec<usize> = (0..b).collect();
    let mut commits = Vec::with_capacity(b);
    let mut step = 0;
    while !open.is_empty() {
        step += 1;
        let probs = model.denoise(&block)?;
        if probs.rows() != b {
            return Err(Error::dim("denoise_block", format!("{} rows for block of {b}", probs.rows())));
        }
        let proposals: Vec<(usize, usize, f64)> = open
            .iter()
            .map(|&i| {
                let row = probs.row(i);
                let t = argmax(row);
                (i, t, row[t])
            })
            .collect();
        let mut chosen: Vec<usize> = (0..proposals.len()).filter(|&k| proposals[k].2 >= tau).collect();
        if chosen.is_empty() {
            let best = (0..proposals.len()).fold(0, |best, k| if proposals[k].2 > proposals[best].2 { k } else { best });
            chosen.push(best);
        }
        for &k in &chosen {
            let (i, t, c) = proposals[k];
            block[i] = t;
            commits.push(Commit {
                position: i,
                token: t,
                confidence: c,
                step,
                probs: probs.row(i).to_vec(),
            });
        }
        open.retain(|i| !chosen.iter().any(|&k| proposals[k].0 == *i));
    }
    Ok(BlockTrace {
        tokens: block,
        steps: step,
        commits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlocksTrace {
    pub blocks: Vec<BlockTrace>,
    pub terminated: bool,
}

/// Decodes up to `max_blocks` blocks, stopping after the first block that
/// contains `eos`. Every block is committed, including the last.
pub fn denoise_blocks(
    model: &mut impl BlockDenoiser,
    max_blocks: usize,
    b: usize,
    tau: f64,
    mask_id: usize,
    eos_id: usize,
) -> Result<BlocksTrace> {
    let mut blocks = Vec::new();
    let mut terminated = false;
    for _ in 0..max_blocks {
        let trace = denoise_block(model, b, tau, mask_id)?;
        model.commit(&trace.tokens)?;
        terminated = trace.tokens.contains(&eos_id);
        blocks.push(trace);
        if terminated {
            break;
        }
    }
    Ok(BlocksTrace { blocks, terminated })
}

/// The network driven through a block cache.
pub struct NeuralSession<'p> {
    params: &'p ModelParams,
    flops: FlopsModel,
    kernel: AttentionKernel,
    b: usize,
    context: Vec<usize>,
    committed: Vec<Vec<usize>>,
    cache: BlockKVCache,
    pub ledger: FlopsLedger,
    /// Logits of the current-block rows of every denoising pass.
    pub step_logits: Vec<Tensor>,
}

impl<'p> NeuralSession<'p> {
    pub fn new(
        params: &'p ModelParams,
        context: &[usize],
        b: usize,
        strategy: CacheStrategy,
        kernel: AttentionKernel,
    ) -> Result<Self> {
        let mut s = NeuralSession {
            params,
            flops: FlopsModel::from(&params.config),
            kernel,
            b,
            context: context.to_vec(),
            committed: Vec::new(),
            cache: BlockKVCache {
                kv: KvCache::new(&params.config),
                strategy,
                pending_block: None,
            },
            ledger: FlopsLedger::default(),
            step_logits: Vec::new(),
        };
        if strategy != CacheStrategy::None && !context.is_empty() {
            let p = context.len();
            let mask = AttentionMask::from_rows(p, (0..p).map(|i| 0..=i));
            let positions: Vec<usize> = (0..p).collect();
            let write: Vec<usize> = (0..p).collect();
            s.pass(PassKind::Prefill, context.to_vec(), positions, mask, true, &write)?;
        }
        Ok(s)
    }

    pub fn cache(&self) -> &BlockKVCache {
        &self.cache
    }

    fn block_start(&self, n: usize) -> usize {
        self.context.len() + n * self.b
    }

    fn pass(
        &mut self,
        kind: PassKind,
        tokens: Vec<usize>,
        positions: Vec<usize>,
        mask: AttentionMask,
        use_cache: bool,
        write: &[usize],
    ) -> Result<Tensor> {
        let cache = if use_cache { Some(&self.cache.kv) } else { None };
        let out = forward(self.params, &tokens, &positions, &mask, cache, write, self.kernel)?;
        if !write.is_empty() {
            self.cache.kv.append(&out.new_cache_entries)?;
        }
        self.ledger.passes.push(PassRecord {
            kind,
            segments: segments(&self.flops, &mask, self.kernel),
            counted: out.macs.body,
        });
        Ok(out.logits)
    }

    fn logits_rows(logits: &Tensor, from: usize, n: usize) -> Tensor {
        let v = logits.cols();
        Tensor::new(vec![n, v], logits.data()[from * v..(from + n) * v].to_vec()).expect("row slice")
    }
}

impl BlockDenoiser for NeuralSession<'_> {
    fn denoise(&mut self, block: &[usize]) -> Result<Tensor> {
        let b = self.b;
        if block.len() != b {
            return Err(Error::dim("denoise", format!("block of {} tokens, expected {b}", block.len())));
        }
        let n = self.committed.len();
        let start = self.block_start(n);
        let logits = match self.cache.strategy {
            CacheStrategy::Vanilla => {
                let c = self.cache.cached_length();
                let mask = AttentionMask::from_rows(c + b, (0..b).map(|_| 0..(c + b)));
                self.pass(PassKind::Denoise, block.to_vec(), (start..start + b).collect(), mask, true, &[])?
            }
            CacheStrategy::Fused => match self.cache.pending_block.take() {
                Some(pending) => {
                    let c = self.cache.cached_length();
                    let mut tokens = pending;
                    tokens.extend_from_slice(block);
                    let positions: Vec<usize> = (start - b..start + b).collect();
                    let mask = AttentionMask::from_rows(
                        c + 2 * b,
                        (0..2 * b).map(|i| if i < b { 0..(c + b) } else { 0..(c + 2 * b) }),
                    );
                    let write: Vec<usize> = (0..b).collect();
                    let logits = self.pass(PassKind::Fused, tokens, positions, mask, true, &write)?;
                    Self::logits_rows(&logits, b, b)
                }
                None => {
                    let c = self.cache.cached_length();
                    let mask = AttentionMask::from_rows(c + b, (0..b).map(|_| 0..(c + b)));
                    self.pass(PassKind::Denoise, block.to_vec(), (start..start + b).collect(), mask, true, &[])?
                }
            },
            CacheStrategy::None => {
                let p = self.context.len();
                let mut tokens = self.context.clone();
                for blk in &self.committed {
                    tokens.extend_from_slice(blk);
                }
                tokens.extend_from_slice(block);
                let total = tokens.len();
                let mask = AttentionMask::from_rows(
                    total,
                    (0..total).map(|i| {
                        if i < p {
                            0..(i + 1)
                        } else {
                            let k = (i - p) / b;
                            0..(p + (k + 1) * b)
                        }
                    }),
                );
                let logits = self.pass(PassKind::Recompute, tokens, (0..total).collect(), mask, false, &[])?;
                Self::logits_rows(&logits, total - b, b)
            }
        };
        let probs = softmax_rows(&logits);
        self.step_logits.push(logits);
        Ok(probs)
    }

    fn commit(&mut self, block: &[usize]) -> Result<()> {
        let b = self.b;
        let start = self.block_start(self.committed.len());
        match self.cache.strategy {
            CacheStrategy::Vanilla => {
                let c = self.cache.cached_length();
                let mask = AttentionMask::from_rows(c + b, (0..b).map(|_| 0..(c + b)));
                let write: Vec<usize> = (0..b).collect();
                self.pass(PassKind::KvUpdate, block.to_vec(), (start..start + b).collect(), mask, true, &write)?;
            }
            CacheStrategy::Fused => {
                if self.cache.pending_block.is_some() {
                    return Err(Error::Layout("fused cache already holds a pending block".into()));
                }
                self.cache.pending_block = Some(block.to_vec());
            }
            CacheStrategy::None => {}
        }
        self.committed.push(block.to_vec());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Output tokens, truncated after the first eos (which is kept).
    pub tokens: Vec<usize>,
    /// Every position produced, including truncated ones.
    pub decoded_tokens: usize,
    pub blocks: usize,
    pub terminated: bool,
    pub ledger: FlopsLedger,
    pub trace: Vec<BlockTrace>,
    #[serde(skip)]
    pub step_logits: Vec<Tensor>,
}

impl DecodeOutput {
    pub fn tpf(&self) -> f64 {
        let passes = self.ledger.forward_passes();
        if passes == 0 {
            0.0
        } else {
            self.decoded_tokens as f64 / passes as f64
        }
    }
}

fn truncate_at_eos(tokens: &mut Vec<usize>, eos: usize) -> bool {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => {
            tokens.truncate(i + 1);
            true
        }
        None => false,
    }
}

/// Special token ids the decoders need.
#[derive(Clone, Copy, Debug)]
pub struct DecodeTokens {
    pub mask: usize,
    pub eos: usize,
}

/// Block decoding; `onestep` ignores the threshold and commits every position
/// after a single pass.
pub fn decode_blocks(params: &ModelParams, context: &[usize], cfg: &DecodeConfig, special: DecodeTokens) -> Result<DecodeOutput> {
    cfg.validate()?;
    let tau = match cfg.mode {
        DecodeMode::Onestep => 0.0,
        DecodeMode::Multistep => cfg.threshold,
        DecodeMode::Ar => return decode_ar(params, context, cfg, special),
    };
    let b = cfg.block_size;
    let mut session = NeuralSession::new(params, context, b, cfg.cache, cfg.kernel)?;
    let run = denoise_blocks(&mut session, cfg.max_blocks, b, tau, special.mask, special.eos)?;
    let mut tokens: Vec<usize> = run.blocks.iter().flat_map(|t| t.tokens.iter().copied()).collect();
    let decoded = tokens.len();
    truncate_at_eos(&mut tokens, special.eos);
    Ok(DecodeOutput {
        tokens,
        decoded_tokens: decoded,
        blocks: run.blocks.len(),
        terminated: run.terminated,
        ledger: session.ledger,
        trace: run.blocks,
        step_logits: session.step_logits,
    })
}

pub fn decode_multistep(params: &ModelParams, context: &[usize], cfg: &DecodeConfig, special: DecodeTokens) -> Result<DecodeOutput> {
    decode_blocks(params, context, &DecodeConfig { mode: DecodeMode::Multistep, ..*cfg }, special)
}

pub fn decode_onestep(params: &ModelParams, context: &[usize], cfg: &DecodeConfig, special: DecodeTokens) -> Result<DecodeOutput> {
    decode_blocks(params, context, &DecodeConfig { mode: DecodeMode::Onestep, ..*cfg }, special)
}

/// Greedy next-token decoding with a causal cache (or full recomputation
/// under strategy `none`). The budget is `max_blocks · block_size` tokens.
pub fn decode_ar(params: &ModelParams, context: &[usize], cfg: &DecodeConfig, special: DecodeTokens) -> Result<DecodeOutput> {
    let budget = cfg.budget();
    let flops = FlopsModel::from(&params.config);
    let mut ledger = FlopsLedger::default();
    let mut step_logits = Vec::new();
    let mut tokens: Vec<usize> = Vec::new();
    if budget > 0 && context.is_empty() {
        return Err(Error::Config("autoregressive decoding needs a nonempty context".into()));
    }
    let mut cache = KvCache::new(&params.config);
    let p = context.len();
    while tokens.len() < budget {
        let (pass_tokens, positions, mask, use_cache) = if cfg.cache == CacheStrategy::None || tokens.is_empty() {
            let mut all = context.to_vec();
            all.extend_from_slice(&tokens);
            let n = all.len();
            let mask = AttentionMask::from_rows(n, (0..n).map(|i| 0..=i));
            (all, (0..n).collect::<Vec<_>>(), mask, false)
        } else {
            let c = cache.len();
            let last = *tokens.last().expect("nonempty");
            (vec![last], vec![c], AttentionMask::from_rows(c + 1, std::iter::once(0..=c)), true)
        };
        let write: Vec<usize> = if cfg.cache == CacheStrategy::None {
            Vec::new()
        } else {
            (0..pass_tokens.len()).collect()
        };
        let out = forward(
            params,
            &pass_tokens,
            &positions,
            &mask,
            if use_cache { Some(&cache) } else { None },
            &write,
            cfg.kernel,
        )?;
        if !write.is_empty() {
            cache.append(&out.new_cache_entries)?;
        }
        ledger.passes.push(PassRecord {
            kind: PassKind::Ar,
            segments: segments(&flops, &mask, cfg.kernel),
            counted: out.macs.body,
        });
        let last = out.logits.rows() - 1;
        let row = out.logits.row(last).to_vec();
        let t = argmax(&row);
        step_logits.push(Tensor::new(vec![1, row.len()], row)?);
        tokens.push(t);
        if t == special.eos {
            break;
        }
    }
    debug_assert!(p + tokens.len() <= p + budget);
    let terminated = tokens.last() == Some(&special.eos);
    Ok(DecodeOutput {
        decoded_tokens: tokens.len(),
        blocks: 0,
        terminated,
        tokens,
        ledger,
        trace: Vec::new(),
        step_logits,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Discrepancy {
    pub check: &'static str,
    pub pass_index: usize,
    pub expected: u64,
    pub actual: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerReport {
    pub blocks: usize,
    pub vanilla_passes: usize,
    pub fused_passes: usize,
    pub vanilla_flops: u64,
    pub fused_flops: u64,
    pub final_kv_update_flops: u64,
    pub discrepancies: Vec<Discrepancy>,
}

impl LedgerReport {
    pub fn ok(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Checks the one-step vanilla/fused bookkeeping identities: fused pass `n`
/// costs the vanilla key/value write of block `n − 1` plus the vanilla
/// denoising of block `n`; fused total is vanilla total minus the final
/// write; the pass counts are `2N` and `N`.
pub fn ledger_compare(vanilla: &FlopsLedger, fused: &FlopsLedger) -> LedgerReport {
    let v: Vec<&PassRecord> = vanilla.decoding_passes().collect();
    let f: Vec<&PassRecord> = fused.decoding_passes().collect();
    let n = f.len();
    let mut disc = Vec::new();
    if v.len() != 2 * n {
        disc.push(Discrepancy {
            check: "pass_count",
            pass_index: 0,
            expected: 2 * n as u64,
            actual: v.len() as u64,
        });
    }
    let vf = |i: usize| v.get(i).map_or(0, |p| p.flops());
    for (i, pass) in f.iter().enumerate() {
        let expected = if i == 0 { vf(0) } else { vf(2 * i - 1) + vf(2 * i) };
        if pass.flops() != expected {
            disc.push(Discrepancy {
                check: "fused_pass",
                pass_index: i,
                expected,
                actual: pass.flops(),
            });
        }
    }
    for (i, pass) in vanilla.passes.iter().chain(fused.passes.iter()).enumerate() {
        if pass.counted != pass.flops() {
            disc.push(Discrepancy {
                check: "counted_vs_analytic",
                pass_index: i,
                expected: pass.flops(),
                actual: pass.counted,
            });
        }
    }
    let final_update = if v.len() >= 2 { vf(v.len() - 1) } else { 0 };
    let (vt, ft) = (vanilla.multiply_adds(), fused.multiply_adds());
    if ft + final_update != vt {
        disc.push(Discrepancy {
            check: "total",
            pass_index: n.saturating_sub(1),
            expected: vt - final_update.min(vt),
            actual: ft,
        });
    }
    LedgerReport {
        blocks: n,
        vanilla_passes: v.len(),
        fused_passes: n,
        vanilla_flops: vt,
        fused_flops: ft,
        final_kv_update_flops: final_update,
        discrepancies: disc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Throughput {
    pub samples: usize,
    pub tpf: f64,
    pub tps: f64,
    pub termination_rate: f64,
    pub decoded_tokens: usize,
    pub output_tokens: usize,
    pub forward_passes: usize,
    pub wall_time_s: f64,
}

/// Decodes every context and aggregates tokens per pass, tokens per second
/// and the fraction of samples that emitted eos within the budget.
pub fn measure_throughput(
    params: &ModelParams,
    contexts: &[Vec<usize>],
    cfg: &DecodeConfig,
    special: DecodeTokens,
) -> Result<(Throughput, Vec<DecodeOutput>)> {
    if contexts.is_empty() {
        return Err(Error::EmptyMean("measure_throughput"));
    }
    let start = Instant::now();
    let outputs = contexts
        .iter()
        .map(|c| decode_blocks(params, c, cfg, special))
        .collect::<Result<Vec<_>>>()?;
    let wall = start.elapsed().as_secs_f64();
    let decoded: usize = outputs.iter().map(|o| o.decoded_tokens).sum();
    let out_tokens: usize = outputs.iter().map(|o| o.tokens.len()).sum();
    let passes: usize = outputs.iter().map(|o| o.ledger.forward_passes()).sum();
    let terminated = outputs.iter().filter(|o| o.terminated).count();
    Ok((
        Throughput {
            samples: outputs.len(),
            tpf: if passes == 0 { 0.0 } else { decoded as f64 / passes as f64 },
            tps: if wall > 0.0 { out_tokens as f64 / wall } else { 0.0 },
            termination_rate: terminated as f64 / outputs.len() as f64,
            decoded_tokens: decoded,
            output_tokens: out_tokens,
            forward_passes: passes,
            wall_time_s: wall,
        },
        outputs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, ModelConfig};

    const SPECIAL: DecodeTokens = DecodeTokens { mask: 0, eos: 1 };

    fn model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_mult: 2,
            max_positions: 64,
        };
        init_params(&cfg, seed).unwrap()
    }

    fn cfg(mode: DecodeMode, b: usize, n: usize, cache: CacheStrategy) -> DecodeConfig {
        DecodeConfig {
            mode,
            block_size: b,
            max_blocks: n,
            threshold: 0.9,
            cache,
            ..Default::default()
        }
    }

    #[test]
    fn onestep_pass_counts_and_tpf() {
        let p = model(1);
        let ctx = [3, 4, 5];
        for n in [1, 4] {
            let v = decode_onestep(&p, &ctx, &cfg(DecodeMode::Onestep, 4, n, CacheStrategy::Vanilla), SPECIAL).unwrap();
            let f = decode_onestep(&p, &ctx, &cfg(DecodeMode::Onestep, 4, n, CacheStrategy::Fused), SPECIAL).unwrap();
            assert_eq!(v.tokens, f.tokens);
            let nb = f.blocks;
            assert_eq!(v.ledger.forward_passes(), 2 * nb);
            assert_eq!(f.ledger.forward_passes(), nb);
            let report = ledger_compare(&v.ledger, &f.ledger);
            assert!(report.ok(), "{report:?}");
            assert!(f.ledger.is_exact() && v.ledger.is_exact());
            assert_eq!(f.tpf(), 4.0);
        }
    }

    #[test]
    fn zero_budget_ar() {
        let p = model(1);
        let out = decode_ar(&p, &[3], &cfg(DecodeMode::Ar, 4, 0, CacheStrategy::Vanilla), SPECIAL).unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.ledger.forward_passes(), 0);
    }

    #[test]
    fn ar_strategies_agree() {
        let p = model(2);
        let a = decode_ar(&p, &[3, 4], &cfg(DecodeMode::Ar, 4, 3, CacheStrategy::Vanilla), SPECIAL).unwrap();
        let b = decode_ar(&p, &[3, 4], &cfg(DecodeMode::Ar, 4, 3, CacheStrategy::None), SPECIAL).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.ledger.forward_passes(), a.tokens.len());
        assert_eq!(a.tpf(), 1.0);
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            for (u, w) in x.data().iter().zip(y.data()) {
                assert!((u - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multistep_strategies_agree() {
        let p = model(3);
        let ctx = [5, 6, 7, 8];
        let runs: Vec<DecodeOutput> = [CacheStrategy::None, CacheStrategy::Vanilla, CacheStrategy::Fused]
            .iter()
            .map(|&s| decode_multistep(&p, &ctx, &cfg(DecodeMode::Multistep, 3, 3, s), SPECIAL).unwrap())
            .collect();
        for r in &runs[1..] {
            assert_eq!(r.tokens, runs[0].tokens);
            assert_eq!(r.step_logits.len(), runs[0].step_logits.len());
            for (x, y) in r.step_logits.iter().zip(&runs[0].step_logits) {
                for (u, w) in x.data().iter().zip(y.data()) {
                    assert!((u - w).abs() < 1e-9);
                }
            }
            assert!(r.ledger.is_exact());
        }
    }

    #[test]
    fn tau_zero_is_one_step_per_block() {
        let p = model(4);
        let mut c = cfg(DecodeMode::Multistep, 4, 3, CacheStrategy::Vanilla);
        c.threshold = 0.0;
        let out = decode_multistep(&p, &[2, 3], &c, SPECIAL).unwrap();
        assert!(out.trace.iter().all(|t| t.steps == 1));
        assert_eq!(out.ledger.forward_passes(), 2 * out.blocks);
    }

    #[test]
    fn perturbed_ledger_is_reported() {
        let p = model(5);
        let ctx = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
        let v = decode_onestep(&p, &ctx, &cfg(DecodeMode::Onestep, 4, 3, CacheStrategy::Vanilla), SPECIAL).unwrap();
        let mut f = decode_onestep(&p, &ctx, &cfg(DecodeMode::Onestep, 4, 3, CacheStrategy::Fused), SPECIAL).unwrap();
        assert!(ledger_compare(&v.ledger, &f.ledger).ok());
        let fm = FlopsModel::from(&p.config);
        let fused = f.ledger.passes.iter().rposition(|p| p.kind == PassKind::Fused).unwrap();
        let seg = &mut f.ledger.passes[fused].segments[1];
        seg.ell += 1;
        seg.flops = fm.pass(seg.q, seg.ell);
        let report = ledger_compare(&v.ledger, &f.ledger);
        assert!(!report.ok());
        assert!(report.discrepancies.iter().any(|d| d.check == "fused_pass"));
    }
}

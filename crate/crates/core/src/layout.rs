//! Token, position and attention layouts for every training objective, and
//! the closed-form cost model used to account for forward passes.
//!
//! Block-diffusion layouts place the context first, then the clean copy of
//! every response block, then the noisy copy of every block. Noisy positions
//! reuse the position ids of their clean counterparts.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{AttentionKernel, AttentionMask, BoolMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Context,
    /// Response tokens of an autoregressive layout.
    Response,
    Clean(usize),
    Noisy(usize),
    /// Noisy copy of the context (full-duplication baseline only).
    NoisyContext,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attn: BoolMatrix,
    pub loss_mask: Vec<bool>,
    /// Target token for each row where `loss_mask` is set.
    pub targets: Vec<usize>,
    pub segments: Vec<Segment>,
    pub block_size: usize,
    pub n_blocks: usize,
    pub context_len: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn mask(&self) -> AttentionMask {
        AttentionMask::from_matrix(&self.attn)
    }

    /// `(row, target)` for every supervised row.
    pub fn loss_rows(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .filter(|&i| self.loss_mask[i])
            .map(|i| (i, self.targets[i]))
            .collect()
    }

    /// Rows of noisy block `k`.
    pub fn noisy_rows(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.context_len + (self.n_blocks + k) * self.block_size;
        start..start + self.block_size
    }

    /// Checks the attention rules of the block-diffusion layouts against the
    /// segment tags: context is causal, clean block `k` sees context and clean
    /// blocks `≤ k`, noisy block `k` sees context, clean blocks `< k` and
    /// itself, and every noisy position shares its clean twin's position id.
    pub fn check_block_invariants(&self) -> Result<()> {
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                let expected = match (self.segments[i], self.segments[j]) {
                    (Segment::Context, Segment::Context) => j <= i,
                    (Segment::Clean(_), Segment::Context) | (Segment::Noisy(_), Segment::Context) => true,
                    (Segment::Clean(k), Segment::Clean(m)) => m <= k,
                    (Segment::Noisy(k), Segment::Clean(m)) => m < k,
                    (Segment::Noisy(k), Segment::Noisy(m)) => m == k,
                    (Segment::NoisyContext, Segment::NoisyContext) => true,
                    (Segment::Noisy(_), Segment::NoisyContext) => false,
                    _ => false,
                };
                if self.attn.get(i, j) != expected {
                    return Err(Error::Layout(format!(
                        "row {i} ({:?}) -> column {j} ({:?}) is {}, expected {expected}",
                        self.segments[i],
                        self.segments[j],
                        self.attn.get(i, j)
                    )));
                }
            }
            let noisy = matches!(self.segments[i], Segment::Noisy(_));
            if self.loss_mask[i] && !noisy {
                return Err(Error::Layout(format!("loss on non-noisy row {i}")));
            }
        }
        let b = self.block_size;
        for k in 0..self.n_blocks {
            for o in 0..b {
                let clean = self.context_len + k * b + o;
                let noisy = self.context_len + (self.n_blocks + k) * b + o;
                if self.position_ids[clean] != self.position_ids[noisy] {
                    return Err(Error::Layout(format!("position mismatch in block {k} offset {o}")));
                }
            }
        }
        Ok(())
    }
}

fn check_length(len: usize, max_positions: usize) -> Result<()> {
    if len > max_positions {
        return Err(Error::Range(format!(
            "layout needs {len} positions, model has {max_positions}"
        )));
    }
    Ok(())
}

/// Causal layout over `context ++ response`; row `i` predicts token `i + 1`
/// for every row whose successor is a response token.
pub fn build_ar_layout(context: &[usize], response: &[usize], max_positions: usize) -> Result<SequenceLayout> {
    let (p, r) = (context.len(), response.len());
    let n = p + r;
    check_length(n, max_positions)?;
    let mut tokens = context.to_vec();
    tokens.extend_from_slice(response);
    let mut loss_mask = vec![false; n];
    let mut targets = vec![0; n];
    for i in p.saturating_sub(1)..n.saturating_sub(1) {
        if i + 1 >= p {
            loss_mask[i] = true;
            targets[i] = tokens[i + 1];
        }
    }
    let mut segments = vec![Segment::Context; p];
    segments.extend(std::iter::repeat_n(Segment::Response, r));
    Ok(SequenceLayout {
        token_ids: tokens,
        position_ids: (0..n).collect(),
        attn: BoolMatrix::from_fn(n, n, |i, j| j <= i),
        loss_mask,
        targets,
        segments,
        block_size: 0,
        n_blocks: 0,
        context_len: p,
    })
}

/// Splits a response into blocks of `b`, right-padding the last with `pad`.
pub fn pad_to_blocks(response: &[usize], b: usize, pad: usize) -> Result<Vec<Vec<usize>>> {
    if b == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    Ok(response
        .chunks(b)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(b, pad);
            v
        })
        .collect())
}

/// Number of masked positions for a block when masking at `ratio`.
pub fn masked_count(ratio: f64, b: usize) -> usize {
    ((ratio * b as f64).ceil() as usize).clamp(1, b)
}

#[derive(Clone, Copy, Debug)]
pub struct Specials {
    pub mask: usize,
    pub pad: usize,
}

fn block_layout(
    context: &[usize],
    blocks: &[Vec<usize>],
    noisy: &[Vec<usize>],
    b: usize,
    specials: Specials,
    max_positions: usize,
) -> Result<SequenceLayout> {
    let p = context.len();
    let nb = blocks.len();
    let n = p + 2 * nb * b;
    check_length(p + nb * b, max_positions)?;
    let mut tokens = context.to_vec();
    let mut positions: Vec<usize> = (0..p).collect();
    let mut segments = vec![Segment::Context; p];
    for (k, block) in blocks.iter().enumerate() {
        tokens.extend_from_slice(block);
        positions.extend(p + k * b..p + (k + 1) * b);
        segments.extend(std::iter::repeat_n(Segment::Clean(k), b));
    }
    let mut loss_mask = vec![false; p + nb * b];
    let mut targets = vec![0; p + nb * b];
    for (k, block) in noisy.iter().enumerate() {
        for (o, &t) in block.iter().enumerate() {
            tokens.push(t);
            let clean = blocks[k][o];
            loss_mask.push(t == specials.mask && clean != specials.pad);
            targets.push(clean);
        }
        positions.extend(p + k * b..p + (k + 1) * b);
        segments.extend(std::iter::repeat_n(Segment::Noisy(k), b));
    }
    let segs = segments.clone();
    let attn = BoolMatrix::from_fn(n, n, |i, j| match (segs[i], segs[j]) {
        (Segment::Context, Segment::Context) => j <= i,
        (_, Segment::Context) => true,
        (Segment::Clean(k), Segment::Clean(m)) => m <= k,
        (Segment::Noisy(k), Segment::Clean(m)) => m < k,
        (Segment::Noisy(k), Segment::Noisy(m)) => m == k,
        _ => false,
    });
    Ok(SequenceLayout {
        token_ids: tokens,
        position_ids: positions,
        attn,
        loss_mask,
        targets,
        segments,
        block_size: b,
        n_blocks: nb,
        context_len: p,
    })
}

/// Response-only duplication layout for masked-denoising training.
pub fn build_rad_layout(
    context: &[usize],
    response: &[usize],
    b: usize,
    mask_ratios: &[f64],
    seed: u64,
    specials: Specials,
    max_positions: usize,
) -> Result<SequenceLayout> {
    let blocks = pad_to_blocks(response, b, specials.pad)?;
    if mask_ratios.len() != blocks.len() {
        return Err(Error::dim(
            "build_rad_layout",
            format!("{} mask ratios for {} blocks", mask_ratios.len(), blocks.len()),
        ));
    }
    if let Some(r) = mask_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("mask ratio {r} not in (0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<Vec<usize>> = blocks
        .iter()
        .zip(mask_ratios)
        .map(|(block, &ratio)| {
            let mut v = block.clone();
            for i in sample(&mut rng, b, masked_count(ratio, b)) {
                v[i] = specials.mask;
            }
            v
        })
        .collect();
    block_layout(context, &blocks, &noisy, b, specials, max_positions)
}

/// Fully masked noisy blocks over teacher-committed clean blocks.
pub fn build_dcd_layout(
    context: &[usize],
    pseudo_blocks: &[Vec<usize>],
    b: usize,
    specials: Specials,
    max_positions: usize,
) -> Result<SequenceLayout> {
    if b == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    if let Some(k) = pseudo_blocks.iter().position(|blk| blk.len() != b) {
        return Err(Error::dim(
            "build_dcd_layout",
            format!("block {k} has {} tokens, expected {b}", pseudo_blocks[k].len()),
        ));
    }
    let noisy = vec![vec![specials.mask; b]; pseudo_blocks.len()];
    block_layout(context, pseudo_blocks, &noisy, b, specials, max_positions)
}

/// Comparison layout that duplicates context and response. The noisy copy of
/// the context acts as a leading block that sees only itself; responses follow
/// the same rules as [`build_rad_layout`] with every noisy position masked.
pub fn build_full_dup_layout(context: &[usize], response: &[usize], b: usize, specials: Specials) -> Result<SequenceLayout> {
    let blocks = pad_to_blocks(response, b, specials.pad)?;
    let p = context.len();
    let nb = blocks.len();
    let mut tokens = context.to_vec();
    let mut positions: Vec<usize> = (0..p).collect();
    let mut segments = vec![Segment::Context; p];
    for (k, block) in blocks.iter().enumerate() {
        tokens.extend_from_slice(block);
        positions.extend(p + k * b..p + (k + 1) * b);
        segments.extend(std::iter::repeat_n(Segment::Clean(k), b));
    }
    tokens.extend(std::iter::repeat_n(specials.mask, p));
    positions.extend(0..p);
    segments.extend(std::iter::repeat_n(Segment::NoisyContext, p));
    for k in 0..nb {
        tokens.extend(std::iter::repeat_n(specials.mask, b));
        positions.extend(p + k * b..p + (k + 1) * b);
        segments.extend(std::iter::repeat_n(Segment::Noisy(k), b));
    }
    let n = tokens.len();
    let segs = segments.clone();
    let attn = BoolMatrix::from_fn(n, n, |i, j| match (segs[i], segs[j]) {
        (Segment::Context, Segment::Context) => j <= i,
        (Segment::NoisyContext, Segment::NoisyContext) => true,
        (Segment::NoisyContext, _) => false,
        (_, Segment::Context) => true,
        (Segment::Clean(k), Segment::Clean(m)) => m <= k,
        (Segment::Noisy(k), Segment::Clean(m)) => m < k,
        (Segment::Noisy(k), Segment::Noisy(m)) => m == k,
        _ => false,
    });
    Ok(SequenceLayout {
        token_ids: tokens,
        position_ids: positions,
        attn,
        loss_mask: vec![false; n],
        targets: vec![0; n],
        segments,
        block_size: b,
        n_blocks: nb,
        context_len: p,
    })
}

/// Several layouts stacked into one block-diagonal pass.
#[derive(Clone, Debug)]
pub struct StackedLayout {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
    /// Row offset of each member layout.
    pub offsets: Vec<usize>,
}

pub fn stack(layouts: &[&SequenceLayout]) -> Result<StackedLayout> {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut offsets = Vec::with_capacity(layouts.len());
    let mut masks = Vec::with_capacity(layouts.len());
    for l in layouts {
        offsets.push(tokens.len());
        tokens.extend_from_slice(&l.token_ids);
        positions.extend_from_slice(&l.position_ids);
        masks.push(l.mask());
    }
    Ok(StackedLayout {
        tokens,
        positions,
        mask: AttentionMask::block_diagonal(&masks)?,
        offsets,
    })
}

/// Closed-form multiply-add counts for the body of the network (projections,
/// attention, feed-forward; the logits head is excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub d_model: u64,
    pub n_layers: u64,
    pub ffn_mult: u64,
}

impl From<&ModelConfig> for FlopsModel {
    fn from(c: &ModelConfig) -> Self {
        FlopsModel {
            d_model: c.d_model as u64,
            n_layers: c.n_layers as u64,
            ffn_mult: c.ffn_mult as u64,
        }
    }
}

impl FlopsModel {
    /// Per-row cost in all layers of a query that attends `ell` columns.
    pub fn g(&self, ell: u64) -> u64 {
        self.n_layers * (self.linear_per_row() + self.score_mix_per_row(ell))
    }

    fn linear_per_row(&self) -> u64 {
        let d = self.d_model;
        4 * d * d + 2 * self.ffn_mult * d * d
    }

    fn score_mix_per_row(&self, ell: u64) -> u64 {
        2 * ell * self.d_model
    }

    /// `F(q, ℓ) = q·g(ℓ)`.
    pub fn pass(&self, q: u64, ell: u64) -> u64 {
        q * self.g(ell)
    }

    /// Attention score and mix part of `F(q, ℓ)`.
    pub fn attention_term(&self, q: u64, ell: u64) -> u64 {
        self.n_layers * q * self.score_mix_per_row(ell)
    }

    /// Cost of a pass under `mask`, counted the way `kernel` evaluates it.
    pub fn mask_flops(&self, mask: &AttentionMask, kernel: AttentionKernel) -> u64 {
        (0..mask.n_rows())
            .map(|i| match kernel {
                AttentionKernel::Sparse => self.g(mask.row_len(i) as u64),
                AttentionKernel::Dense => self.g(mask.n_cols() as u64),
            })
            .sum()
    }

    pub fn mask_attention_flops(&self, mask: &AttentionMask, kernel: AttentionKernel) -> u64 {
        (0..mask.n_rows())
            .map(|i| match kernel {
                AttentionKernel::Sparse => self.attention_term(1, mask.row_len(i) as u64),
                AttentionKernel::Dense => self.attention_term(1, mask.n_cols() as u64),
            })
            .sum()
    }

    pub fn layout_flops(&self, layout: &SequenceLayout, kernel: AttentionKernel) -> u64 {
        self.mask_flops(&layout.mask(), kernel)
    }

    pub fn layout_attention_flops(&self, layout: &SequenceLayout, kernel: AttentionKernel) -> u64 {
        self.mask_attention_flops(&layout.mask(), kernel)
    }
}

/// Savings of the response-only layout over full duplication under several
/// counting conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RadSavings {
    pub p: usize,
    pub r: usize,
    pub b: usize,
    pub rad_len: usize,
    pub full_dup_len: usize,
    /// Score/mix work when every row scores every column.
    pub attention_dense: f64,
    /// Score/mix work over allowed columns only.
    pub attention_sparse: f64,
    pub total_dense: f64,
    pub total_sparse: f64,
}

fn ratio_saved(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        1.0 - a as f64 / b as f64
    }
}

/// Analytic savings for context length `p`, response length `r` (padded to a
/// multiple of `b`). Works on the mask structure alone.
pub fn rad_savings_detail(model: &FlopsModel, p: usize, r: usize, b: usize) -> Result<RadSavings> {
    if r == 0 {
        return Err(Error::Config("response length must be positive".into()));
    }
    // Token values do not affect the count; any ids will do.
    let specials = Specials { mask: 0, pad: 1 };
    let context = vec![2; p];
    let response = vec![2; r];
    let nb = r.div_ceil(b.max(1));
    let rad = build_rad_layout(&context, &response, b, &vec![1.0; nb], 0, specials, usize::MAX)?;
    let dup = build_full_dup_layout(&context, &response, b, specials)?;
    let (rm, dm) = (rad.mask(), dup.mask());
    use AttentionKernel::{Dense, Sparse};
    Ok(RadSavings {
        p,
        r,
        b,
        rad_len: rad.len(),
        full_dup_len: dup.len(),
        attention_dense: ratio_saved(model.mask_attention_flops(&rm, Dense), model.mask_attention_flops(&dm, Dense)),
        attention_sparse: ratio_saved(model.mask_attention_flops(&rm, Sparse), model.mask_attention_flops(&dm, Sparse)),
        total_dense: ratio_saved(model.mask_flops(&rm, Dense), model.mask_flops(&dm, Dense)),
        total_sparse: ratio_saved(model.mask_flops(&rm, Sparse), model.mask_flops(&dm, Sparse)),
    })
}

/// Fraction of attention work saved by the response-only layout, with rows
/// scoring every column of the sequence:
/// `1 − (P + 2R′)² / (2(P + R′))²`, `R′` the padded response length.
pub fn rad_savings(p: usize, r: usize, b: usize) -> f64 {
    let rp = r.div_ceil(b.max(1)) * b.max(1);
    let rad = (p + 2 * rp) as f64;
    let dup = (2 * (p + rp)) as f64;
    1.0 - (rad * rad) / (dup * dup)
}

mod common;

use blockdiff::decoding::{decode_ar, decode_blocks, CacheStrategy, DecodeConfig, DecodeMode, DecodeTokens};
use blockdiff::denoiser::forward;
use blockdiff::layout::{build_dcd_layout, build_full_dup_layout, build_rad_layout, FlopsModel, Specials};
use blockdiff::tensor::AttentionKernel;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPECIAL: DecodeTokens = DecodeTokens { mask: MASK, eos: EOS };
const SPECIALS: Specials = Specials { mask: MASK, pad: PAD };

#[test]
fn strategies_agree_on_tokens_and_logits() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let p = random_model(&cfg, trial, 8.0);
        let n = rng.random_range(1..6);
        let ctx = random_tokens(&mut rng, n, 3, 10);
        for (mode, tau) in [(DecodeMode::Onestep, 0.0), (DecodeMode::Multistep, 0.5)] {
            let run = |cache| {
                let c = DecodeConfig {
                    mode,
                    threshold: tau,
                    block_size: 3,
                    max_blocks: 4,
                    cache,
                    ..Default::default()
                };
                decode_blocks(&p, &ctx, &c, SPECIAL).unwrap()
            };
            let none = run(CacheStrategy::None);
            for other in [run(CacheStrategy::Vanilla), run(CacheStrategy::Fused)] {
                assert_eq!(none.tokens, other.tokens);
                assert_eq!(none.step_logits.len(), other.step_logits.len());
                for (a, b) in none.step_logits.iter().zip(&other.step_logits) {
                    assert!(max_abs_diff(a, b) <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn ar_cache_matches_recompute() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..6 {
        let p = random_model(&cfg, 100 + trial, 8.0);
        let ctx = random_tokens(&mut rng, 3, 3, 10);
        let c = |cache| DecodeConfig {
            mode: DecodeMode::Ar,
            block_size: 1,
            max_blocks: 10,
            cache,
            ..Default::default()
        };
        let a = decode_ar(&p, &ctx, &c(CacheStrategy::None), SPECIAL).unwrap();
        let b = decode_ar(&p, &ctx, &c(CacheStrategy::Fused), SPECIAL).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (x, y) in a.step_logits.iter().zip(&b.step_logits) {
            assert!(max_abs_diff(x, y) <= 1e-9);
        }
    }
}

/// Rows of noisy block `k` must not depend on later clean blocks or on any
/// other noisy block.
#[test]
fn rad_noisy_rows_ignore_forbidden_tokens() {
    let cfg = tiny_config(10);
    let p = random_model(&cfg, 7, 8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ctx = random_tokens(&mut rng, 3, 3, 10);
    let resp = random_tokens(&mut rng, 9, 3, 10);
    let layout = build_rad_layout(&ctx, &resp, 3, &[0.5, 0.9, 0.4], 5, SPECIALS, 64).unwrap();
    let mask = layout.mask();
    let run = |tokens: &[usize]| forward(&p, tokens, &layout.position_ids, &mask, None, &[], AttentionKernel::Sparse).unwrap().logits;
    let base = run(&layout.token_ids);
    for k in 0..layout.n_blocks {
        let rows = layout.noisy_rows(k);
        let mut tokens = layout.token_ids.clone();
        for j in 0..tokens.len() {
            let later_clean = j >= ctx.len() && j < ctx.len() + resp.len() && (j - ctx.len()) / 3 >= k;
            let other_noisy = j >= ctx.len() + resp.len() && !rows.contains(&j);
            if later_clean || other_noisy {
                tokens[j] = 3 + (tokens[j] + 1) % 7;
            }
        }
        let moved = run(&tokens);
        for r in rows {
            let d: f64 = base.row(r).iter().zip(moved.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "block {k} row {r} moved by {d}");
        }
    }
}

#[test]
fn counted_macs_match_flops_model() {
    let cfg = tiny_config(10);
    let p = random_model(&cfg, 1, 1.0);
    let fm = FlopsModel::from(&cfg);
    let ctx = [3, 4, 5, 6];
    let resp = [7, 8, 9, 3, EOS];
    let layouts = [
        build_rad_layout(&ctx, &resp, 2, &[1.0, 0.3, 0.6], 1, SPECIALS, 64).unwrap(),
        build_full_dup_layout(&ctx, &resp, 2, SPECIALS).unwrap(),
        build_dcd_layout(&ctx, &[vec![7, 8], vec![EOS, PAD]], 2, SPECIALS, 64).unwrap(),
    ];
    for l in &layouts {
        for kernel in [AttentionKernel::Sparse, AttentionKernel::Dense] {
            let out = forward(&p, &l.token_ids, &l.position_ids, &l.mask(), None, &[], kernel).unwrap();
            assert_eq!(out.macs.body, fm.layout_flops(l, kernel));
        }
    }
}

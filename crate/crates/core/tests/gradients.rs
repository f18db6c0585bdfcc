mod common;

use blockdiff::denoiser::ModelParams;
use blockdiff::layout::{build_ar_layout, build_rad_layout, Specials};
use blockdiff::tensor::{softmax_rows, KlDirection, Tensor};
use blockdiff::training::{ar_loss, dcd_loss, rad_loss, trajectory_ce_loss, DcdBlock, DcdTarget, DistillConfig, LossOutput, Tokens, WeightMode};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOKENS: Tokens = Tokens { mask: MASK, eos: EOS, pad: PAD };

/// Central differences over every parameter entry.
fn check(params: &ModelParams, loss: impl Fn(&ModelParams) -> LossOutput) {
    let analytic = loss(params).grads;
    let h = 1e-5;
    let mut p = params.clone();
    let n_tensors = analytic.len();
    let mut worst = 0.0f64;
    for ti in 0..n_tensors {
        for e in 0..analytic[ti].len() {
            let orig = p.tensors_mut()[ti].data()[e];
            p.tensors_mut()[ti].data_mut()[e] = orig + h;
            let up = loss(&p).loss;
            p.tensors_mut()[ti].data_mut()[e] = orig - h;
            let down = loss(&p).loss;
            p.tensors_mut()[ti].data_mut()[e] = orig;
            let num = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            worst = worst.max(err);
            assert!(err <= 1e-4, "tensor {ti} entry {e}: analytic {a} numeric {num}");
        }
    }
    assert!(worst.is_finite());
}

fn model(seed: u64) -> ModelParams {
    let mut cfg = tiny_config(9);
    cfg.d_model = 4;
    cfg.n_layers = 1;
    random_model(&cfg, seed, 10.0)
}

#[test]
fn ar_loss_gradient() {
    let p = model(1);
    let layout = build_ar_layout(&[3, 4, 5], &[6, 7, EOS], 64).unwrap();
    check(&p, |q| ar_loss(q, &layout).unwrap());
}

#[test]
fn rad_loss_gradient() {
    let p = model(2);
    let specials = Specials { mask: MASK, pad: PAD };
    let layout = build_rad_layout(&[3, 4], &[5, 6, 7, 8, EOS], 2, &[1.0, 0.5, 0.7], 9, specials, 64).unwrap();
    check(&p, |q| rad_loss(q, &layout).unwrap());
}

fn target(seed: u64) -> DcdTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = 9;
    let mut dist = || {
        let logits = Tensor::new(vec![1, v], random_tokens(&mut rng, v, 0, 7).into_iter().map(|x| x as f64).collect()).unwrap();
        softmax_rows(&logits).row(0).to_vec()
    };
    DcdTarget {
        context: vec![3, 4],
        block_size: 3,
        blocks: vec![
            DcdBlock {
                distributions: vec![dist(), dist(), dist()],
                committed: vec![5, 6, 7],
                unmask_step: vec![1, 2, 1],
                total_steps: 2,
            },
            DcdBlock {
                distributions: vec![dist(), dist(), dist()],
                committed: vec![8, EOS, 5],
                unmask_step: vec![2, 1, 3],
                total_steps: 3,
            },
        ],
    }
}

#[test]
fn dcd_loss_gradient_both_directions() {
    let p = model(3);
    let t = target(4);
    let layout = t.layout(TOKENS, 64).unwrap();
    for dir in [KlDirection::Forward, KlDirection::Reverse] {
        for mode in [WeightMode::Uniform, WeightMode::StepProportional] {
            let cfg = DistillConfig {
                kl_direction: dir,
                weight_mode: mode,
                eos_ce_weight: 0.7,
                block_size: 3,
                ..Default::default()
            };
            check(&p, |q| dcd_loss(q, &t, &layout, &cfg, TOKENS).unwrap());
        }
    }
}

#[test]
fn trajectory_ce_gradient() {
    let p = model(5);
    let t = target(6);
    let layout = t.layout(TOKENS, 64).unwrap();
    check(&p, |q| trajectory_ce_loss(q, &t, &layout, TOKENS).unwrap());
}

#[test]
fn post_eos_positions_unsupervised() {
    let p = model(7);
    let t = target(8);
    let layout = t.layout(TOKENS, 64).unwrap();
    let cfg = DistillConfig { block_size: 3, ..Default::default() };
    let base = dcd_loss(&p, &t, &layout, &cfg, TOKENS).unwrap();
    let mut t2 = t.clone();
    t2.blocks[1].distributions[2] = vec![1.0 / 9.0; 9];
    let l2 = t2.layout(TOKENS, 64).unwrap();
    let other = dcd_loss(&p, &t2, &l2, &cfg, TOKENS).unwrap();
    assert_eq!(base.loss, other.loss);
    assert!(base.parts.eos_ce > 0.0);
}

mod common;

use blockdiff::decoding::{denoise_block, BlockDenoiser};
use blockdiff::layout::build_dcd_layout;
use blockdiff::tensor::Tensor;
use blockdiff::training::{collect_trajectory, dcd_supervision, DistillConfig, Tokens, Trajectory, WeightMode};
use blockdiff::Result;
use common::{EOS, MASK, PAD};

const V: usize = 6;
const TOKENS: Tokens = Tokens { mask: MASK, eos: EOS, pad: PAD };

/// Proposes `(token, confidence)` per position as a pure function of the
/// block state; the remaining mass is spread over the other tokens.
struct Table {
    rule: fn(usize, &[usize]) -> Vec<(usize, f64)>,
    blocks_seen: Vec<Vec<usize>>,
    calls: usize,
}

fn row(token: usize, conf: f64) -> Vec<f64> {
    let rest = (1.0 - conf) / (V - 1) as f64;
    (0..V).map(|t| if t == token { conf } else { rest }).collect()
}

impl BlockDenoiser for Table {
    fn denoise(&mut self, block: &[usize]) -> Result<Tensor> {
        self.calls += 1;
        let rows: Vec<Vec<f64>> = (self.rule)(self.blocks_seen.len(), block).into_iter().map(|(t, c)| row(t, c)).collect();
        Tensor::from_rows(&rows)
    }

    fn commit(&mut self, block: &[usize]) -> Result<()> {
        self.blocks_seen.push(block.to_vec());
        Ok(())
    }
}

/// Block 0: step 1 commits positions 0 and 2 (≥ 0.9); step 2 has nothing
/// above threshold so only position 3 (0.8) goes; step 3 commits position 1.
/// Block 1 is fully confident and contains eos at position 1.
fn script(k: usize, block: &[usize]) -> Vec<(usize, f64)> {
    let open = |i: usize| block[i] == MASK;
    if k == 0 {
        match (open(0), open(1), open(2), open(3)) {
            (true, true, true, true) => vec![(3, 0.95), (4, 0.5), (5, 0.92), (3, 0.3)],
            (false, true, false, true) => vec![(3, 0.99), (4, 0.6), (5, 0.99), (4, 0.8)],
            (false, true, false, false) => vec![(3, 0.99), (4, 0.97), (5, 0.99), (4, 0.99)],
            s => panic!("unexpected state {s:?}"),
        }
    } else {
        vec![(5, 0.91), (EOS, 0.93), (3, 0.99), (4, 0.95)]
    }
}

fn teacher() -> Table {
    Table {
        rule: script,
        blocks_seen: Vec::new(),
        calls: 0,
    }
}

fn cfg(threshold: f64) -> DistillConfig {
    DistillConfig {
        threshold,
        block_size: 4,
        max_blocks: 5,
        ..Default::default()
    }
}

#[test]
fn reproduces_hand_enumerated_trajectory() {
    let mut t = teacher();
    let Trajectory::Target(target) = collect_trajectory(&mut t, &[3, 4], &cfg(0.9), TOKENS).unwrap() else {
        panic!("discarded");
    };
    assert_eq!(target.blocks.len(), 2);
    let b0 = &target.blocks[0];
    assert_eq!(b0.committed, vec![3, 4, 5, 4]);
    assert_eq!(b0.unmask_step, vec![1, 3, 1, 2]);
    assert_eq!(b0.total_steps, 3);
    assert_eq!(b0.distributions[0], row(3, 0.95));
    assert_eq!(b0.distributions[1], row(4, 0.97));
    assert_eq!(b0.distributions[2], row(5, 0.92));
    assert_eq!(b0.distributions[3], row(4, 0.8));
    let b1 = &target.blocks[1];
    assert_eq!(b1.committed, vec![5, EOS, 3, 4]);
    assert_eq!(b1.unmask_step, vec![1; 4]);
    assert_eq!(b1.total_steps, 1);
    assert_eq!(t.calls, 4);
    // Both blocks were committed back to the teacher in order.
    assert_eq!(t.blocks_seen, vec![vec![3, 4, 5, 4], vec![5, EOS, 3, 4]]);
}

#[test]
fn zero_threshold_is_one_step_per_block() {
    let mut t = teacher();
    let Trajectory::Target(target) = collect_trajectory(&mut t, &[3], &cfg(0.0), TOKENS).unwrap() else {
        panic!("discarded");
    };
    assert!(target.blocks.iter().all(|b| b.total_steps == 1));
    assert_eq!(target.blocks[0].committed, vec![3, 4, 5, 3]);
}

#[test]
fn all_below_threshold_commits_single_argmax() {
    fn flat(_: usize, block: &[usize]) -> Vec<(usize, f64)> {
        let n_open = block.iter().filter(|&&t| t == MASK).count();
        // Confidence peaks at a different position each time.
        let peak = [2, 0, 3, 1][4 - n_open];
        (0..4).map(|i| (3, if i == peak { 0.6 } else { 0.4 })).collect()
    }
    let mut t = Table {
        rule: flat,
        blocks_seen: Vec::new(),
        calls: 0,
    };
    let trace = denoise_block(&mut t, 4, 0.9, MASK).unwrap();
    assert_eq!(trace.steps, 4);
    let order: Vec<usize> = trace.commits.iter().map(|c| c.position).collect();
    assert_eq!(order, vec![2, 0, 3, 1]);
    assert!(trace.commits.iter().enumerate().all(|(k, c)| c.step == k + 1));
}

#[test]
fn supervision_follows_trajectory() {
    let mut t = teacher();
    let Trajectory::Target(target) = collect_trajectory(&mut t, &[3, 4], &cfg(0.9), TOKENS).unwrap() else {
        panic!("discarded");
    };
    let pseudo = target.pseudo_blocks(TOKENS);
    assert_eq!(pseudo[1], vec![5, EOS, PAD, PAD]);
    let layout = build_dcd_layout(&target.context, &pseudo, 4, TOKENS.specials(), 64).unwrap();
    let c = DistillConfig {
        weight_mode: WeightMode::StepProportional,
        ..cfg(0.9)
    };
    let sup = dcd_supervision(&target, &layout, &c, TOKENS).unwrap();
    // Four positions of block 0 and two of block 1 are supervised.
    assert_eq!(sup.kl.len(), 6);
    let raw = [1.0 / 3.0, 1.0, 1.0 / 3.0, 2.0 / 3.0];
    let mean0 = raw.iter().sum::<f64>() / 4.0;
    for (o, &(row, w)) in sup.kl[..4].iter().enumerate() {
        assert_eq!(row, layout.noisy_rows(0).start + o);
        assert!((w - raw[o] / mean0).abs() < 1e-15);
    }
    assert!(sup.kl[4..].iter().all(|&(_, w)| (w - 1.0).abs() < 1e-15));
    assert_eq!(&sup.kl_targets[..V], row(3, 0.95).as_slice());
    assert_eq!(sup.eos_ce, vec![(layout.noisy_rows(1).start + 1, EOS)]);
}

#[test]
fn conditioning_prefix_is_teacher_view() {
    let mut t = teacher();
    let Trajectory::Target(target) = collect_trajectory(&mut t, &[3, 4], &cfg(0.9), TOKENS).unwrap() else {
        panic!("discarded");
    };
    let c1 = target.conditioning(1);
    assert_eq!(c1, vec![(0, 3), (1, 4), (2, 3), (3, 4), (4, 5), (5, 4)]);
    let layout = target.layout(TOKENS, 64).unwrap();
    // Rows of noisy block 1 see exactly the context and clean block 0.
    let rows = layout.noisy_rows(1);
    let m = layout.mask();
    for r in rows.clone() {
        let mut seen: Vec<(usize, usize)> = m
            .row(r)
            .iter()
            .map(|&j| j as usize)
            .filter(|&j| !rows.contains(&j))
            .map(|j| (layout.position_ids[j], layout.token_ids[j]))
            .collect();
        seen.sort();
        assert_eq!(seen, c1);
    }
}

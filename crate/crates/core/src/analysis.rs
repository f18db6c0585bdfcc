//! Exact mean-field factorization bias on small enumerable joints, and
//! commit-time confidence statistics of a trained denoiser.

use serde::Serialize;

use crate::decoding::{decode_multistep, CacheStrategy, DecodeConfig, DecodeMode, DecodeTokens};
use crate::denoiser::ModelParams;
use crate::error::{Error, Result};

const MAX_STATES: usize = 1 << 16;

/// An explicit table over all `V^L` sequences; position 0 is the most
/// significant digit of the index.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    v: usize,
    l: usize,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(v: usize, l: usize, probs: Vec<f64>) -> Result<Self> {
        let states = checked_states(v, l)?;
        if probs.len() != states {
            return Err(Error::dim("JointDistribution", format!("{} entries for {v}^{l} states", probs.len())));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain("negative or non-finite probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(JointDistribution { v, l, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(v: usize, l: usize, weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        Self::new(v, l, weights.into_iter().map(|w| w / s).collect())
    }

    pub fn from_fn(v: usize, l: usize, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let states = checked_states(v, l)?;
        let w = (0..states).map(|i| f(&decode_index(i, v, l))).collect();
        Self::from_weights(v, l, w)
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[encode_index(x, self.v)]
    }

    /// Per-position marginals.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.v]; self.l];
        for (i, &p) in self.probs.iter().enumerate() {
            for (pos, &x) in decode_index(i, self.v, self.l).iter().enumerate() {
                m[pos][x] += p;
            }
        }
        m
    }

    /// Product of this joint's marginals.
    pub fn mean_field(&self) -> JointDistribution {
        let m = self.marginals();
        let probs = (0..self.probs.len())
            .map(|i| decode_index(i, self.v, self.l).iter().enumerate().map(|(pos, &x)| m[pos][x]).product())
            .collect();
        JointDistribution {
            v: self.v,
            l: self.l,
            probs,
        }
    }
}

fn checked_states(v: usize, l: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::Config("alphabet must be nonempty".into()));
    }
    let mut n: usize = 1;
    for _ in 0..l {
        n = n.checked_mul(v).filter(|&n| n <= MAX_STATES).ok_or_else(|| {
            Error::Config(format!("{v}^{l} states exceed the enumeration bound {MAX_STATES}"))
        })?;
    }
    Ok(n)
}

fn decode_index(mut i: usize, v: usize, l: usize) -> Vec<usize> {
    let mut x = vec![0; l];
    for pos in (0..l).rev() {
        x[pos] = i % v;
        i /= v;
    }
    x
}

fn encode_index(x: &[usize], v: usize) -> usize {
    x.iter().fold(0, |acc, &d| acc * v + d)
}

/// A partially observed sequence; `None` marks a masked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub values: Vec<Option<usize>>,
}

impl MaskedSequence {
    pub fn m(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i].is_none()).collect()
    }
}

/// Joint over the masked positions (in increasing position order) given the
/// observed ones.
pub fn exact_posterior(q: &JointDistribution, xt: &MaskedSequence) -> Result<JointDistribution> {
    if xt.values.len() != q.l {
        return Err(Error::dim("exact_posterior", format!("sequence of {} for joint of length {}", xt.values.len(), q.l)));
    }
    if xt.values.iter().flatten().any(|&x| x >= q.v) {
        return Err(Error::Range("observed token outside the alphabet".into()));
    }
    let masked = xt.masked_positions();
    let mut post = vec![0.0; checked_states(q.v, masked.len())?];
    for (i, &p) in q.probs.iter().enumerate() {
        let x = decode_index(i, q.v, q.l);
        if xt.values.iter().zip(&x).all(|(o, &xi)| o.is_none_or(|o| o == xi)) {
            let sub: Vec<usize> = masked.iter().map(|&m| x[m]).collect();
            post[encode_index(&sub, q.v)] += p;
        }
    }
    let z: f64 = post.iter().sum();
    if !(z > 0.0) {
        return Err(Error::ZeroEvidence);
    }
    for p in &mut post {
        *p /= z;
    }
    // Renormalization can leave the sum a few ulps from 1.
    Ok(JointDistribution {
        v: q.v,
        l: masked.len(),
        probs: post,
    })
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(posterior ‖ product of its marginals)` by enumeration.
pub fn mean_field_bias(q: &JointDistribution, xt: &MaskedSequence) -> Result<f64> {
    let post = exact_posterior(q, xt)?;
    let mf = post.mean_field();
    Ok(kl(&post.probs, &mf.probs))
}

fn subsets(l: usize, m: usize) -> Vec<Vec<usize>> {
    (0u32..(1u32 << l))
        .filter(|s| s.count_ones() as usize == m)
        .map(|s| (0..l).filter(|&i| s & (1 << i) != 0).collect())
        .collect()
}

/// `ε̄(m)` for `m = 0..=L`: uniform over mask placements of size `m`, and over
/// visible values weighted by their probability under `q`.
pub fn bias_curve(q: &JointDistribution) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(q.l + 1);
    for m in 0..=q.l {
        let placements = subsets(q.l, m);
        let mut total = 0.0;
        for masked in &placements {
            let visible: Vec<usize> = (0..q.l).filter(|i| !masked.contains(i)).collect();
            for vi in 0..checked_states(q.v, visible.len())? {
                let vals = decode_index(vi, q.v, visible.len());
                let mut values = vec![None; q.l];
                for (&pos, &x) in visible.iter().zip(&vals) {
                    values[pos] = Some(x);
                }
                let xt = MaskedSequence { values };
                let evidence: f64 = q
                    .probs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| {
                        let x = decode_index(*i, q.v, q.l);
                        xt.values.iter().zip(&x).all(|(o, &xi)| o.is_none_or(|o| o == xi))
                    })
                    .map(|(_, p)| p)
                    .sum();
                if evidence > 0.0 {
                    total += evidence * mean_field_bias(q, &xt)?;
                }
            }
        }
        curve.push(total / placements.len() as f64);
    }
    Ok(curve)
}

/// The built-in test family: `(name, joint)`.
pub fn builtin_family() -> Vec<(&'static str, JointDistribution)> {
    let product = JointDistribution::from_fn(3, 3, |x| [0.5, 0.3, 0.2][x[0]] * [0.1, 0.6, 0.3][x[1]] * [0.25, 0.25, 0.5][x[2]])
        .expect("valid");
    let pair = JointDistribution::from_fn(2, 2, |x| if x[0] == x[1] { 1.0 } else { 0.0 }).expect("valid");
    let parity = JointDistribution::from_fn(2, 3, |x| if x.iter().sum::<usize>() % 2 == 0 { 1.0 } else { 0.0 }).expect("valid");
    let copy = JointDistribution::from_fn(2, 4, |x| if x[0] == x[2] && x[1] == x[3] { 1.0 } else { 0.0 }).expect("valid");
    vec![
        ("product", product),
        ("correlated_pair", pair),
        ("parity3", parity),
        ("block_copy", copy),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl ClassStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(ClassStats {
            count: values.len(),
            mean,
            variance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EosStats {
    pub block_size: usize,
    pub eos: Option<ClassStats>,
    pub content: Option<ClassStats>,
}

/// Commit-time confidence of every output position (up to the first eos),
/// split by whether the committed token is eos. `tau = 0` decodes one step
/// per block.
pub fn eos_confidence_stats(
    params: &ModelParams,
    contexts: &[Vec<usize>],
    block_sizes: &[usize],
    tau: f64,
    max_blocks: usize,
    special: DecodeTokens,
) -> Result<Vec<EosStats>> {
    let mut out = Vec::with_capacity(block_sizes.len());
    for &b in block_sizes {
        let cfg = DecodeConfig {
            mode: DecodeMode::Multistep,
            block_size: b,
            max_blocks,
            threshold: tau,
            cache: CacheStrategy::Fused,
            ..Default::default()
        };
        let mut eos = Vec::new();
        let mut content = Vec::new();
        for ctx in contexts {
            let run = decode_multistep(params, ctx, &cfg, special)?;
            let keep = run.tokens.len();
            for (k, block) in run.trace.iter().enumerate() {
                for c in &block.commits {
                    if k * b + c.position >= keep {
                        continue;
                    }
                    if c.token == special.eos {
                        eos.push(c.confidence);
                    } else {
                        content.push(c.confidence);
                    }
                }
            }
        }
        out.push(EosStats {
            block_size: b,
            eos: ClassStats::of(&eos),
            content: ClassStats::of(&content),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[Option<usize>]) -> MaskedSequence {
        MaskedSequence { values: v.to_vec() }
    }

    #[test]
    fn posterior_edge_cases() {
        let (_, pair) = builtin_family().swap_remove(1);
        let point = exact_posterior(&pair, &seq(&[Some(1), Some(1)])).unwrap();
        assert_eq!(point.probs(), &[1.0]);
        let all = exact_posterior(&pair, &seq(&[None, None])).unwrap();
        assert_eq!(all.probs(), pair.probs());
        let cond = exact_posterior(&pair, &seq(&[Some(0), None])).unwrap();
        assert_eq!(cond.probs(), &[1.0, 0.0]);
        assert!(matches!(exact_posterior(&pair, &seq(&[Some(0), Some(1)])), Err(Error::ZeroEvidence)));
    }

    #[test]
    fn correlated_pair_bias() {
        let (_, pair) = builtin_family().swap_remove(1);
        let b = mean_field_bias(&pair, &seq(&[None, None])).unwrap();
        assert!((b - 2f64.ln()).abs() < 1e-12);
        let curve = bias_curve(&pair).unwrap();
        assert!(curve[0].abs() < 1e-12 && curve[1].abs() < 1e-12);
        assert!((curve[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn parity_and_copy_curves() {
        let fam = builtin_family();
        let parity = &fam[2].1;
        let c = bias_curve(parity).unwrap();
        let ln2 = 2f64.ln();
        for (got, want) in c.iter().zip([0.0, 0.0, ln2, ln2]) {
            assert!((got - want).abs() < 1e-12, "{c:?}");
        }
        let copy = &fam[3].1;
        let c = bias_curve(copy).unwrap();
        for (got, want) in c.iter().zip([0.0, 0.0, ln2 / 3.0, ln2, 2.0 * ln2]) {
            assert!((got - want).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn product_curve_is_zero() {
        let fam = builtin_family();
        assert!(bias_curve(&fam[0].1).unwrap().iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn enumeration_bound() {
        assert!(JointDistribution::new(2, 17, vec![]).is_err());
        assert!(JointDistribution::new(2, 2, vec![0.5, 0.5, 0.0, 0.1]).is_err());
    }

    #[test]
    fn single_value_class_has_zero_variance() {
        let s = ClassStats::of(&[0.7]).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.mean, 0.7);
        assert!(ClassStats::of(&[]).is_none());
    }
}

//! Pre-norm transformer that accepts an arbitrary attention mask per pass.
//!
//! The same network serves as the autoregressive teacher and the block
//! denoiser; only the layout of its inputs differs. There is no timestep
//! input: the corruption level is visible through the mask tokens alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttentionKernel, AttentionMask, MacCategory, MacCounts, NodeId, Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8] = b"BLOCKDIFF-PARAMS v1\n";
const INIT_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            ffn_mult: 4,
            max_positions: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid scale");
    let mut w = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(vec![r, c], data).expect("shape matches")
    };
    let (d, f, v) = (config.d_model, config.d_ffn(), config.vocab_size);
    let token_embedding = w(v, d);
    let position_embedding = w(config.max_positions, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: w(d, d),
            bq: Tensor::zeros(&[d]),
            wk: w(d, d),
            bk: Tensor::zeros(&[d]),
            wv: w(d, d),
            bv: Tensor::zeros(&[d]),
            wo: w(d, d),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: w(d, f),
            b1: Tensor::zeros(&[f]),
            w2: w(f, d),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        config: *config,
        token_embedding,
        position_embedding,
        layers,
        final_gain: Tensor::filled(&[d], 1.0),
        final_bias: Tensor::zeros(&[d]),
        head: w(d, v),
        head_bias: Tensor::zeros(&[v]),
    })
}

impl ModelParams {
    /// Every parameter with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        let json = serde_json::to_string(&header).expect("header serializes");
        w.write_all(json.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing or unsupported magic string".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut params = init_params(&header.config, 0)?;
        let mut body = &rest[nl + 1..];
        let names: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != header.tensors.len() {
            return Err(Error::Checkpoint("tensor count does not match config".into()));
        }
        for ((t, (name, shape)), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Checkpoint(format!("expected {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
            }
            let n = t.len() * 8;
            if body.len() < n {
                return Err(Error::Checkpoint(format!("truncated data in {name}")));
            }
            for (v, chunk) in t.data_mut().iter_mut().zip(body[..n].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            body = &body[n..];
        }
        if !body.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Key and value rows of every layer for the positions cached so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    d: usize,
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            d: config.d_model,
            layers: vec![(Vec::new(), Vec::new()); config.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.len() / self.d.max(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (k, v) = &self.layers[l];
        (k, v)
    }

    pub fn append(&mut self, entries: &CacheEntries) -> Result<()> {
        if entries.layers.len() != self.layers.len() {
            return Err(Error::dim("KvCache::append", "layer count mismatch"));
        }
        for ((k, v), (nk, nv)) in self.layers.iter_mut().zip(&entries.layers) {
            k.extend_from_slice(nk);
            v.extend_from_slice(nv);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        for (k, v) in &mut self.layers {
            k.clear();
            v.clear();
        }
    }
}

/// Key/value rows produced by one pass for the requested write positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheEntries {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CacheEntries {
    pub fn rows(&self, d: usize) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.len() / d.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// One row per query token.
    pub logits: Tensor,
    pub new_cache_entries: CacheEntries,
    pub macs: MacCounts,
}

/// Node ids produced while recording a forward pass on a tape.
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Parameter leaves in [`ModelParams::named_tensors`] order; empty when
    /// parameters were recorded as constants.
    pub params: Vec<NodeId>,
    /// Key and value nodes per layer.
    pub kv: Vec<(NodeId, NodeId)>,
}

/// Records one forward pass. `mask` has one row per token and
/// `cache.len() + tokens.len()` columns.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<'a>(
    tape: &mut Tape<'a>,
    params: &'a ModelParams,
    trainable: bool,
    tokens: &[usize],
    positions: &[usize],
    mask: &'a AttentionMask,
    cache: Option<&'a KvCache>,
    kernel: AttentionKernel,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if tokens.len() != positions.len() {
        return Err(Error::dim("forward", format!("{} tokens, {} positions", tokens.len(), positions.len())));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Range(format!("position id {p} >= max_positions {}", cfg.max_positions)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Range(format!("token id {t} >= vocab_size {}", cfg.vocab_size)));
    }
    let cached = cache.map_or(0, KvCache::len);
    mask.validate(cached, tokens.len())?;

    let mut ids = Vec::new();
    let mut p = |tape: &mut Tape<'a>, t: &'a Tensor| {
        if trainable {
            let id = tape.param(t);
            ids.push(id);
            id
        } else {
            tape.constant_ref(t)
        }
    };

    tape.set_category(MacCategory::Uncounted);
    let tok = p(tape, &params.token_embedding);
    let pos = p(tape, &params.position_embedding);
    let te = tape.embed(tok, tokens)?;
    let pe = tape.embed(pos, positions)?;
    let mut x = tape.add(te, pe)?;

    let mut kv = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let lp: Vec<NodeId> = layer.tensors().into_iter().map(|(_, t)| p(tape, t)).collect();
        let [ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2] =
            lp.try_into().expect("16 layer tensors");
        let (ck, cv): (&'a [f64], &'a [f64]) = match cache {
            Some(c) => c.layer(l),
            None => (&[], &[]),
        };

        tape.set_category(MacCategory::Uncounted);
        let h = tape.layer_norm(x, ln1g, ln1b)?;
        tape.set_category(MacCategory::Body);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.add_row(v, bv)?;
        kv.push((k, v));
        let a = tape.attention(q, k, v, ck, cv, mask, cfg.n_heads, kernel)?;
        let o = tape.matmul(a, wo)?;
        let o = tape.add_row(o, bo)?;
        x = tape.add(x, o)?;

        tape.set_category(MacCategory::Uncounted);
        let h = tape.layer_norm(x, ln2g, ln2b)?;
        tape.set_category(MacCategory::Body);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        x = tape.add(x, f)?;
    }

    tape.set_category(MacCategory::Uncounted);
    let fg = p(tape, &params.final_gain);
    let fb = p(tape, &params.final_bias);
    let hw = p(tape, &params.head);
    let hb = p(tape, &params.head_bias);
    let h = tape.layer_norm(x, fg, fb)?;
    tape.set_category(MacCategory::Head);
    let logits = tape.matmul(h, hw)?;
    tape.set_category(MacCategory::Uncounted);
    let logits = tape.add_row(logits, hb)?;
    Ok(ForwardTrace {
        logits,
        params: ids,
        kv,
    })
}

/// Inference forward: logits for every query row plus the key/value rows of
/// the query positions listed in `cache_write` (indices into `tokens`).
pub fn forward(
    params: &ModelParams,
    tokens: &[usize],
    positions: &[usize],
    mask: &AttentionMask,
    cache: Option<&KvCache>,
    cache_write: &[usize],
    kernel: AttentionKernel,
) -> Result<DenoiserOutput> {
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, params, false, tokens, positions, mask, cache, kernel)?;
    let d = params.config.d_model;
    let mut entries = CacheEntries::default();
    for &(k, v) in &trace.kv {
        let (kt, vt) = (tape.value(k), tape.value(v));
        let mut ks = Vec::with_capacity(cache_write.len() * d);
        let mut vs = Vec::with_capacity(cache_write.len() * d);
        for &r in cache_write {
            if r >= tokens.len() {
                return Err(Error::Range(format!("cache write row {r} >= {} query rows", tokens.len())));
            }
            ks.extend_from_slice(kt.row(r));
            vs.extend_from_slice(vt.row(r));
        }
        entries.layers.push((ks, vs));
    }
    Ok(DenoiserOutput {
        logits: tape.value(trace.logits).clone(),
        new_cache_entries: entries,
        macs: tape.mac_counts(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax_rows, BoolMatrix};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_mult: 2,
            max_positions: 16,
        }
    }

    fn causal(n: usize) -> AttentionMask {
        AttentionMask::from_matrix(&BoolMatrix::from_fn(n, n, |i, j| j <= i))
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(&tiny(), 3).unwrap();
        assert_eq!(a, init_params(&tiny(), 3).unwrap());
        assert_ne!(a, init_params(&tiny(), 4).unwrap());
        assert!(a.layers[0].bq.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(init_params(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_logits_are_near_uniform() {
        let cfg = ModelConfig::with_vocab(40);
        let p = init_params(&cfg, 1).unwrap();
        let tokens = vec![5; 10];
        let positions: Vec<usize> = (0..10).collect();
        let out = forward(&p, &tokens, &positions, &causal(10), None, &[], AttentionKernel::Sparse).unwrap();
        let probs = softmax_rows(&out.logits);
        let max_h = (40f64).ln();
        for i in 0..10 {
            let h: f64 = -probs.row(i).iter().map(|&q| q * q.ln()).sum::<f64>();
            assert!((h - max_h).abs() / max_h < 0.1);
        }
    }

    #[test]
    fn single_token_pass() {
        let p = init_params(&tiny(), 2).unwrap();
        let m = causal(1);
        let a = forward(&p, &[4], &[0], &m, None, &[0], AttentionKernel::Sparse).unwrap();
        let b = forward(&p, &[4], &[0], &m, None, &[0], AttentionKernel::Sparse).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.shape(), &[1, 11]);
        assert_eq!(a.new_cache_entries.rows(8), 1);
    }

    #[test]
    fn position_out_of_range() {
        let p = init_params(&tiny(), 2).unwrap();
        let r = forward(&p, &[1], &[16], &causal(1), None, &[], AttentionKernel::Sparse);
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn empty_attention_row_is_layout_error() {
        let p = init_params(&tiny(), 2).unwrap();
        let m = AttentionMask::from_matrix(&BoolMatrix::from_fn(2, 2, |i, j| i == 0 && j == 0));
        let r = forward(&p, &[1, 2], &[0, 1], &m, None, &[], AttentionKernel::Sparse);
        assert!(matches!(r, Err(Error::Layout(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(ModelParams::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(ModelParams::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dense_and_sparse_kernels_agree() {
        let p = init_params(&tiny(), 5).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let pos = [0, 1, 2, 3, 4];
        let m = causal(5);
        let a = forward(&p, &tokens, &pos, &m, None, &[], AttentionKernel::Sparse).unwrap();
        let b = forward(&p, &tokens, &pos, &m, None, &[], AttentionKernel::Dense).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(b.macs.body > a.macs.body);
    }
}

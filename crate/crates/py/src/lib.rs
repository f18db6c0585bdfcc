//! Python bindings: corpus generation, decoding with a saved checkpoint, and
//! the exact analysis helpers.

use std::path::PathBuf;

use blockdiff::analysis::{self, JointDistribution, MaskedSequence};
use blockdiff::corpus::{self, Label, ReportGrammar, Vocabulary};
use blockdiff::decoding::{decode_ar, decode_blocks, CacheStrategy, DecodeConfig, DecodeMode, DecodeTokens};
use blockdiff::denoiser::{init_params, ModelConfig, ModelParams};
use blockdiff::{layout, metrics};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: blockdiff::Error) -> PyErr {
    match e {
        blockdiff::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Report grammar plus its vocabulary.
#[pyclass(module = "blockdiff")]
struct Grammar {
    grammar: ReportGrammar,
    vocab: Vocabulary,
}

#[pymethods]
impl Grammar {
    /// The built-in grammar, or one loaded from a TOML file.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let grammar = match path {
            Some(p) => ReportGrammar::load(&p).map_err(py_err)?,
            None => ReportGrammar::default(),
        };
        let vocab = Vocabulary::from_grammar(&grammar).map_err(py_err)?;
        Ok(Grammar { grammar, vocab })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    #[getter]
    fn special_ids(&self) -> (usize, usize, usize) {
        (self.vocab.mask_id(), self.vocab.eos_id(), self.vocab.pad_id())
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<usize>> {
        self.vocab.tokenize(text).map_err(py_err)
    }

    fn detokenize(&self, ids: Vec<usize>) -> String {
        self.vocab.detokenize(&ids)
    }

    /// `n` records as `(context, response, labels)`; a label is `None` for a
    /// normal region or the finding index.
    #[pyo3(signature = (seed, n, normalized=true, stream=0))]
    #[allow(clippy::type_complexity)]
    fn sample(&self, seed: u64, n: usize, normalized: bool, stream: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>, Vec<Option<usize>>)>> {
        let records = corpus::generate_corpus(&self.grammar, &self.vocab, seed, stream, n, normalized).map_err(py_err)?;
        Ok(records
            .into_iter()
            .map(|r| {
                let labels = r
                    .labels
                    .iter()
                    .map(|l| match l {
                        Label::Normal => None,
                        Label::Finding(f) => Some(*f),
                    })
                    .collect();
                (r.context_tokens, r.response_tokens, labels)
            })
            .collect())
    }

    /// Precision, recall and F1 of the findings asserted in `response`
    /// against per-region gold labels in the format returned by `sample`.
    fn finding_f1(&self, response: Vec<usize>, gold: Vec<Option<usize>>) -> PyResult<(f64, f64, f64)> {
        let matcher = corpus::PhraseMatcher::new(&self.grammar, &self.vocab).map_err(py_err)?;
        let gold: Vec<Label> = gold.into_iter().map(|g| g.map_or(Label::Normal, Label::Finding)).collect();
        let s = metrics::finding_f1(&response, &gold, &matcher);
        Ok((s.precision, s.recall, s.f1))
    }
}

/// A denoiser checkpoint.
#[pyclass(module = "blockdiff")]
struct Model {
    params: ModelParams,
}

fn parse_mode(mode: &str) -> PyResult<DecodeMode> {
    match mode {
        "ar" => Ok(DecodeMode::Ar),
        "multistep" => Ok(DecodeMode::Multistep),
        "onestep" => Ok(DecodeMode::Onestep),
        _ => Err(PyValueError::new_err(format!("unknown mode {mode:?}; expected ar, multistep or onestep"))),
    }
}

fn parse_cache(cache: &str) -> PyResult<CacheStrategy> {
    match cache {
        "none" => Ok(CacheStrategy::None),
        "vanilla" => Ok(CacheStrategy::Vanilla),
        "fused" => Ok(CacheStrategy::Fused),
        _ => Err(PyValueError::new_err(format!("unknown cache {cache:?}; expected none, vanilla or fused"))),
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            params: ModelParams::load(&path).map_err(py_err)?,
        })
    }

    /// Freshly initialized model with the default architecture.
    #[staticmethod]
    fn random(vocab_size: usize, seed: u64) -> PyResult<Self> {
        let params = init_params(&ModelConfig::with_vocab(vocab_size), seed).map_err(py_err)?;
        Ok(Model { params })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_params()
    }

    /// Greedy decode; returns `(tokens, tokens_per_forward, forward_passes)`.
    #[pyo3(signature = (context, mode="multistep", block_size=4, max_blocks=12, threshold=0.9, cache="fused", mask_id=0, eos_id=1))]
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        context: Vec<usize>,
        mode: &str,
        block_size: usize,
        max_blocks: usize,
        threshold: f64,
        cache: &str,
        mask_id: usize,
        eos_id: usize,
    ) -> PyResult<(Vec<usize>, f64, usize)> {
        let cfg = DecodeConfig {
            mode: parse_mode(mode)?,
            block_size,
            max_blocks,
            threshold,
            cache: parse_cache(cache)?,
            ..Default::default()
        };
        let special = DecodeTokens { mask: mask_id, eos: eos_id };
        let out = match cfg.mode {
            DecodeMode::Ar => decode_ar(&self.params, &context, &cfg, special),
            _ => decode_blocks(&self.params, &context, &cfg, special),
        }
        .map_err(py_err)?;
        Ok((out.tokens.clone(), out.tpf(), out.ledger.forward_passes()))
    }
}

#[pyfunction]
fn rouge_l(hypothesis: Vec<usize>, reference: Vec<usize>) -> f64 {
    metrics::rouge_l(&hypothesis, &reference)
}

/// Attention-FLOPs fraction saved by the response-only layout.
#[pyfunction]
fn rad_savings(prompt_len: usize, response_len: usize, block_size: usize) -> f64 {
    layout::rad_savings(prompt_len, response_len, block_size)
}

/// KL from the exact posterior to its mean-field product at `masked`
/// (`None` marks a masked position). `probs` is row-major over `v**l`.
#[pyfunction]
fn mean_field_bias(v: usize, l: usize, probs: Vec<f64>, masked: Vec<Option<usize>>) -> PyResult<f64> {
    let q = JointDistribution::new(v, l, probs).map_err(py_err)?;
    analysis::mean_field_bias(&q, &MaskedSequence { values: masked }).map_err(py_err)
}

/// Expected bias at each mask count `0..=l` for a built-in distribution.
#[pyfunction]
fn builtin_bias_curve(name: &str) -> PyResult<Vec<f64>> {
    let family = analysis::builtin_family();
    let names: Vec<&str> = family.iter().map(|(n, _)| *n).collect();
    let (_, q) = family
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown distribution {name:?}; expected one of {names:?}")))?;
    analysis::bias_curve(q).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "blockdiff")]
fn blockdiff_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grammar>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(rad_savings, m)?)?;
    m.add_function(wrap_pyfunction!(mean_field_bias, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_bias_curve, m)?)?;
    Ok(())
}

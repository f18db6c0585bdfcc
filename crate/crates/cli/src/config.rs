use std::path::{Path, PathBuf};

use blockdiff::decoding::{CacheStrategy, DecodeConfig, DecodeMode};
use blockdiff::denoiser::ModelConfig;
use blockdiff::tensor::AttentionKernel;
use blockdiff::training::{DistillConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Every knob of every command. Unknown keys are rejected at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train_ar: TrainConfig,
    pub adapt_rad: RadSection,
    pub distill: DistillSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
    pub bench_kv: BenchKvSection,
    pub bench_rad_flops: BenchRadSection,
    pub analyze_eos: EosSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train_ar: TrainConfig {
                steps: 800,
                ..Default::default()
            },
            adapt_rad: RadSection::default(),
            distill: DistillSection::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
            bench_kv: BenchKvSection::default(),
            bench_rad_flops: BenchRadSection::default(),
            analyze_eos: EosSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Grammar definition file; the built-in grammar when absent.
    pub grammar: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub normalized: bool,
    /// Overrides the grammar file's own value.
    pub abnormal_prob: Option<f64>,
    pub variant_bias: Option<f64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            grammar: None,
            n_train: 2000,
            n_eval: 500,
            normalized: true,
            abnormal_prob: None,
            variant_bias: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::with_vocab(4);
        ModelSection {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            ffn_mult: c.ffn_mult,
            max_positions: c.max_positions,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_mult: self.ffn_mult,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadSection {
    pub block_size: usize,
    pub train: TrainConfig,
}

impl Default for RadSection {
    fn default() -> Self {
        RadSection {
            block_size: 4,
            train: TrainConfig {
                steps: 1500,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Stage whose checkpoint is both teacher and student initialization.
    pub teacher: String,
    /// Output stage is `distill-<tag>`; defaults to the objective name.
    pub tag: Option<String>,
    /// Training contexts used for trajectory collection.
    pub n_contexts: usize,
    pub trajectory: DistillConfig,
    pub train: TrainConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            teacher: "rad".into(),
            tag: None,
            n_contexts: 500,
            trajectory: DistillConfig::default(),
            train: TrainConfig {
                steps: 400,
                lr: 1e-3,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Stage whose checkpoint is decoded.
    pub model: String,
    /// Number of evaluation contexts; all when absent.
    pub limit: Option<usize>,
    pub mode: DecodeMode,
    pub block_size: usize,
    pub max_blocks: usize,
    pub threshold: f64,
    pub cache: CacheStrategy,
    pub kernel: AttentionKernel,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        DecodeSection {
            model: "rad".into(),
            limit: None,
            mode: d.mode,
            block_size: d.block_size,
            max_blocks: d.max_blocks,
            threshold: d.threshold,
            cache: d.cache,
            kernel: d.kernel,
        }
    }
}

impl DecodeSection {
    pub fn to_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode,
            block_size: self.block_size,
            max_blocks: self.max_blocks,
            threshold: self.threshold,
            cache: self.cache,
            kernel: self.kernel,
            seed,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            DecodeMode::Ar => "ar",
            DecodeMode::Multistep => "multistep",
            DecodeMode::Onestep => "onestep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Stage scoring perplexity; skipped when its checkpoint is absent.
    pub teacher: Option<String>,
    /// Output stage is `eval-<tag>`; defaults to `<model>-<mode>`.
    pub tag: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            teacher: Some("ar".into()),
            tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Multi-step reference run.
    pub base: String,
    /// Native one-step run of the same checkpoint.
    pub native: String,
    pub candidates: Vec<String>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            base: "eval-rad-multistep".into(),
            native: "eval-rad-onestep".into(),
            candidates: vec!["eval-distill-dcd-onestep".into(), "eval-distill-trajectory-ce-onestep".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchKvSection {
    /// Checkpoint stage; a freshly initialized model when absent.
    pub model: Option<String>,
    pub prompt_lengths: Vec<usize>,
    pub block_sizes: Vec<usize>,
    pub max_blocks: Vec<usize>,
    pub contexts_per_cell: usize,
}

impl Default for BenchKvSection {
    fn default() -> Self {
        BenchKvSection {
            model: None,
            prompt_lengths: vec![1, 6, 20],
            block_sizes: vec![1, 4, 8],
            max_blocks: vec![1, 3, 8],
            contexts_per_cell: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchRadSection {
    pub prompt_lengths: Vec<usize>,
    pub response_len: usize,
    pub block_size: usize,
}

impl Default for BenchRadSection {
    fn default() -> Self {
        BenchRadSection {
            prompt_lengths: vec![0, 16, 32, 64, 128, 256, 512, 768, 1024],
            response_len: 48,
            block_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EosSection {
    pub model: String,
    pub block_sizes: Vec<usize>,
    /// Commit threshold; `decode.threshold` when absent.
    pub threshold: Option<f64>,
    pub limit: Option<usize>,
}

impl Default for EosSection {
    fn default() -> Self {
        EosSection {
            model: "rad".into(),
            block_sizes: vec![4, 8],
            threshold: None,
            limit: Some(200),
        }
    }
}

impl RunConfig {
    /// File values, then `overrides` (`dotted.key=value`, the value parsed as
    /// a TOML literal or taken as a bare string), then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not KEY=VALUE")))?;
            set_dotted(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let (Some(g), Some(base)) = (&cfg.corpus.grammar, path.and_then(Path::parent)) {
            if g.is_relative() {
                cfg.corpus.grammar = Some(base.join(g));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let ov = vec![
            "train_ar.steps=5".to_string(),
            "decode.mode=onestep".to_string(),
            "distill.tag=lambda0".to_string(),
            "train_ar.steps=7".to_string(),
        ];
        let cfg = RunConfig::load(None, &ov, Some(9)).unwrap();
        assert_eq!(cfg.train_ar.steps, 7);
        assert_eq!(cfg.decode.mode, DecodeMode::Onestep);
        assert_eq!(cfg.distill.tag.as_deref(), Some("lambda0"));
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["train_ar.stepz=5".into()], None).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["novalue".into()], None).is_err());
    }
}

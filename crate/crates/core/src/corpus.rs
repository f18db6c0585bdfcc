//! Synthetic structured-report corpus.
//!
//! Each record pairs a context of per-region state tokens with a response
//! describing the same regions in text. Normalized responses mention every
//! region; unnormalized ones only mention abnormal regions and close with a
//! catch-all clause.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK: &str = "<mask>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    mask_id: usize,
    eos_id: usize,
    pad_id: usize,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, mask_id: usize, eos_id: usize, pad_id: usize) -> Result<Self> {
        let n = symbols.len();
        if n < 4 {
            return Err(Error::Config(format!("vocabulary needs at least 4 symbols, got {n}")));
        }
        if mask_id >= n || eos_id >= n || pad_id >= n {
            return Err(Error::Config("special token id out of range".into()));
        }
        if mask_id == eos_id || mask_id == pad_id || eos_id == pad_id {
            return Err(Error::Config("special token ids must be distinct".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::Config(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Vocabulary {
            symbols,
            mask_id,
            eos_id,
            pad_id,
        })
    }

    /// Specials first, then one state token per (region, state), then every
    /// phrase word in order of first appearance.
    pub fn from_grammar(grammar: &ReportGrammar) -> Result<Self> {
        let mut symbols: Vec<String> = vec![MASK.into(), EOS.into(), PAD.into()];
        for region in &grammar.regions {
            symbols.push(state_token(&region.name, None));
            for i in 0..region.findings.len() {
                symbols.push(state_token(&region.name, Some(i)));
            }
        }
        let mut push_words = |phrase: &str| {
            for w in phrase.split_whitespace() {
                if !symbols.iter().any(|s| s == w) {
                    symbols.push(w.to_string());
                }
            }
        };
        for region in &grammar.regions {
            push_words(&region.normal);
            for finding in &region.findings {
                for v in finding {
                    push_words(v);
                }
            }
        }
        push_words(&grammar.catch_all);
        Vocabulary::new(symbols, 0, 1, 2)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.mask_id || id == self.eos_id || id == self.pad_id
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Maps a space-separated phrase to token ids, rejecting unknown words and
    /// special tokens.
    pub fn tokenize(&self, phrase: &str) -> Result<Vec<usize>> {
        phrase
            .split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) if !self.is_special(id) => Ok(id),
                Some(_) => Err(Error::Config(format!("phrase uses special token `{w}`"))),
                None => Err(Error::Config(format!("token `{w}` is not in the vocabulary"))),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn state_token(region: &str, finding: Option<usize>) -> String {
    match finding {
        None => format!("<{region}:normal>"),
        Some(i) => format!("<{region}:{i}>"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    /// Negative assertion used when the region is normal.
    pub normal: String,
    /// One entry per abnormal finding; each entry lists its surface variants.
    pub findings: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportGrammar {
    pub abnormal_prob: f64,
    /// Probability of a finding's first surface variant; the others share the
    /// remainder evenly.
    #[serde(default = "default_variant_bias")]
    pub variant_bias: f64,
    pub catch_all: String,
    pub regions: Vec<Region>,
}

fn default_variant_bias() -> f64 {
    0.5
}

impl Default for ReportGrammar {
    fn default() -> Self {
        let table: [(&str, &str, [&str; 3]); 6] = [
            ("lungs", "the lungs are clear .", ["opacity", "nodule", "consolidation"]),
            ("pleura", "no pleural effusion .", ["effusion", "thickening", "pneumothorax"]),
            ("heart", "heart size is normal .", ["enlargement", "calcification", "pacemaker"]),
            ("mediastinum", "mediastinum is unremarkable .", ["widening", "mass", "lymphadenopathy"]),
            ("bones", "bones are intact .", ["fracture", "lesion", "degeneration"]),
            ("diaphragm", "diaphragm is normal .", ["elevation", "flattening", "hernia"]),
        ];
        let regions = table
            .iter()
            .map(|(name, normal, findings)| Region {
                name: name.to_string(),
                normal: normal.to_string(),
                findings: findings
                    .iter()
                    .map(|f| vec![format!("{name} show {f} ."), format!("there is {f} in the {name} .")])
                    .collect(),
            })
            .collect();
        ReportGrammar {
            abnormal_prob: 0.3,
            variant_bias: default_variant_bias(),
            catch_all: "no other abnormality .".into(),
            regions,
        }
    }
}

impl ReportGrammar {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abnormal_prob) {
            return Err(Error::Config(format!("abnormal_prob {} not in [0,1]", self.abnormal_prob)));
        }
        if !(0.0..=1.0).contains(&self.variant_bias) {
            return Err(Error::Config(format!("variant_bias {} not in [0,1]", self.variant_bias)));
        }
        if self.regions.is_empty() {
            return Err(Error::Config("grammar has no regions".into()));
        }
        let empty = |s: &str| s.split_whitespace().next().is_none();
        if empty(&self.catch_all) {
            return Err(Error::Config("empty catch-all phrase".into()));
        }
        for r in &self.regions {
            if r.findings.is_empty() {
                return Err(Error::Config(format!("region `{}` has no findings", r.name)));
            }
            if empty(&r.normal) || r.findings.iter().any(|f| f.is_empty() || f.iter().any(|v| empty(v))) {
                return Err(Error::Config(format!("region `{}` has an empty phrase", r.name)));
            }
            if self.regions.iter().filter(|o| o.name == r.name).count() > 1 {
                return Err(Error::Config(format!("duplicate region `{}`", r.name)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: ReportGrammar = toml::from_str(text).map_err(|e| Error::Config(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grammar serializes")
    }

    /// Longest response the grammar can produce, including the final eos.
    pub fn max_response_len(&self) -> usize {
        let words = |s: &str| s.split_whitespace().count();
        let normalized: usize = self
            .regions
            .iter()
            .map(|r| {
                let f = r.findings.iter().flatten().map(|v| words(v)).max().unwrap_or(0);
                f.max(words(&r.normal))
            })
            .sum();
        let unnormalized: usize = self
            .regions
            .iter()
            .map(|r| r.findings.iter().flatten().map(|v| words(v)).max().unwrap_or(0))
            .sum::<usize>()
            .max(words(&self.catch_all));
        normalized.max(unnormalized + words(&self.catch_all)) + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Label {
    Normal,
    Finding(usize),
}

impl From<Option<usize>> for Label {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Label::Normal, Label::Finding)
    }
}

impl From<Label> for Option<usize> {
    fn from(l: Label) -> Self {
        match l {
            Label::Normal => None,
            Label::Finding(i) => Some(i),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub context_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub labels: Vec<Label>,
    /// Surface variant chosen for each region's finding phrase.
    pub variants: Vec<usize>,
    pub normalized: bool,
}

/// Counter-based seed derivation: record `index` of stream `stream`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_variant(u: f64, bias: f64, n: usize) -> usize {
    if n <= 1 || u < bias {
        0
    } else {
        (1 + ((u - bias) / (1.0 - bias) * (n - 1) as f64) as usize).min(n - 1)
    }
}

pub fn generate_sample(grammar: &ReportGrammar, vocab: &Vocabulary, seed: u64, normalized: bool) -> Result<ReportRecord> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(grammar.regions.len());
    let mut variants = Vec::with_capacity(grammar.regions.len());
    // Every draw happens regardless of outcome so that the normalized and
    // unnormalized corpora share labels seed-for-seed.
    for region in &grammar.regions {
        let abnormal = rng.random_bool(grammar.abnormal_prob);
        let finding = rng.random_range(0..region.findings.len());
        let variant = pick_variant(rng.random::<f64>(), grammar.variant_bias, region.findings[finding].len());
        labels.push(if abnormal { Label::Finding(finding) } else { Label::Normal });
        variants.push(if abnormal { variant } else { 0 });
    }
    render(grammar, vocab, labels, variants, normalized)
}

pub fn render(
    grammar: &ReportGrammar,
    vocab: &Vocabulary,
    labels: Vec<Label>,
    variants: Vec<usize>,
    normalized: bool,
) -> Result<ReportRecord> {
    if labels.len() != grammar.regions.len() || variants.len() != labels.len() {
        return Err(Error::Config("one label and variant per region required".into()));
    }
    let mut context = Vec::with_capacity(labels.len());
    let mut response = Vec::new();
    let mut any_normal = false;
    for ((region, &label), &variant) in grammar.regions.iter().zip(&labels).zip(&variants) {
        let state = match label {
            Label::Normal => state_token(&region.name, None),
            Label::Finding(i) => state_token(&region.name, Some(i)),
        };
        context.push(
            vocab
                .id(&state)
                .ok_or_else(|| Error::Config(format!("state token `{state}` is not in the vocabulary")))?,
        );
        match label {
            Label::Normal => {
                any_normal = true;
                if normalized {
                    response.extend(vocab.tokenize(&region.normal)?);
                }
            }
            Label::Finding(i) => {
                let phrase = region
                    .findings
                    .get(i)
                    .and_then(|f| f.get(variant))
                    .ok_or_else(|| Error::Config(format!("region `{}` has no finding {i} variant {variant}", region.name)))?;
                response.extend(vocab.tokenize(phrase)?);
            }
        }
    }
    if !normalized && any_normal {
        response.extend(vocab.tokenize(&grammar.catch_all)?);
    }
    response.push(vocab.eos_id());
    Ok(ReportRecord {
        context_tokens: context,
        response_tokens: response,
        labels,
        variants,
        normalized,
    })
}

pub fn normalize_report(record: &ReportRecord, grammar: &ReportGrammar, vocab: &Vocabulary) -> Result<ReportRecord> {
    if record.normalized {
        return Ok(record.clone());
    }
    render(grammar, vocab, record.labels.clone(), record.variants.clone(), true)
}

/// Records `0..n` of stream `stream` under `seed`.
pub fn generate_corpus(
    grammar: &ReportGrammar,
    vocab: &Vocabulary,
    seed: u64,
    stream: u64,
    n: usize,
    normalized: bool,
) -> Result<Vec<ReportRecord>> {
    (0..n as u64)
        .map(|i| generate_sample(grammar, vocab, derive_seed(seed, stream, i), normalized))
        .collect()
}

pub fn write_dataset(records: &[ReportRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// One recognized phrase inside a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assertion {
    Region { region: usize, label: Label },
    CatchAll,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedResponse {
    pub assertions: Vec<Assertion>,
    /// Tokens not covered by any recognized phrase.
    pub garbage_tokens: usize,
    pub total_tokens: usize,
}

impl ParsedResponse {
    pub fn garbage_fraction(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.garbage_tokens as f64 / self.total_tokens as f64
        }
    }

    /// Per-region labels asserted, in grammar order; regions never mentioned
    /// are `None`.
    pub fn region_labels(&self, n_regions: usize) -> Vec<Option<Label>> {
        let mut out = vec![None; n_regions];
        for a in &self.assertions {
            if let Assertion::Region { region, label } = *a {
                out[region] = Some(label);
            }
        }
        out
    }

    pub fn findings(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.assertions
            .iter()
            .filter_map(|a| match *a {
                Assertion::Region {
                    region,
                    label: Label::Finding(f),
                } => Some((region, f)),
                _ => None,
            })
            .collect()
    }
}

/// Greedy longest-match parser over every phrase the grammar can emit.
pub struct PhraseMatcher {
    phrases: Vec<(Vec<usize>, Assertion)>,
    eos_id: usize,
}

impl PhraseMatcher {
    pub fn new(grammar: &ReportGrammar, vocab: &Vocabulary) -> Result<Self> {
        let mut phrases = Vec::new();
        for (ri, region) in grammar.regions.iter().enumerate() {
            phrases.push((
                vocab.tokenize(&region.normal)?,
                Assertion::Region {
                    region: ri,
                    label: Label::Normal,
                },
            ));
            for (fi, finding) in region.findings.iter().enumerate() {
                for v in finding {
                    phrases.push((
                        vocab.tokenize(v)?,
                        Assertion::Region {
                            region: ri,
                            label: Label::Finding(fi),
                        },
                    ));
                }
            }
        }
        phrases.push((vocab.tokenize(&grammar.catch_all)?, Assertion::CatchAll));
        // Longest first so the first hit at a position is the longest match.
        phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Ok(PhraseMatcher {
            phrases,
            eos_id: vocab.eos_id(),
        })
    }

    /// Parses up to (not including) the first eos.
    pub fn parse(&self, tokens: &[usize]) -> ParsedResponse {
        let end = tokens.iter().position(|&t| t == self.eos_id).unwrap_or(tokens.len());
        let tokens = &tokens[..end];
        let mut out = ParsedResponse {
            total_tokens: tokens.len(),
            ..Default::default()
        };
        let mut i = 0;
        while i < tokens.len() {
            match self.phrases.iter().find(|(p, _)| tokens[i..].starts_with(p)) {
                Some((p, a)) => {
                    out.assertions.push(*a);
                    i += p.len();
                }
                None => {
                    out.garbage_tokens += 1;
                    i += 1;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_setup() -> (ReportGrammar, Vocabulary) {
        let g = ReportGrammar::default();
        let v = Vocabulary::from_grammar(&g).unwrap();
        (g, v)
    }

    fn small(n_regions: usize, p: f64) -> (ReportGrammar, Vocabulary) {
        let mut g = ReportGrammar::default();
        g.regions.truncate(n_regions);
        g.abnormal_prob = p;
        let v = Vocabulary::from_grammar(&g).unwrap();
        (g, v)
    }

    #[test]
    fn one_normal_region() {
        let (g, v) = small(1, 0.0);
        let r = generate_sample(&g, &v, 7, true).unwrap();
        let mut expected = v.tokenize(&g.regions[0].normal).unwrap();
        expected.push(v.eos_id());
        assert_eq!(r.response_tokens, expected);
    }

    #[test]
    fn all_normal_unnormalized_is_catch_all() {
        let (g, v) = small(3, 0.0);
        let r = generate_sample(&g, &v, 7, false).unwrap();
        let mut expected = v.tokenize(&g.catch_all).unwrap();
        expected.push(v.eos_id());
        assert_eq!(r.response_tokens, expected);
    }

    #[test]
    fn normalized_mentions_each_region_in_order() {
        let (g, v) = small(3, 0.3);
        let r = generate_sample(&g, &v, 42, true).unwrap();
        let parsed = PhraseMatcher::new(&g, &v).unwrap().parse(&r.response_tokens);
        assert_eq!(parsed.garbage_tokens, 0);
        let regions: Vec<usize> = parsed
            .assertions
            .iter()
            .map(|a| match a {
                Assertion::Region { region, .. } => *region,
                Assertion::CatchAll => panic!("catch-all in normalized response"),
            })
            .collect();
        assert_eq!(regions, vec![0, 1, 2]);
    }

    #[test]
    fn unknown_token_is_config_error() {
        let (mut g, v) = small(2, 0.0);
        g.regions[0].normal = "lungs are zzz .".into();
        assert!(matches!(generate_sample(&g, &v, 1, true), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_matches_direct_generation() {
        let (g, v) = small(3, 0.5);
        let labels = vec![Label::Finding(0), Label::Normal, Label::Normal];
        let raw = render(&g, &v, labels.clone(), vec![1, 0, 0], false).unwrap();
        let normalized = normalize_report(&raw, &g, &v).unwrap();
        let direct = render(&g, &v, labels, vec![1, 0, 0], true).unwrap();
        assert_eq!(normalized, direct);
        let mut expected = v.tokenize(&g.regions[0].findings[0][1]).unwrap();
        expected.extend(v.tokenize(&g.regions[1].normal).unwrap());
        expected.extend(v.tokenize(&g.regions[2].normal).unwrap());
        expected.push(v.eos_id());
        assert_eq!(normalized.response_tokens, expected);
        assert_eq!(normalize_report(&normalized, &g, &v).unwrap(), normalized);
    }

    #[test]
    fn all_abnormal_normalization_changes_only_the_flag() {
        let (g, v) = small(3, 1.0);
        let raw = generate_sample(&g, &v, 3, false).unwrap();
        let n = normalize_report(&raw, &g, &v).unwrap();
        assert_eq!(n.response_tokens, raw.response_tokens);
        assert!(n.normalized && !raw.normalized);
    }

    #[test]
    fn dataset_round_trip() {
        let (g, v) = default_setup();
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        write_dataset(&[], &empty).unwrap();
        assert!(read_dataset(&empty).unwrap().is_empty());

        let recs = generate_corpus(&g, &v, 11, 0, 100, true).unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&recs, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), recs);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let (g, v) = default_setup();
        let recs = generate_corpus(&g, &v, 11, 0, 3, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() - 10]).unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn grammar_toml_round_trip() {
        let g = ReportGrammar::default();
        assert_eq!(ReportGrammar::from_toml_str(&g.to_toml_string()).unwrap(), g);
    }

    #[test]
    fn default_response_lengths() {
        let (g, v) = default_setup();
        let recs = generate_corpus(&g, &v, 5, 0, 200, true).unwrap();
        for r in &recs {
            assert!((20..=60).contains(&r.response_tokens.len()), "{}", r.response_tokens.len());
            assert!(r.response_tokens.len() <= g.max_response_len());
        }
    }

    proptest! {
        #[test]
        fn parsed_labels_match(seed in any::<u64>()) {
            let (g, v) = default_setup();
            let r = generate_sample(&g, &v, seed, true).unwrap();
            let parsed = PhraseMatcher::new(&g, &v).unwrap().parse(&r.response_tokens);
            prop_assert_eq!(parsed.garbage_tokens, 0);
            let labels: Vec<Label> = parsed.region_labels(g.regions.len()).into_iter().map(Option::unwrap).collect();
            prop_assert_eq!(labels, r.labels.clone());
            let eos_count = r.response_tokens.iter().filter(|&&t| t == v.eos_id()).count();
            prop_assert_eq!(eos_count, 1);
            prop_assert_eq!(*r.response_tokens.last().unwrap(), v.eos_id());
        }

        #[test]
        fn normalization_idempotent_and_preserves_findings(seed in any::<u64>()) {
            let (g, v) = default_setup();
            let raw = generate_sample(&g, &v, seed, false).unwrap();
            let n1 = normalize_report(&raw, &g, &v).unwrap();
            let n2 = normalize_report(&n1, &g, &v).unwrap();
            prop_assert_eq!(&n1, &n2);
            prop_assert_eq!(&n1.labels, &raw.labels);
            let m = PhraseMatcher::new(&g, &v).unwrap();
            prop_assert_eq!(m.parse(&raw.response_tokens).findings(), m.parse(&n1.response_tokens).findings());
            prop_assert_eq!(n1, generate_sample(&g, &v, seed, true).unwrap());
        }
    }
}

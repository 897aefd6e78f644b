//! Masked-LM training/evaluation examples and their JSON Lines encoding.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::{NormalizedCodeprint, Variant};

pub const SCHEMA: &str = "rinser-corpus/1";
pub const MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Mask ⌈rate·n⌉ uniformly chosen positions.
    PretrainRandom,
    /// Mask only the API token (position 0).
    ApiMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingConfig {
    pub mode: MaskMode,
    pub rate: f64,
    pub seed: u64,
    pub max_tokens: usize,
    /// Replace selected positions 80/10/10 with mask/random/original.
    pub bert_refinement: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mode: MaskMode::PretrainRandom,
            rate: DEFAULT_MASK_RATE,
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            bert_refinement: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Source {
    pub listing: String,
    pub function: String,
    pub address: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub api: String,
    pub variant: Variant,
    pub tokens: Vec<String>,
    pub mask_positions: Vec<usize>,
    pub mask_labels: Vec<String>,
    pub source: Source,
}

impl CorpusExample {
    fn check(&self) -> std::result::Result<(), String> {
        if self.mask_positions.len() != self.mask_labels.len() {
            return Err("mask_positions and mask_labels differ in length".into());
        }
        if self.mask_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err("mask_positions not strictly increasing".into());
        }
        if self.mask_positions.last().is_some_and(|&p| p >= self.tokens.len()) {
            return Err("mask position out of bounds".into());
        }
        Ok(())
    }
}

/// Number of positions masked for a stream of `n` tokens.
pub fn mask_count(rate: f64, n: usize) -> usize {
    // Guard against 0.15 * 20 landing a hair above 3.
    let raw = rate * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Stable 64-bit seed for one example, independent of processing order.
pub fn example_seed(seed: u64, source: &Source) -> u64 {
    crate::seed::mix(
        seed,
        &[
            source.listing.as_bytes(),
            source.function.as_bytes(),
            &source.address.to_le_bytes(),
        ],
    )
}

/// Builds one example. Returns `None` for codeprints without parameters,
/// which never enter the corpus.
pub fn build_example(ncp: &NormalizedCodeprint, source: Source, cfg: &MaskingConfig) -> Result<Option<CorpusExample>> {
    if ncp.param_count == 0 {
        return Ok(None);
    }
    if ncp.tokens.is_empty() {
        return Err(Error::Internal("empty token stream".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(Error::InvalidArgument(format!("mask rate {} outside [0, 1]", cfg.rate)));
    }
    let limit = cfg.max_tokens.max(1);
    let mut tokens: Vec<String> = ncp.tokens.iter().take(limit).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, &source));

    let mut positions: Vec<usize> = match cfg.mode {
        MaskMode::ApiMask => vec![0],
        MaskMode::PretrainRandom => sample(&mut rng, tokens.len(), mask_count(cfg.rate, tokens.len())).into_vec(),
    };
    positions.sort_unstable();
    let labels: Vec<String> = positions.iter().map(|&p| tokens[p].clone()).collect();

    for &p in &positions {
        let replacement = if cfg.bert_refinement {
            let roll: f64 = rng.gen();
            if roll < 0.8 {
                MASK_TOKEN.to_string()
            } else if roll < 0.9 {
                ncp.tokens[rng.gen_range(0..ncp.tokens.len())].clone()
            } else {
                tokens[p].clone()
            }
        } else {
            MASK_TOKEN.to_string()
        };
        tokens[p] = replacement;
    }

    Ok(Some(CorpusExample {
        api: ncp.api_token.clone(),
        variant: ncp.variant,
        tokens,
        mask_positions: positions,
        mask_labels: labels,
        source,
    }))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

/// Writes the schema header followed by one record per example.
pub fn emit_corpus<'a, W: Write>(examples: impl IntoIterator<Item = &'a CorpusExample>, mut out: W) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &Header {
            schema: SCHEMA.to_string(),
        },
    )?;
    out.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus written by [`emit_corpus`]. Errors carry the zero-based
/// record index (the header is record 0).
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusExample>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::Schema {
        record: 0,
        message: "missing schema header".into(),
    })?;
    let header: Header = serde_json::from_str(&header).map_err(|e| Error::Schema {
        record: 0,
        message: e.to_string(),
    })?;
    if header.schema != SCHEMA {
        return Err(Error::Schema {
            record: 0,
            message: format!("unsupported schema `{}`", header.schema),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let record = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: CorpusExample = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record,
            message: e.to_string(),
        })?;
        ex.check().map_err(|message| Error::Schema { record, message })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ncp(n: usize) -> NormalizedCodeprint {
        let mut tokens = vec!["api".to_string()];
        tokens.extend((1..n).map(|i| format!("t{i}")));
        NormalizedCodeprint {
            api_token: "api".into(),
            tokens,
            variant: Variant::Stripped,
            param_count: 1,
        }
    }

    fn source() -> Source {
        Source {
            listing: "l".into(),
            function: "f".into(),
            address: 0x401000,
        }
    }

    #[test]
    fn fifteen_percent_of_twenty_is_three() {
        assert_eq!(mask_count(0.15, 20), 3);
        let cfg = MaskingConfig {
            seed: 7,
            ..Default::default()
        };
        let a = build_example(&ncp(20), source(), &cfg).unwrap().unwrap();
        let b = build_example(&ncp(20), source(), &cfg).unwrap().unwrap();
        assert_eq!(a.mask_positions.len(), 3);
        assert_eq!(a, b);
        for (&p, label) in a.mask_positions.iter().zip(&a.mask_labels) {
            assert_eq!(a.tokens[p], MASK_TOKEN);
            assert_eq!(label, &ncp(20).tokens[p]);
        }
    }

    #[test]
    fn api_mask_and_zero_rate() {
        let cfg = MaskingConfig {
            mode: MaskMode::ApiMask,
            ..Default::default()
        };
        let ex = build_example(&ncp(5), source(), &cfg).unwrap().unwrap();
        assert_eq!(ex.mask_positions, vec![0]);
        assert_eq!(ex.mask_labels, vec!["api"]);
        let cfg = MaskingConfig {
            rate: 0.0,
            ..Default::default()
        };
        let ex = build_example(&ncp(5), source(), &cfg).unwrap().unwrap();
        assert!(ex.mask_positions.is_empty());
        assert!(!ex.tokens.contains(&MASK_TOKEN.to_string()));
    }

    #[test]
    fn zero_parameter_codeprints_are_filtered() {
        let mut n = ncp(1);
        n.param_count = 0;
        assert!(build_example(&n, source(), &MaskingConfig::default()).unwrap().is_none());
    }

    #[test]
    fn truncation_keeps_the_api_token() {
        let cfg = MaskingConfig {
            mode: MaskMode::ApiMask,
            max_tokens: 4,
            ..Default::default()
        };
        let ex = build_example(&ncp(600), source(), &cfg).unwrap().unwrap();
        assert_eq!(ex.tokens.len(), 4);
        assert_eq!(ex.mask_labels, vec!["api"]);
        let ex = build_example(&ncp(600), source(), &MaskingConfig::default()).unwrap().unwrap();
        assert_eq!(ex.tokens.len(), DEFAULT_MAX_TOKENS);
        assert_eq!(ex.mask_positions.len(), mask_count(0.15, 512));
    }

    #[test]
    fn refinement_keeps_labels() {
        let cfg = MaskingConfig {
            rate: 1.0,
            bert_refinement: true,
            seed: 3,
            ..Default::default()
        };
        let ex = build_example(&ncp(200), source(), &cfg).unwrap().unwrap();
        let masked = ex.tokens.iter().filter(|t| *t == MASK_TOKEN).count();
        assert_eq!(ex.mask_positions.len(), 200);
        assert!(masked > 120 && masked < 190, "{masked}");
        assert_eq!(ex.mask_labels, ncp(200).tokens);
    }

    #[test]
    fn empty_stream_is_header_only() {
        let mut buf = Vec::new();
        emit_corpus(std::iter::empty(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"schema\":\"rinser-corpus/1\"}\n");
        assert!(read_corpus(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_reports_record_index() {
        let exs: Vec<CorpusExample> = (0..3)
            .map(|i| {
                let mut s = source();
                s.address = i;
                build_example(&ncp(10), s, &MaskingConfig::default()).unwrap().unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        emit_corpus(&exs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 20];
        match read_corpus(cut.as_bytes()) {
            Err(Error::Schema { record, .. }) => assert_eq!(record, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_corpus("{\"schema\":\"other/1\"}\n".as_bytes()), Err(Error::Schema { record: 0, .. })));
        assert!(matches!(read_corpus("".as_bytes()), Err(Error::Schema { record: 0, .. })));
    }

    #[test]
    fn schema_violations_are_rejected() {
        let mut ex = build_example(&ncp(10), source(), &MaskingConfig::default()).unwrap().unwrap();
        ex.mask_positions = vec![9, 2];
        ex.mask_labels = vec!["a".into(), "b".into()];
        let mut buf = Vec::new();
        emit_corpus([&ex], &mut buf).unwrap();
        assert!(matches!(read_corpus(&buf[..]), Err(Error::Schema { record: 1, .. })));
    }
}

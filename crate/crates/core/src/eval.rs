//! Scoring of API-name predictions: exact match, per-parameter-count rows,
//! per-API (macro) accuracy, embedding-group (context-aware) accuracy, and
//! intent tagging of recovered APIs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GROUP_THRESHOLD: f64 = 0.91;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: String,
    /// Ranked `(api, score)` pairs, best first.
    pub topk: Vec<(String, f64)>,
    pub param_count: usize,
    pub variant: String,
}

impl PredictionRecord {
    pub fn top1(&self) -> &str {
        &self.topk[0].0
    }

    pub fn is_exact(&self) -> bool {
        self.top1().eq_ignore_ascii_case(&self.truth)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.topk.is_empty() {
            return Err("empty ranked prediction list".into());
        }
        if self.topk.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err("scores are not non-increasing".into());
        }
        Ok(())
    }
}

/// Reads a predictions JSON Lines file, validating each record.
pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (record, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| Error::Schema { record, message })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub param_count: usize,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Distinct ground-truth APIs in the row.
    pub unique_apis: usize,
    /// Distinct APIs predicted correctly at least once.
    pub correct_apis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiAccuracy {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub correct_apis: usize,
    pub rows: Vec<ParamCountRow>,
    pub per_api: BTreeMap<String, ApiAccuracy>,
    pub macro_accuracy: f64,
    /// Misses where prediction and truth differ only by an A/W suffix.
    pub encoding_suffix_misses: usize,
    pub context_aware_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `CreateFileA` vs `CreateFileW` and the like.
pub fn differs_only_by_encoding(a: &str, b: &str) -> bool {
    let a = a.to_ascii_lowercase();
    let b = b.to_ascii_lowercase();
    if a == b || a.len() != b.len() || a.len() < 2 {
        return false;
    }
    let (sa, sb) = (a.as_bytes()[a.len() - 1], b.as_bytes()[b.len() - 1]);
    a[..a.len() - 1] == b[..b.len() - 1] && matches!((sa, sb), (b'a', b'w') | (b'w', b'a'))
}

fn per_api(records: &[PredictionRecord]) -> BTreeMap<String, ApiAccuracy> {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.truth.to_ascii_lowercase()).or_default();
        e.0 += 1;
        e.1 += r.is_exact() as usize;
    }
    tally
        .into_iter()
        .map(|(api, (samples, correct))| {
            (
                api,
                ApiAccuracy {
                    samples,
                    correct,
                    accuracy: ratio(correct, samples),
                },
            )
        })
        .collect()
}

/// Top-1 exact-match scoring.
pub fn score_exact(records: &[PredictionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no prediction records".into()));
    }
    let mut rows: BTreeMap<usize, (usize, usize, BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    let mut correct_apis = BTreeSet::new();
    let mut suffix = 0;
    for r in records {
        let truth = r.truth.to_ascii_lowercase();
        let row = rows.entry(r.param_count).or_default();
        row.0 += 1;
        row.2.insert(truth.clone());
        if r.is_exact() {
            row.1 += 1;
            row.3.insert(truth.clone());
            correct_apis.insert(truth);
        } else if differs_only_by_encoding(r.top1(), &r.truth) {
            suffix += 1;
        }
    }
    let rows: Vec<ParamCountRow> = rows
        .into_iter()
        .map(|(param_count, (samples, correct, uniq, ok))| ParamCountRow {
            param_count,
            samples,
            correct,
            accuracy: ratio(correct, samples),
            unique_apis: uniq.len(),
            correct_apis: ok.len(),
        })
        .collect();
    let correct: usize = rows.iter().map(|r| r.correct).sum();
    let per_api = per_api(records);
    let macro_accuracy = per_api.values().map(|a| a.accuracy).sum::<f64>() / per_api.len() as f64;
    Ok(EvalReport {
        samples: records.len(),
        correct,
        accuracy: ratio(correct, records.len()),
        correct_apis: correct_apis.len(),
        rows,
        per_api,
        macro_accuracy,
        encoding_suffix_misses: suffix,
        context_aware_accuracy: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub per_api: BTreeMap<String, f64>,
    /// Counts of APIs per accuracy decile; the last bucket includes 1.0.
    pub histogram: [usize; 10],
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
}

/// Mean of per-API accuracies alongside the pooled (micro) accuracy.
pub fn macro_average(records: &[PredictionRecord]) -> Result<MacroReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no prediction records".into()));
    }
    let per_api: BTreeMap<String, f64> = per_api(records).into_iter().map(|(k, v)| (k, v.accuracy)).collect();
    let mut histogram = [0usize; 10];
    for &acc in per_api.values() {
        histogram[((acc * 10.0).floor() as usize).min(9)] += 1;
    }
    let macro_accuracy = per_api.values().sum::<f64>() / per_api.len() as f64;
    let micro_accuracy = ratio(records.iter().filter(|r| r.is_exact()).count(), records.len());
    Ok(MacroReport {
        per_api,
        histogram,
        macro_accuracy,
        micro_accuracy,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextGroups {
    pub threshold: f64,
    /// API -> other APIs at cosine >= threshold. APIs with no neighbours are absent.
    pub groups: BTreeMap<String, BTreeSet<String>>,
}

impl ContextGroups {
    pub fn contains(&self, key: &str, member: &str) -> bool {
        self.groups
            .get(&key.to_ascii_lowercase())
            .is_some_and(|g| g.contains(&member.to_ascii_lowercase()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub api: String,
    pub vec: Vec<f64>,
}

pub fn read_embeddings<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (record, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record,
            message: e.to_string(),
        })?;
        out.insert(rec.api, rec.vec);
    }
    Ok(out)
}

/// Groups APIs whose embedding cosine similarity reaches `threshold`.
pub fn build_context_groups(embeddings: &BTreeMap<String, Vec<f64>>, threshold: f64) -> Result<ContextGroups> {
    let mut dim = None;
    let mut items: Vec<(String, &[f64])> = Vec::with_capacity(embeddings.len());
    for (api, v) in embeddings {
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(Error::InvalidArgument(format!("embedding for `{api}` has dimension {}", v.len())));
        }
        if v.iter().all(|x| *x == 0.0) || v.is_empty() {
            return Err(Error::InvalidArgument(format!("zero embedding vector for `{api}`")));
        }
        items.push((api.to_ascii_lowercase(), v));
    }
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if cosine(items[i].1, items[j].1) >= threshold {
                groups.entry(items[i].0.clone()).or_default().insert(items[j].0.clone());
                groups.entry(items[j].0.clone()).or_default().insert(items[i].0.clone());
            }
        }
    }
    Ok(ContextGroups { threshold, groups })
}

/// Accuracy where a miss still counts when the truth is in the top-1
/// prediction's context group.
pub fn score_context_aware(records: &[PredictionRecord], groups: &ContextGroups) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no prediction records".into()));
    }
    let correct = records
        .iter()
        .filter(|r| r.is_exact() || groups.contains(r.top1(), &r.truth))
        .count();
    Ok(ratio(correct, records.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intent {
    Enumeration,
    Injection,
    Evasion,
    Spying,
    Network,
    AntiDebugging,
    Ransomware,
    Dropper,
    Helper,
}

impl Intent {
    pub const ALL: [Intent; 9] = [
        Intent::Enumeration,
        Intent::Injection,
        Intent::Evasion,
        Intent::Spying,
        Intent::Network,
        Intent::AntiDebugging,
        Intent::Ransomware,
        Intent::Dropper,
        Intent::Helper,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Intent::Enumeration => "enumeration",
            Intent::Injection => "injection",
            Intent::Evasion => "evasion",
            Intent::Spying => "spying",
            Intent::Network => "network",
            Intent::AntiDebugging => "anti-debugging",
            Intent::Ransomware => "ransomware",
            Intent::Dropper => "dropper",
            Intent::Helper => "helper",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Intent::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown intent `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntentCatalog {
    entries: BTreeMap<String, Intent>,
}

impl IntentCatalog {
    /// Parses `ApiName:intent` lines (`#` comments allowed).
    pub fn parse(text: &str) -> Result<IntentCatalog> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Catalog { line: idx + 1, message };
            let (api, intent) = line.split_once(':').ok_or_else(|| err("expected `ApiName:intent`".into()))?;
            let api = api.trim();
            if api.is_empty() {
                return Err(err("empty API name".into()));
            }
            let intent: Intent = intent.parse().map_err(|e: Error| err(e.to_string()))?;
            if entries.insert(api.to_ascii_lowercase(), intent).is_some() {
                return Err(err(format!("duplicate API `{api}`")));
            }
        }
        Ok(IntentCatalog { entries })
    }

    pub fn get(&self, api: &str) -> Option<Intent> {
        self.entries.get(&api.to_ascii_lowercase()).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IntentReport {
    pub counts: BTreeMap<Intent, usize>,
    pub apis: BTreeMap<Intent, BTreeSet<String>>,
    pub unknown: BTreeSet<String>,
}

/// Tags each distinct API with its intent.
pub fn tag_intents<'a>(apis: impl IntoIterator<Item = &'a str>, catalog: &IntentCatalog) -> IntentReport {
    let mut report = IntentReport::default();
    let distinct: BTreeSet<String> = apis.into_iter().map(str::to_ascii_lowercase).collect();
    for api in distinct {
        match catalog.get(&api) {
            Some(intent) => {
                *report.counts.entry(intent).or_default() += 1;
                report.apis.entry(intent).or_default().insert(api);
            }
            None => {
                report.unknown.insert(api);
            }
        }
    }
    report
}

/// Percentage truncated (not rounded) to two decimals, the way published
/// accuracy tables report them: 821,895 / 991,561 -> "82.88".
pub fn format_percent(accuracy: f64) -> String {
    let hundredths = (accuracy * 10_000.0 + 1e-6).floor();
    format!("{:.2}", hundredths / 100.0)
}

/// Human-readable table in the layout of the per-parameter-count breakdown.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>9} {:>8}", "#params", "samples", "correct", "accuracy", "APIs");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:>8} {:>10} {:>10} {:>8}% {:>8}",
            row.param_count,
            row.samples,
            row.correct,
            format_percent(row.accuracy),
            row.unique_apis
        );
    }
    let _ = writeln!(
        out,
        "{:>8} {:>10} {:>10} {:>8}% {:>8}",
        "total",
        report.samples,
        report.correct,
        format_percent(report.accuracy),
        report.per_api.len()
    );
    let _ = writeln!(out, "macro accuracy: {}%", format_percent(report.macro_accuracy));
    if let Some(ctx) = report.context_aware_accuracy {
        let _ = writeln!(out, "context-aware accuracy: {}%", format_percent(ctx));
    }
    let _ = writeln!(out, "A/W encoding misses: {}", report.encoding_suffix_misses);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(truth: &str, pred: &str, params: usize) -> PredictionRecord {
        PredictionRecord {
            truth: truth.into(),
            topk: vec![(pred.into(), 0.9), ("other".into(), 0.05)],
            param_count: params,
            variant: "stripped".into(),
        }
    }

    #[test]
    fn exact_scoring() {
        let all = vec![rec("send", "send", 4), rec("recv", "recv", 4)];
        assert_eq!(score_exact(&all).unwrap().accuracy, 1.0);

        let mixed = vec![rec("send", "send", 4), rec("recv", "send", 4), rec("socket", "socket", 3)];
        let r = score_exact(&mixed).unwrap();
        assert_eq!((r.correct, r.samples), (2, 3));
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows.iter().map(|x| x.correct).sum::<usize>(), r.correct);
        assert_eq!(r.correct_apis, 2);
        assert!(score_exact(&[]).is_err());
    }

    #[test]
    fn headline_total_formats_to_two_decimals() {
        assert_eq!(format_percent(821_895.0 / 991_561.0), "82.88");
        assert_eq!(format_percent(0.29), "29.00");
        assert_eq!(format_percent(1.0), "100.00");
        assert_eq!(format_percent(2.0 / 3.0), "66.66");
    }

    #[test]
    fn encoding_pairs_counted_separately() {
        let r = score_exact(&[rec("CreateFileW", "createfilea", 7), rec("send", "recv", 4)]).unwrap();
        assert_eq!(r.correct, 0);
        assert_eq!(r.encoding_suffix_misses, 1);
        assert!(!differs_only_by_encoding("send", "send"));
        assert!(!differs_only_by_encoding("loadimagew", "loadimage"));
    }

    #[test]
    fn macro_vs_micro() {
        let mut recs = vec![rec("a", "a", 1); 3];
        recs.push(rec("b", "a", 1));
        let m = macro_average(&recs).unwrap();
        assert_eq!(m.macro_accuracy, 0.5);
        assert_eq!(m.micro_accuracy, 0.75);
        assert_eq!(m.histogram[0], 1);
        assert_eq!(m.histogram[9], 1);

        let single = vec![rec("a", "a", 1), rec("a", "b", 1), rec("a", "a", 1)];
        let m = macro_average(&single).unwrap();
        assert_eq!(m.macro_accuracy, m.micro_accuracy);
    }

    #[test]
    fn groups_and_context_aware() {
        let emb = BTreeMap::from([
            ("send".to_string(), vec![1.0, 0.1]),
            ("recv".to_string(), vec![1.0, 0.12]),
            ("bitblt".to_string(), vec![0.0, 1.0]),
        ]);
        let g = build_context_groups(&emb, DEFAULT_GROUP_THRESHOLD).unwrap();
        assert!(g.contains("send", "recv"));
        assert!(g.contains("recv", "send"));
        assert!(!g.groups.contains_key("bitblt"));
        let recs = vec![rec("recv", "send", 4), rec("bitblt", "send", 9)];
        assert_eq!(score_context_aware(&recs, &g).unwrap(), 0.5);
        assert_eq!(score_exact(&recs).unwrap().accuracy, 0.0);
    }

    #[test]
    fn zero_and_mismatched_vectors_are_errors() {
        let zero = BTreeMap::from([("a".to_string(), vec![0.0, 0.0]), ("b".to_string(), vec![1.0, 0.0])]);
        let err = build_context_groups(&zero, 0.91).unwrap_err();
        assert!(err.to_string().contains("`a`"));
        let dims = BTreeMap::from([("a".to_string(), vec![1.0]), ("b".to_string(), vec![1.0, 0.0])]);
        assert!(build_context_groups(&dims, 0.91).is_err());
        let orth = BTreeMap::from([("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])]);
        assert!(build_context_groups(&orth, 0.91).unwrap().groups.is_empty());
    }

    #[test]
    fn intents() {
        let cat = IntentCatalog::parse("send:network\nsocket:network\nBitBlt:spying\n").unwrap();
        let r = tag_intents(["send", "socket", "BitBlt"], &cat);
        assert_eq!(r.counts[&Intent::Network], 2);
        assert_eq!(r.counts[&Intent::Spying], 1);
        assert!(r.unknown.is_empty());
        let r = tag_intents(["GetTickCount"], &cat);
        assert!(r.counts.is_empty());
        assert!(r.unknown.contains("gettickcount"));
        assert_eq!(tag_intents([], &cat), IntentReport::default());
        assert!(IntentCatalog::parse("x:malicious\n").is_err());
    }

    #[test]
    fn prediction_file_validation() {
        let good = r#"{"truth":"send","topk":[["send",0.9],["recv",0.1]],"param_count":4,"variant":"stripped"}"#;
        assert_eq!(read_predictions(good.as_bytes()).unwrap().len(), 1);
        let bad = r#"{"truth":"send","topk":[["send",0.1],["recv",0.9]],"param_count":4,"variant":"stripped"}"#;
        assert!(matches!(read_predictions(bad.as_bytes()), Err(Error::Schema { record: 0, .. })));
        let empty = r#"{"truth":"send","topk":[],"param_count":4,"variant":"stripped"}"#;
        assert!(read_predictions(empty.as_bytes()).is_err());
    }
}

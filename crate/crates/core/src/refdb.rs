//! API reference database: modal parameter count and names per API, with
//! confidence scores, validated against a documented catalog.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::ApiCodeprint;
use crate::listing::ApiCatalog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefDbEntry {
    pub api: String,
    #[serde(rename = "count")]
    pub modal_param_count: usize,
    /// Modal name tuple in declaration order (reverse of push order).
    #[serde(rename = "names")]
    pub modal_param_names: Vec<String>,
    #[serde(rename = "conf_count")]
    pub confidence_count: f64,
    #[serde(rename = "conf_names")]
    pub confidence_names: f64,
    #[serde(rename = "n")]
    pub observations: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ConfidenceSummary {
    pub mean_count: f64,
    pub std_count: f64,
    pub mean_names: f64,
    pub std_names: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefDb {
    pub entries: BTreeMap<String, RefDbEntry>,
    pub summary: ConfidenceSummary,
}

/// Most frequent key; ties go to the smallest key.
fn mode<K: Ord + Clone>(counts: &BTreeMap<K, usize>) -> (K, usize) {
    let mut best: Option<(&K, usize)> = None;
    for (k, &n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((k, n));
        }
    }
    let (k, n) = best.expect("mode of empty distribution");
    (k.clone(), n)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn build_refdb(cps: &[ApiCodeprint]) -> RefDb {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut names: BTreeMap<&str, BTreeMap<Vec<String>, usize>> = BTreeMap::new();
    for cp in cps {
        *counts.entry(&cp.api_name).or_default().entry(cp.params.len()).or_default() += 1;
        let tuple: Vec<String> = cp
            .params
            .iter()
            .rev()
            .map(|p| p.name.clone().unwrap_or_default())
            .collect();
        *names.entry(&cp.api_name).or_default().entry(tuple).or_default() += 1;
    }

    let mut entries = BTreeMap::new();
    for (api, count_dist) in &counts {
        let observations: usize = count_dist.values().sum();
        let (modal_count, count_freq) = mode(count_dist);
        let (modal_names, names_freq) = mode(&names[api]);
        entries.insert(
            api.to_string(),
            RefDbEntry {
                api: api.to_string(),
                modal_param_count: modal_count,
                modal_param_names: modal_names,
                confidence_count: count_freq as f64 / observations as f64,
                confidence_names: names_freq as f64 / observations as f64,
                observations,
            },
        );
    }
    let summary = summarize(&entries);
    RefDb { entries, summary }
}

fn summarize(entries: &BTreeMap<String, RefDbEntry>) -> ConfidenceSummary {
    let cc: Vec<f64> = entries.values().map(|e| e.confidence_count).collect();
    let cn: Vec<f64> = entries.values().map(|e| e.confidence_names).collect();
    let (mean_count, std_count) = mean_std(&cc);
    let (mean_names, std_names) = mean_std(&cn);
    ConfidenceSummary {
        mean_count,
        std_count,
        mean_names,
        std_names,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    /// APIs present in the catalog and compared.
    pub checked: usize,
    pub count_matches: usize,
    pub name_matches: usize,
    pub count_accuracy: f64,
    pub name_accuracy: f64,
    /// APIs absent from the catalog (not counted).
    pub missing: Vec<String>,
}

/// Compares each entry's modal count and names with the catalog.
pub fn validate_refdb(db: &RefDb, catalog: &ApiCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    for entry in db.entries.values() {
        let Some(doc) = catalog.get(&entry.api) else {
            report.missing.push(entry.api.clone());
            continue;
        };
        report.checked += 1;
        if entry.modal_param_count == doc.params.len() {
            report.count_matches += 1;
        }
        let same_names = entry.modal_param_names.len() == doc.params.len()
            && entry
                .modal_param_names
                .iter()
                .zip(&doc.params)
                .all(|(a, b)| a.eq_ignore_ascii_case(b));
        if same_names {
            report.name_matches += 1;
        }
    }
    if report.checked > 0 {
        report.count_accuracy = report.count_matches as f64 / report.checked as f64;
        report.name_accuracy = report.name_matches as f64 / report.checked as f64;
    }
    report
}

pub fn write_refdb<W: Write>(db: &RefDb, mut out: W) -> Result<()> {
    for entry in db.entries.values() {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_refdb<R: BufRead>(input: R) -> Result<RefDb> {
    let mut entries = BTreeMap::new();
    for (record, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RefDbEntry = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record,
            message: e.to_string(),
        })?;
        entries.insert(entry.api.clone(), entry);
    }
    let summary = summarize(&entries);
    Ok(RefDb { entries, summary })
}

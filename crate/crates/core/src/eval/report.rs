use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How a metric is formatted and which direction is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Lower is better; four decimals.
    Loss,
    /// A fraction in `[0, 1]`, shown as a percentage with one decimal;
    /// higher is better.
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    /// Digest of the corpus the metric was measured on.
    pub corpus: String,
    pub model: String,
    pub metric: String,
    pub kind: MetricKind,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(corpus: &str, model: &str, metric: &str, kind: MetricKind, value: f64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            corpus: corpus.into(),
            model: model.into(),
            metric: metric.into(),
            kind,
            value,
        }
    }

    pub fn formatted(&self) -> String {
        match self.kind {
            MetricKind::Loss => format!("{:.4}", self.value),
            MetricKind::Accuracy => format!("{:.1}", self.value * 100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

pub const CSV_HEADER: &str = "schema_version,model,metric,kind,value";

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Comparison table with one row per model and one column per metric, in
/// order of first appearance. Rows after the first are flagged where they
/// beat the first row.
pub fn render_report(records: &[MetricRecord]) -> Result<Report> {
    if let Some(r) = records
        .iter()
        .find(|r| r.schema_version != records[0].schema_version)
    {
        return Err(CoreError::Report(format!(
            "mixed schema versions {} and {}",
            records[0].schema_version, r.schema_version
        )));
    }
    if let Some(r) = records.iter().find(|r| r.corpus != records[0].corpus) {
        return Err(CoreError::Report(format!(
            "records come from different corpora ({} vs {})",
            records[0].corpus, r.corpus
        )));
    }
    let models = first_seen(records.iter().map(|r| r.model.as_str()));
    let metrics = first_seen(records.iter().map(|r| r.metric.as_str()));
    let find = |m: &str, k: &str| records.iter().find(|r| r.model == m && r.metric == k);

    let mut table: Vec<Vec<String>> = vec![std::iter::once("model".to_string())
        .chain(metrics.iter().map(|m| m.to_string()))
        .chain(std::iter::once("flags".to_string()))
        .collect()];
    for (i, m) in models.iter().enumerate() {
        let mut row = vec![m.to_string()];
        let mut flags = Vec::new();
        for k in &metrics {
            let cell = find(m, k);
            row.push(
                cell.map(MetricRecord::formatted)
                    .unwrap_or_else(|| "-".into()),
            );
            if let (Some(c), Some(base)) = (cell, find(models[0], k).filter(|_| i > 0)) {
                match c.kind {
                    MetricKind::Loss if c.value < base.value => flags.push(format!("lower {k}")),
                    MetricKind::Accuracy if c.value > base.value => {
                        flags.push(format!("higher {k}"))
                    }
                    _ => {}
                }
            }
        }
        row.push(flags.join("; "));
        table.push(row);
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            table
                .iter()
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for m in &models {
        for k in &metrics {
            if let Some(r) = find(m, k) {
                let kind = match r.kind {
                    MetricKind::Loss => "loss",
                    MetricKind::Accuracy => "accuracy",
                };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.schema_version,
                    m,
                    k,
                    kind,
                    r.formatted()
                );
            }
        }
    }
    Ok(Report { text, csv })
}

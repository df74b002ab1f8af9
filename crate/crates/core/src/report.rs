//! Per-run result rows and their per-method aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub split: String,
    pub accuracy: f64,
    /// `accuracy` minus the best single backbone's accuracy on the same split.
    pub delta_vs_best_single: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_gflops: Option<f64>,
}

impl ReportRow {
    pub fn new(
        dataset: &str,
        method: &str,
        split: &str,
        accuracy: f64,
        best_single: f64,
        avg_gflops: Option<f64>,
    ) -> Self {
        ReportRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            split: split.to_string(),
            accuracy,
            delta_vs_best_single: accuracy - best_single,
            avg_gflops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean_delta: f64,
    pub min_delta: f64,
    pub max_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<MethodSummary>,
}

/// Sorts rows by (dataset, method, split) and aggregates Δ per method.
pub fn build_report(mut rows: Vec<ReportRow>) -> Report {
    rows.sort_by(|a, b| {
        (&a.dataset, &a.method, &a.split)
            .cmp(&(&b.dataset, &b.method, &b.split))
            .then(a.accuracy.total_cmp(&b.accuracy))
    });
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(&r.method).or_default().push(r.delta_vs_best_single);
    }
    let summary = by_method
        .into_iter()
        .map(|(method, d)| MethodSummary {
            method: method.to_string(),
            runs: d.len(),
            mean_delta: d.iter().sum::<f64>() / d.len() as f64,
            min_delta: d.iter().copied().fold(f64::INFINITY, f64::min),
            max_delta: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Report { rows, summary }
}

fn opt(v: Option<f64>) -> String {
    v.map(|g| g.to_string()).unwrap_or_default()
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method,split,accuracy,delta_vs_best_single,avg_gflops\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.dataset,
                r.method,
                r.split,
                r.accuracy,
                r.delta_vs_best_single,
                opt(r.avg_gflops)
            );
        }
        out.push_str("\nmethod,runs,mean_delta,min_delta,max_delta\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.method, s.runs, s.mean_delta, s.min_delta, s.max_delta
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let mut out = String::from("| dataset | method | split | accuracy | Δ | avg GFLOPs |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                r.dataset,
                r.method,
                r.split,
                pct(r.accuracy),
                pct(r.delta_vs_best_single),
                r.avg_gflops.map(|g| format!("{g:.1}")).unwrap_or_default()
            );
        }
        out.push_str("\n| method | runs | mean Δ | min Δ | max Δ |\n|---|---|---|---|---|\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                s.method,
                s.runs,
                pct(s.mean_delta),
                pct(s.min_delta),
                pct(s.max_delta)
            );
        }
        out
    }
}

//! Metrics and comparison reports, and their JSON / Markdown / CSV forms.

use std::fmt::Write as _;

use cbir_core::metrics::{relative_change_pct, LatencySummary, QualityMetrics};
use cbir_core::vecindex::IndexKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::LatencySample;
use crate::error::{Error, Result};

/// How the reported numbers are defined; carried in every report.
pub const DEFINITIONS: &[&str] = &[
    "relevance: any gallery image of the query's product",
    "metric basket: recall@1, recall@5, recall@10, mAP@10, MRR; MRR counts ranks 1..10",
    "AP@10 = sum_{i<=10} P(i) rel(i) / min(R, 10), R = gallery images of the product",
    "latency: single-threaded, monotonic clock, nearest-rank percentiles of raw samples",
    "headline latency delta uses p50 of total per-query time",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub route: LatencySummary,
    pub search: LatencySummary,
    pub merge: LatencySummary,
    pub total: LatencySummary,
}

impl StageLatency {
    pub fn from_samples(samples: &[LatencySample]) -> Self {
        let col = |f: fn(&LatencySample) -> u64| {
            LatencySummary::from_samples(&samples.iter().map(f).collect::<Vec<_>>())
        };
        StageLatency {
            route: col(|s| s.route_ns),
            search: col(|s| s.search_ns),
            merge: col(|s| s.merge_ns),
            total: col(|s| s.total_ns),
        }
    }

    /// `|p50(route) + p50(search) + p50(merge) − p50(total)| / p50(total)`.
    pub fn decomposition_gap(&self) -> Option<f64> {
        if self.total.p50 == 0 {
            return None;
        }
        let sum = (self.route.p50 + self.search.p50 + self.merge.p50) as f64;
        let total = self.total.p50 as f64;
        Some((sum - total).abs() / total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// "baseline" or "cascade".
    pub engine: String,
    pub index_kind: IndexKind,
    pub k: usize,
    pub route_top_m: Option<usize>,
    pub quality: QualityMetrics,
    #[serde(default)]
    pub confuser_quality: Option<QualityMetrics>,
    #[serde(default)]
    pub latency_ns: Option<StageLatency>,
    #[serde(default)]
    pub throughput_qps: Option<f64>,
    #[serde(default)]
    pub latency_samples: Vec<LatencySample>,
    pub fingerprint: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub definitions: Vec<String>,
}

impl MetricsReport {
    /// Range and ordering checks on the quality block.
    pub fn validate(&self) -> Result<()> {
        let q = &self.quality;
        let mut vals: Vec<(&str, f64)> = q.basket().to_vec();
        if let Some(r) = q.routing_accuracy {
            vals.push(("routing_accuracy", r));
        }
        for (name, v) in vals {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(q.recall_at_1 <= q.recall_at_5 && q.recall_at_5 <= q.recall_at_10) {
            return Err(Error::Format("recall@k must be non-decreasing in k".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricChange {
    pub metric: String,
    pub baseline: f64,
    pub cascade: f64,
    /// `None` when the baseline value is zero.
    pub change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub fingerprint: String,
    pub k: usize,
    pub metrics: Vec<MetricChange>,
    /// Mean over metrics with a defined change.
    pub mean_improvement_pct: Option<f64>,
    /// Metrics excluded from the mean because the baseline was zero.
    pub undefined_metrics: Vec<String>,
    pub baseline_p50_total_ns: Option<u64>,
    pub cascade_p50_total_ns: Option<u64>,
    pub latency_delta_pct: Option<f64>,
    pub definitions: Vec<String>,
}

pub fn compare(baseline: &MetricsReport, cascade: &MetricsReport) -> Result<ComparisonReport> {
    if baseline.fingerprint != cascade.fingerprint {
        return Err(cbir_core::Error::Incomparable(format!(
            "dataset fingerprints differ: {} vs {}",
            baseline.fingerprint, cascade.fingerprint
        ))
        .into());
    }
    if baseline.k != cascade.k {
        return Err(cbir_core::Error::Incomparable(format!(
            "k differs: {} vs {}",
            baseline.k, cascade.k
        ))
        .into());
    }
    let mut metrics = Vec::new();
    let mut undefined = Vec::new();
    let mut defined = Vec::new();
    for ((name, b), (_, c)) in baseline.quality.basket().into_iter().zip(cascade.quality.basket()) {
        let change = relative_change_pct(b, c);
        match change {
            Some(x) => defined.push(x),
            None => undefined.push(name.to_string()),
        }
        metrics.push(MetricChange {
            metric: name.to_string(),
            baseline: b,
            cascade: c,
            change_pct: change,
        });
    }
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let bp = baseline.latency_ns.map(|l| l.total.p50);
    let cp = cascade.latency_ns.map(|l| l.total.p50);
    let latency_delta_pct = match (bp, cp) {
        (Some(b), Some(c)) => relative_change_pct(b as f64, c as f64),
        _ => None,
    };
    Ok(ComparisonReport {
        fingerprint: baseline.fingerprint.clone(),
        k: baseline.k,
        metrics,
        mean_improvement_pct: mean,
        undefined_metrics: undefined,
        baseline_p50_total_ns: bp,
        cascade_p50_total_ns: cp,
        latency_delta_pct,
        definitions: DEFINITIONS.iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_u64() || n.is_i64()) => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round_sig9(f)))
            .map(Value::Number)
            .unwrap_or(Value::Null),
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        // serde_json's default map is ordered by key
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

/// Sorted keys, floats at 9 significant digits, two-space indentation,
/// trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = canonicalize(serde_json::to_value(value)?);
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// (metric, value) rows shown in the Markdown rendering of a report.
pub fn report_rows(r: &MetricsReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = r
        .quality
        .basket()
        .iter()
        .map(|(n, v)| (n.to_string(), format!("{v:.4}")))
        .collect();
    if let Some(a) = r.quality.routing_accuracy {
        rows.push(("routing_accuracy".into(), format!("{a:.4}")));
    }
    if let Some(c) = &r.confuser_quality {
        rows.push(("confuser_recall@1".into(), format!("{:.4}", c.recall_at_1)));
    }
    if let Some(l) = &r.latency_ns {
        for (stage, s) in [("route", &l.route), ("search", &l.search), ("merge", &l.merge), ("total", &l.total)] {
            rows.push((format!("{stage}_p50_ns"), s.p50.to_string()));
        }
        rows.push(("total_p95_ns".into(), l.total.p95.to_string()));
        rows.push(("total_p99_ns".into(), l.total.p99.to_string()));
    }
    if let Some(q) = r.throughput_qps {
        rows.push(("throughput_qps".into(), format!("{q:.1}")));
    }
    rows
}

/// Rows of the Markdown comparison table (metric, baseline, cascade, change).
pub fn comparison_rows(c: &ComparisonReport) -> Vec<[String; 4]> {
    let mut rows: Vec<[String; 4]> = c
        .metrics
        .iter()
        .map(|m| {
            [
                m.metric.clone(),
                format!("{:.4}", m.baseline),
                format!("{:.4}", m.cascade),
                fmt_opt(m.change_pct),
            ]
        })
        .collect();
    rows.push([
        "mean_improvement".into(),
        String::new(),
        String::new(),
        fmt_opt(c.mean_improvement_pct),
    ]);
    rows.push([
        "p50_total_ns".into(),
        c.baseline_p50_total_ns.map_or_else(String::new, |x| x.to_string()),
        c.cascade_p50_total_ns.map_or_else(String::new, |x| x.to_string()),
        fmt_opt(c.latency_delta_pct),
    ]);
    rows
}

pub fn render_report(r: &MetricsReport, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ReportFormat::Json => canonical_json(r)?,
        ReportFormat::Markdown => {
            let mut s = String::from("| metric | value |\n|---|---|\n");
            for (k, v) in report_rows(r) {
                let _ = writeln!(s, "| {k} | {v} |");
            }
            s.into_bytes()
        }
        ReportFormat::Csv => {
            let mut s = String::from("query_index,route_ns,search_ns,merge_ns,total_ns\n");
            for x in &r.latency_samples {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    x.query_index, x.route_ns, x.search_ns, x.merge_ns, x.total_ns
                );
            }
            s.into_bytes()
        }
    })
}

pub fn render_comparison(c: &ComparisonReport, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ReportFormat::Json => canonical_json(c)?,
        ReportFormat::Markdown => {
            let mut s = String::from("| metric | baseline | cascade | change % |\n|---|---|---|---|\n");
            for [a, b, c, d] in comparison_rows(c) {
                let _ = writeln!(s, "| {a} | {b} | {c} | {d} |");
            }
            s.into_bytes()
        }
        ReportFormat::Csv => {
            let mut s = String::from("metric,baseline,cascade,change_pct\n");
            for m in &c.metrics {
                let change = m.change_pct.map_or_else(String::new, |x| format!("{x}"));
                let _ = writeln!(s, "{},{},{},{}", m.metric, m.baseline, m.cascade, change);
            }
            s.into_bytes()
        }
    })
}

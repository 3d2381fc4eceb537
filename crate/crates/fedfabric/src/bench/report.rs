//! CSV and human-readable report emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DerivedMetrics, LatencyBreakdown, MetricSummary};

/// One row of `summary.csv`: a (topic, metric, percentile) value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub topic: String,
    pub metric: String,
    pub percentile: String,
    pub value_ms: f64,
    pub count: usize,
}

/// Flatten derived metrics into rows with a deterministic order: topics
/// alphabetically, metrics in component order, percentiles p40/p50/p60.
pub fn summarize(derived: &DerivedMetrics) -> Vec<ReportRow> {
    let mut topics: Vec<String> = derived
        .breakdowns
        .iter()
        .map(|b| b.topic.clone())
        .collect();
    topics.sort();
    topics.dedup();

    let mut rows = Vec::new();
    for topic in &topics {
        for metric in LatencyBreakdown::COMPONENTS {
            let values: Vec<f64> = derived
                .breakdowns
                .iter()
                .filter(|b| &b.topic == topic)
                .filter_map(|b| b.component(metric))
                .collect();
            if let Some(s) = MetricSummary::of(&values) {
                for (name, value) in [("p40", s.p40), ("p50", s.median), ("p60", s.p60)] {
                    rows.push(ReportRow {
                        topic: topic.clone(),
                        metric: metric.to_owned(),
                        percentile: name.to_owned(),
                        value_ms: value,
                        count: s.count,
                    });
                }
            }
        }
    }
    let steering = [
        ("reaction_notify_ms", &derived.steering.reaction_notify_ms),
        ("reaction_data_ms", &derived.steering.reaction_data_ms),
        ("decision_ms", &derived.steering.decision_ms),
        ("dispatch_ms", &derived.steering.dispatch_ms),
        ("ml_makespan_ms", &derived.steering.ml_makespan_ms),
    ];
    for (metric, values) in steering {
        if let Some(s) = MetricSummary::of(values) {
            for (name, value) in [("p40", s.p40), ("p50", s.median), ("p60", s.p60)] {
                rows.push(ReportRow {
                    topic: "(run)".to_owned(),
                    metric: metric.to_owned(),
                    percentile: name.to_owned(),
                    value_ms: value,
                    count: s.count,
                });
            }
        }
    }
    rows
}

pub fn render_summary_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("topic,metric,percentile,value_ms,count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.topic, r.metric, r.percentile, r.value_ms, r.count
        ));
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Vec<ReportRow> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let mut parts = l.split(',');
            Some(ReportRow {
                topic: parts.next()?.to_owned(),
                metric: parts.next()?.to_owned(),
                percentile: parts.next()?.to_owned(),
                value_ms: parts.next()?.parse().ok()?,
                count: parts.next()?.parse().ok()?,
            })
        })
        .collect()
}

/// One scenario assertion with its verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Write `summary.csv` and a human-readable `summary.txt` (including one
/// pass/fail line per scenario assertion) into `out_dir`.
pub fn emit_report(
    out_dir: &Path,
    derived: &DerivedMetrics,
    assertions: &[AssertionResult],
) -> std::io::Result<Vec<ReportRow>> {
    std::fs::create_dir_all(out_dir)?;
    let rows = summarize(derived);
    std::fs::write(out_dir.join("summary.csv"), render_summary_csv(&rows))?;

    let mut text = String::new();
    text.push_str(&format!(
        "tasks: {} complete, {} incomplete, {} violations\n",
        derived.breakdowns.len(),
        derived.incomplete,
        derived.violations.len()
    ));
    for v in &derived.violations {
        text.push_str(&format!("violation: {v}\n"));
    }
    for a in assertions {
        text.push_str(&format!(
            "[{}] {} — {}\n",
            if a.pass { "PASS" } else { "FAIL" },
            a.name,
            a.detail
        ));
    }
    std::fs::write(out_dir.join("summary.txt"), text)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{derive_breakdowns, EventRecord, Stage};

    #[test]
    fn empty_metrics_yield_header_only_csv() {
        let rows = summarize(&DerivedMetrics::default());
        let csv = render_summary_csv(&rows);
        assert_eq!(csv, "topic,metric,percentile,value_ms,count\n");
    }

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let mk = |task: &str, stage, t_ms: u64| EventRecord {
            task_id: task.into(),
            topic: "noop".into(),
            stage,
            t_ns: t_ms * 1_000_000,
        };
        let events = vec![
            mk("t1", Stage::Created, 0),
            mk("t1", Stage::Serialized, 2),
            mk("t1", Stage::ResultReceived, 9),
        ];
        let derived = derive_breakdowns(&events);
        let rows = summarize(&derived);
        assert!(!rows.is_empty());
        let back = parse_summary_csv(&render_summary_csv(&rows));
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[0].topic, rows[0].topic);
        assert!((back[0].value_ms - rows[0].value_ms).abs() < 1e-9);
    }

    #[test]
    fn summary_includes_pass_fail_lines() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(
            dir.path(),
            &DerivedMetrics::default(),
            &[
                AssertionResult {
                    name: "alpha".into(),
                    pass: true,
                    detail: "ratio 6.2 >= 5".into(),
                },
                AssertionResult {
                    name: "beta".into(),
                    pass: false,
                    detail: "ratio 1.2 < 1.5".into(),
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(text.contains("[PASS] alpha"));
        assert!(text.contains("[FAIL] beta"));
    }
}

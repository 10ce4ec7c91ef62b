//! Metrics log persistence and the summaries computed from it.
//!
//! A metrics file is a CSV with the fixed header
//!
//! ```text
//! virtual_time,round,test_accuracy,test_loss,mean_staleness,max_staleness,corrections_applied
//! ```
//!
//! and one row per evaluation, strictly increasing in `virtual_time`.
//! Staleness columns summarize the arrivals since the previous row;
//! `corrections_applied` is cumulative.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: [&str; 7] = [
    "virtual_time",
    "round",
    "test_accuracy",
    "test_loss",
    "mean_staleness",
    "max_staleness",
    "corrections_applied",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unexpected header {found:?}, expected {expected:?}")]
    Schema {
        path: PathBuf,
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("no metrics files given")]
    NoInputs,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// One evaluation snapshot of the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub virtual_time: f64,
    pub round: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub corrections_applied: u64,
}

pub fn to_csv_string(records: &[MetricsRecord]) -> String {
    // header written by hand so an empty log still carries it
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        writer.serialize(r).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, to_csv_string(records)).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_csv(path: &Path, text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(MetricsError::Schema {
            path: path.to_path_buf(),
            found: header,
            expected: CSV_HEADER.iter().map(|s| s.to_string()).collect(),
        });
    }
    let records: Vec<MetricsRecord> = reader.deserialize().collect::<Result<_, _>>().map_err(csv_err)?;
    if let Some(w) = records.windows(2).find(|w| w[1].virtual_time <= w[0].virtual_time) {
        return Err(MetricsError::Invalid {
            path: path.to_path_buf(),
            message: format!(
                "virtual_time not strictly increasing ({} then {})",
                w[0].virtual_time, w[1].virtual_time
            ),
        });
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(path, &text)
}

/// Earliest virtual time at which accuracy reaches `target`, or `None` (a "Fail").
pub fn time_to_target(records: &[MetricsRecord], target: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.test_accuracy >= target)
        .map(|r| r.virtual_time)
}

/// Accuracy of the last evaluation at or before `round`.
///
/// Rounds between evaluations carry the last observation forward; a round
/// before the first evaluation reports the first (initial) evaluation.
pub fn accuracy_at_round(records: &[MetricsRecord], round: u64) -> Option<f64> {
    let first = records.first()?;
    Some(
        records
            .iter()
            .take_while(|r| r.round <= round)
            .last()
            .unwrap_or(first)
            .test_accuracy,
    )
}

/// One line of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub final_time: f64,
    pub final_round: u64,
    pub final_accuracy: f64,
    pub time_to_target: Option<f64>,
    pub accuracy_at_warmup: f64,
    pub accuracy_at_10x_warmup: f64,
    pub corrections_applied: u64,
}

pub fn report_row(run: &str, records: &[MetricsRecord], target: f64, warmup_rounds: u64) -> Option<ReportRow> {
    let last = records.last()?;
    Some(ReportRow {
        run: run.to_string(),
        final_time: last.virtual_time,
        final_round: last.round,
        final_accuracy: last.test_accuracy,
        time_to_target: time_to_target(records, target),
        accuracy_at_warmup: accuracy_at_round(records, warmup_rounds)?,
        accuracy_at_10x_warmup: accuracy_at_round(records, 10 * warmup_rounds)?,
        corrections_applied: last.corrections_applied,
    })
}

/// Reads every file and builds one report row per file.
pub fn report(paths: &[PathBuf], target: f64, warmup_rounds: u64) -> Result<Vec<ReportRow>> {
    if paths.is_empty() {
        return Err(MetricsError::NoInputs);
    }
    paths
        .iter()
        .map(|p| {
            let records = read_csv(p)?;
            report_row(&p.display().to_string(), &records, target, warmup_rounds).ok_or_else(|| {
                MetricsError::Invalid {
                    path: p.clone(),
                    message: "no metrics rows".into(),
                }
            })
        })
        .collect()
}

fn fmt_ttt(t: Option<f64>) -> String {
    t.map_or_else(|| "Fail".to_string(), |t| format!("{t:.0}"))
}

pub fn render_text(rows: &[ReportRow], target: f64, warmup_rounds: u64) -> String {
    let ttt_col = format!("time_to_{target}");
    let at_col = format!("acc@{warmup_rounds}");
    let at10_col = format!("acc@{}", 10 * warmup_rounds);
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>8}  {:>9}  {:>14}  {:>9}  {:>9}  {:>11}",
        "run", "final_time", "rounds", "final_acc", ttt_col, at_col, at10_col, "corrections"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.0}  {:>8}  {:>9.4}  {:>14}  {:>9.4}  {:>9.4}  {:>11}",
            r.run,
            r.final_time,
            r.final_round,
            r.final_accuracy,
            fmt_ttt(r.time_to_target),
            r.accuracy_at_warmup,
            r.accuracy_at_10x_warmup,
            r.corrections_applied
        );
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "run",
            "final_time",
            "final_round",
            "final_accuracy",
            "time_to_target",
            "accuracy_at_warmup",
            "accuracy_at_10x_warmup",
            "corrections_applied",
        ])
        .expect("in-memory write");
    for r in rows {
        writer
            .write_record([
                r.run.clone(),
                r.final_time.to_string(),
                r.final_round.to_string(),
                r.final_accuracy.to_string(),
                fmt_ttt(r.time_to_target),
                r.accuracy_at_warmup.to_string(),
                r.accuracy_at_10x_warmup.to_string(),
                r.corrections_applied.to_string(),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t: f64, round: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            virtual_time: t,
            round,
            test_accuracy: acc,
            test_loss: 1.0 - acc,
            mean_staleness: 0.0,
            max_staleness: 0,
            corrections_applied: 0,
        }
    }

    #[test]
    fn first_crossing() {
        let log = [rec(100.0, 1, 0.3), rec(200.0, 2, 0.5)];
        assert_eq!(time_to_target(&log, 0.4), Some(200.0));
        assert_eq!(time_to_target(&log, 0.9), None);
        assert_eq!(time_to_target(&log, 0.3), Some(100.0));
    }

    #[test]
    fn accuracy_lookup_carries_forward() {
        let log = [rec(0.0, 0, 0.1), rec(10.0, 20, 0.4), rec(20.0, 40, 0.6)];
        assert_eq!(accuracy_at_round(&log, 0), Some(0.1));
        assert_eq!(accuracy_at_round(&log, 39), Some(0.4));
        assert_eq!(accuracy_at_round(&log, 40), Some(0.6));
        assert_eq!(accuracy_at_round(&log, 4000), Some(0.6));
        let late = [rec(5.0, 20, 0.4)];
        assert_eq!(accuracy_at_round(&late, 3), Some(0.4));
        assert_eq!(accuracy_at_round(&[], 3), None);
    }

    #[test]
    fn header_is_fixed() {
        let text = to_csv_string(&[rec(1.5, 2, 0.25)]);
        assert_eq!(
            text.lines().next().unwrap(),
            "virtual_time,round,test_accuracy,test_loss,mean_staleness,max_staleness,corrections_applied"
        );
    }

    #[test]
    fn schema_and_order_errors_name_the_file() {
        let p = Path::new("runs/a.csv");
        let err = parse_csv(p, "time,acc\n1,2\n").unwrap_err();
        assert!(matches!(err, MetricsError::Schema { .. }));
        assert!(err.to_string().contains("runs/a.csv"));
        let mut text = to_csv_string(&[rec(2.0, 1, 0.1)]);
        text.push_str("1,2,0.2,0.8,0,0,0\n");
        assert!(matches!(parse_csv(p, &text), Err(MetricsError::Invalid { .. })));
        assert!(matches!(parse_csv(p, "virtual_time,round\n"), Err(MetricsError::Schema { .. })));
    }

    #[test]
    fn report_text_has_one_row_per_run() {
        let rows = vec![report_row("a", &[rec(0.0, 0, 0.1), rec(9.0, 5, 0.8)], 0.5, 2).unwrap()];
        let text = render_text(&rows, 0.5, 2);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("Fail") || text.contains(" 9 "));
        assert_eq!(render_csv(&rows).lines().count(), 2);
        assert_eq!(rows[0].time_to_target, Some(9.0));
    }

    fn arb_records() -> impl Strategy<Value = Vec<MetricsRecord>> {
        prop::collection::vec((0.001f64..1e4, 0.0f64..=1.0, 0.0f64..10.0, 0.0f64..50.0, 0u64..100), 1..40).prop_map(
            |rows| {
                let mut t = 0.0;
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (dt, acc, loss, ms, mx))| {
                        t += dt;
                        MetricsRecord {
                            virtual_time: t,
                            round: i as u64 * 3,
                            test_accuracy: acc,
                            test_loss: loss,
                            mean_staleness: ms,
                            max_staleness: mx,
                            corrections_applied: i as u64,
                        }
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn csv_round_trips_exactly(records in arb_records()) {
            let back = parse_csv(Path::new("x.csv"), &to_csv_string(&records)).unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn time_to_target_is_monotone(records in arb_records(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if let Some(t_hi) = time_to_target(&records, hi) {
                let t_lo = time_to_target(&records, lo).unwrap();
                prop_assert!(t_lo <= t_hi);
            }
            // brute-force min over all qualifying rows
            let brute = records.iter().filter(|r| r.test_accuracy >= lo).map(|r| r.virtual_time).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
            prop_assert_eq!(time_to_target(&records, lo), brute);
        }
    }
}

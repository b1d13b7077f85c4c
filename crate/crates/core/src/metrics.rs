//! Run-trace rows and their comma-separated file format.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// One trace row. Rows written for a client update carry the client fields; rows written
/// for a global evaluation leave them empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub sim_time: f64,
    pub event_index: u64,
    pub global_version: u64,
    pub client_id: Option<usize>,
    pub capacity_level: Option<usize>,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub cum_params_down: u64,
    pub cum_params_up: u64,
    pub staleness: Option<u64>,
}

pub const METRICS_HEADER: &str = "sim_time,event_index,global_version,client_id,capacity_level,train_loss,test_loss,test_accuracy,cum_params_down,cum_params_up,staleness";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Shortest decimal rendering that parses back to the same bits.
fn float(v: f64) -> String {
    format!("{v:?}")
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            float(self.sim_time),
            self.event_index,
            self.global_version,
            opt(self.client_id),
            opt(self.capacity_level),
            float(self.train_loss),
            self.test_loss.map(float).unwrap_or_default(),
            self.test_accuracy.map(float).unwrap_or_default(),
            self.cum_params_down,
            self.cum_params_up,
            opt(self.staleness),
        )
    }

    pub fn is_evaluation(&self) -> bool {
        self.client_id.is_none()
    }

    pub fn parse_row(line: &str, row: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Parse { row, column: fields.len().min(11), msg: format!("expected 11 fields, got {}", fields.len()) });
        }
        fn req<T: std::str::FromStr>(s: &str, row: usize, column: usize) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse { row, column, msg: format!("cannot parse `{s}`") })
        }
        fn optional<T: std::str::FromStr>(s: &str, row: usize, column: usize) -> Result<Option<T>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                req(s, row, column).map(Some)
            }
        }
        Ok(Self {
            sim_time: req(fields[0], row, 1)?,
            event_index: req(fields[1], row, 2)?,
            global_version: req(fields[2], row, 3)?,
            client_id: optional(fields[3], row, 4)?,
            capacity_level: optional(fields[4], row, 5)?,
            train_loss: req(fields[5], row, 6)?,
            test_loss: optional(fields[6], row, 7)?,
            test_accuracy: optional(fields[7], row, 8)?,
            cum_params_down: req(fields[8], row, 9)?,
            cum_params_up: req(fields[9], row, 10)?,
            staleness: optional(fields[10], row, 11)?,
        })
    }
}

/// Appends rows to a metrics file, writing the header first.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.to_csv_row())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::new(out)?;
    for r in records {
        w.append(r)?;
    }
    w.finish().map(|_| ())
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Parse { row: 0, column: 0, msg: "missing metrics header".into() });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricsRecord::parse_row(&line, i + 1)?);
    }
    Ok(out)
}

/// Which trace column a threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMetric {
    /// Reached when test accuracy is at least the threshold.
    TestAccuracy,
    /// Reached when test loss is at most the threshold.
    TestLoss,
    /// Reached when train loss of an evaluation row is at most the threshold.
    TrainLoss,
}

impl std::str::FromStr for TargetMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "test_accuracy" | "accuracy" => Ok(TargetMetric::TestAccuracy),
            "test_loss" => Ok(TargetMetric::TestLoss),
            "train_loss" => Ok(TargetMetric::TrainLoss),
            other => Err(Error::config_key("metric", format!("unknown metric `{other}`"))),
        }
    }
}

fn reached(rec: &MetricsRecord, metric: TargetMetric, threshold: f64) -> bool {
    if !rec.is_evaluation() {
        return false;
    }
    match metric {
        TargetMetric::TestAccuracy => rec.test_accuracy.is_some_and(|a| a >= threshold),
        TargetMetric::TestLoss => rec.test_loss.is_some_and(|l| l <= threshold),
        TargetMetric::TrainLoss => rec.train_loss <= threshold,
    }
}

/// First evaluation row reaching the threshold, if any.
pub fn time_to_threshold(trace: &[MetricsRecord], metric: TargetMetric, threshold: f64) -> Option<&MetricsRecord> {
    trace.iter().find(|r| reached(r, metric, threshold))
}

/// One line of a comparison table. `None` entries mean the threshold was never reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub time: Option<f64>,
    pub comm: Option<u64>,
    /// Percent over the fastest run.
    pub time_overhead: Option<f64>,
    /// Percent over the cheapest run.
    pub comm_overhead: Option<f64>,
}

pub fn compare_runs(traces: &[(String, Vec<MetricsRecord>)], metric: TargetMetric, threshold: f64) -> Result<Vec<ComparisonRow>> {
    if traces.is_empty() {
        return Err(Error::config("nothing to compare"));
    }
    let hits: Vec<Option<(f64, u64)>> = traces
        .iter()
        .map(|(_, t)| time_to_threshold(t, metric, threshold).map(|r| (r.sim_time, r.cum_params_down + r.cum_params_up)))
        .collect();
    let best_time = hits.iter().flatten().map(|h| h.0).fold(f64::INFINITY, f64::min);
    let best_comm = hits.iter().flatten().map(|h| h.1).min();
    let overhead = |v: f64, best: f64| if best > 0.0 { (v / best - 1.0) * 100.0 } else if v == best { 0.0 } else { f64::INFINITY };
    Ok(traces
        .iter()
        .zip(&hits)
        .map(|((name, _), h)| ComparisonRow {
            name: name.clone(),
            time: h.map(|x| x.0),
            comm: h.map(|x| x.1),
            time_overhead: h.map(|x| overhead(x.0, best_time)),
            comm_overhead: h.and_then(|x| best_comm.map(|b| overhead(x.1 as f64, b as f64))),
        })
        .collect())
}

/// Target used when none is given: the second worst of the runs' best values, so
/// every run but one can reach it. Falls back to the worst value with a single run.
pub fn default_target(traces: &[(String, Vec<MetricsRecord>)], metric: TargetMetric) -> Option<f64> {
    let mut best: Vec<f64> = traces
        .iter()
        .filter_map(|(_, t)| {
            let vals = t.iter().filter(|r| r.is_evaluation()).filter_map(|r| match metric {
                TargetMetric::TestAccuracy => r.test_accuracy,
                TargetMetric::TestLoss => r.test_loss,
                TargetMetric::TrainLoss => Some(r.train_loss),
            });
            match metric {
                TargetMetric::TestAccuracy => vals.reduce(f64::max),
                _ => vals.reduce(f64::min),
            }
        })
        .filter(|v| v.is_finite())
        .collect();
    match metric {
        TargetMetric::TestAccuracy => best.sort_by(f64::total_cmp),
        _ => best.sort_by(|a, b| b.total_cmp(a)),
    }
    best.get(1).or(best.first()).copied()
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("run,time_to_target,time_overhead,comm_to_target,comm_overhead\n");
    for r in rows {
        let na = || "N/A".to_string();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            r.time.map(|t| format!("{t:.3}")).unwrap_or_else(na),
            r.time_overhead.map(|o| format!("+{o:.2}%")).unwrap_or_else(na),
            r.comm.map(|c| c.to_string()).unwrap_or_else(na),
            r.comm_overhead.map(|o| format!("+{o:.2}%")).unwrap_or_else(na),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_row(t: f64, acc: f64, comm: u64) -> MetricsRecord {
        MetricsRecord {
            sim_time: t,
            event_index: 0,
            global_version: 0,
            client_id: None,
            capacity_level: None,
            train_loss: 1.0,
            test_loss: Some(1.0),
            test_accuracy: Some(acc),
            cum_params_down: comm,
            cum_params_up: comm,
            staleness: None,
        }
    }

    #[test]
    fn overhead_arithmetic() {
        let a = vec![eval_row(50.0, 0.2, 1), eval_row(100.0, 0.9, 10)];
        let b = vec![eval_row(133.0, 0.9, 20)];
        let rows = compare_runs(&[("a".into(), a), ("b".into(), b)], TargetMetric::TestAccuracy, 0.8).unwrap();
        assert_eq!(rows[0].time_overhead, Some(0.0));
        assert!((rows[1].time_overhead.unwrap() - 33.0).abs() < 1e-9);
        assert_eq!(rows[1].comm, Some(40));
    }

    #[test]
    fn self_compare_and_unreached() {
        let a = vec![eval_row(10.0, 0.9, 1)];
        let rows = compare_runs(&[("a".into(), a.clone()), ("a2".into(), a)], TargetMetric::TestAccuracy, 0.5).unwrap();
        assert!(rows.iter().all(|r| r.time_overhead == Some(0.0)));
        let rows = compare_runs(&[("x".into(), vec![eval_row(1.0, 0.1, 1)])], TargetMetric::TestAccuracy, 0.5).unwrap();
        assert_eq!(rows[0].time, None);
        assert!(format_comparison(&rows).contains("N/A"));
    }

    #[test]
    fn rejects_bad_header() {
        assert!(read_metrics(&b"nope\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn rows_round_trip(
            t in any::<f64>().prop_filter("finite", |v| v.is_finite()),
            loss in any::<f64>().prop_filter("not nan", |v| !v.is_nan()),
            acc in prop::option::of(0.0f64..1.0),
            client in prop::option::of(0usize..1000),
            stale in prop::option::of(0u64..50),
            down in any::<u64>(),
        ) {
            let rec = MetricsRecord {
                sim_time: t, event_index: 3, global_version: 7, client_id: client,
                capacity_level: client.map(|c| c % 8 + 1), train_loss: loss,
                test_loss: acc.map(|a| a * 3.0), test_accuracy: acc,
                cum_params_down: down, cum_params_up: down / 2, staleness: stale,
            };
            let mut buf = Vec::new();
            write_metrics(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = read_metrics(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].train_loss.to_bits(), rec.train_loss.to_bits());
            let mut b = back[0].clone();
            let mut r = rec.clone();
            b.train_loss = 0.0;
            r.train_loss = 0.0;
            prop_assert_eq!(b, r);
        }
    }

    #[test]
    fn default_target_is_second_worst_best() {
        let runs = vec![
            ("a".to_string(), vec![eval_row(1.0, 0.4, 0), eval_row(2.0, 0.7, 0)]),
            ("b".to_string(), vec![eval_row(1.0, 0.5, 0)]),
            ("c".to_string(), vec![eval_row(1.0, 0.6, 0)]),
        ];
        assert_eq!(default_target(&runs, TargetMetric::TestAccuracy), Some(0.6));
        assert_eq!(default_target(&runs[1..2], TargetMetric::TestAccuracy), Some(0.5));
        assert_eq!(default_target(&[], TargetMetric::TestAccuracy), None);
    }
}

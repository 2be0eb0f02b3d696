use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ccloss::LossBreakdown;

/// Accuracy plus attention-distance statistics over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean squared attention distance over same-class pairs.
    pub mean_intra: f64,
    /// Mean squared attention distance over different-class pairs.
    pub mean_inter: f64,
    /// `mean_intra / mean_inter`
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Sample-weighted mean of the per-batch loss terms.
    pub train: LossBreakdown,
    pub train_acc: f64,
    pub test: Evaluation,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,lr,train_total,train_ce,train_intra,train_inter,train_ratio,train_acc,test_acc,mean_intra,mean_inter,dist_ratio";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    /// Test-split evaluation of the freshly initialized model.
    pub initial: Evaluation,
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, rec: EpochRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.epoch < rec.epoch));
        self.records.push(rec);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Epoch with the highest test accuracy (earliest on ties). This is an
    /// optimistic selection: it peeks at the test split.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.test.accuracy >= r.test.accuracy => Some(b),
            _ => Some(r),
        })
    }

    /// One row per epoch under [`METRICS_CSV_HEADER`]. Floats use the
    /// shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train.total,
                r.train.ce,
                r.train.intra,
                r.train.inter,
                r.train.ratio,
                r.train_acc,
                r.test.accuracy,
                r.test.mean_intra,
                r.test.mean_inter,
                r.test.ratio
            );
        }
        s
    }

    /// One JSON object per line: an `initial` record, then one per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::json!({ "kind": "initial", "test": self.initial }).to_string();
        s.push('\n');
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("plain data serializes");
            v["kind"] = "epoch".into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.1,
            train: LossBreakdown::default(),
            train_acc: 0.5,
            test: Evaluation { accuracy: acc, ..Default::default() },
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut log = MetricsLog::default();
        log.push(rec(1, 0.5));
        log.push(rec(2, 0.75));
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[2].split(',').count(), 12);
        assert!(lines[2].starts_with("2,0.1,"));
    }

    #[test]
    fn jsonl_records_parse() {
        let mut log = MetricsLog::default();
        log.push(rec(1, 0.5));
        let text = log.to_jsonl();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["epoch"], 1);
        assert_eq!(rows[1]["test"]["accuracy"], 0.5);
    }

    #[test]
    fn best_prefers_earliest_tie() {
        let mut log = MetricsLog::default();
        for (e, a) in [(1, 0.7), (2, 0.9), (3, 0.9), (4, 0.8)] {
            log.push(rec(e, a));
        }
        assert_eq!(log.best().unwrap().epoch, 2);
    }
}

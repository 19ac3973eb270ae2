//! Per-client accuracy summaries and subpopulation fairness statistics.

use std::io::Write;

use crate::data::GroupTag;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientEvalRecord {
    pub client_id: usize,
    pub group: GroupTag,
    /// Fraction of the local test set classified correctly.
    pub accuracy: f64,
}

/// Group statistics in percentage points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FairnessReport {
    pub majority: f64,
    pub minority: f64,
    /// `majority − minority`.
    pub gap: f64,
    /// Population variance of every client's accuracy, in squared percentage points.
    pub variance: f64,
}

/// Unweighted mean of per-client accuracies, as a fraction.
pub fn mean_local_accuracy(records: &[ClientEvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no client records"));
    }
    Ok(records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64)
}

/// Mean accuracy of one group, as a fraction; `None` if the group is empty.
pub fn group_mean(records: &[ClientEvalRecord], group: GroupTag) -> Option<f64> {
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.group == group)
        .map(|r| r.accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Population variance (divide by `n`) of the given values.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn fairness_report(records: &[ClientEvalRecord]) -> Result<FairnessReport> {
    let pct = |g| group_mean(records, g).map(|m| 100.0 * m);
    let (Some(majority), Some(minority)) = (pct(GroupTag::Majority), pct(GroupTag::Minority)) else {
        return Err(Error::contract("fairness needs both majority and minority records"));
    };
    let all: Vec<f64> = records.iter().map(|r| 100.0 * r.accuracy).collect();
    Ok(FairnessReport {
        majority,
        minority,
        gap: majority - minority,
        variance: population_variance(&all),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes `round,client_id,group,accuracy` rows, with a header when `header` is set.
pub fn write_client_rows<W: Write>(out: W, rows: &[(usize, ClientEvalRecord)], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(["round", "client_id", "group", "accuracy"])
            .map_err(csv_err)?;
    }
    for (round, r) in rows {
        w.write_record([
            round.to_string(),
            r.client_id.to_string(),
            r.group.to_string(),
            format!("{:.6}", r.accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Writes a one-row summary with the report's fields.
pub fn write_fairness_summary<W: Write>(out: W, report: &FairnessReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["majority", "minority", "gap", "variance"])
        .map_err(csv_err)?;
    w.write_record([report.majority, report.minority, report.gap, report.variance].map(|v| format!("{v:.4}")))
        .map_err(csv_err)?;
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, group: GroupTag, accuracy: f64) -> ClientEvalRecord {
        ClientEvalRecord {
            client_id: id,
            group,
            accuracy,
        }
    }

    #[test]
    fn means() {
        assert_eq!(mean_local_accuracy(&[rec(0, GroupTag::None, 0.9)]).unwrap(), 0.9);
        let two = [rec(0, GroupTag::None, 0.8), rec(1, GroupTag::None, 1.0)];
        assert!((mean_local_accuracy(&two).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(mean_local_accuracy(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn crafted_gap_and_variance() {
        let records = [
            rec(0, GroupTag::Majority, 0.9),
            rec(1, GroupTag::Majority, 0.9),
            rec(2, GroupTag::Minority, 0.7),
            rec(3, GroupTag::Minority, 0.7),
        ];
        let r = fairness_report(&records).unwrap();
        assert!((r.gap - 20.0).abs() < 1e-9);
        assert!((r.variance - 100.0).abs() < 1e-9);
    }

    #[test]
    fn table_gap() {
        let records = [rec(0, GroupTag::Majority, 0.9663), rec(1, GroupTag::Minority, 0.6740)];
        let r = fairness_report(&records).unwrap();
        assert!((r.gap - 29.23).abs() < 1e-9);
    }

    #[test]
    fn constant_accuracy() {
        let records = [rec(0, GroupTag::Majority, 0.5), rec(1, GroupTag::Minority, 0.5)];
        let r = fairness_report(&records).unwrap();
        assert_eq!((r.gap, r.variance), (0.0, 0.0));
    }

    #[test]
    fn missing_group() {
        assert!(fairness_report(&[rec(0, GroupTag::Majority, 0.5)]).is_err());
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_client_rows(&mut buf, &[(5, rec(3, GroupTag::Minority, 0.25))], true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,client_id,group,accuracy\n5,3,minority,0.250000\n"
        );
    }
}

//! Run artifacts: CSV tables and plot series, each headed by the config hash.
//!
//! Files never carry timestamps or wall-clock durations, so a rerun of the same
//! configuration reproduces them byte for byte. Readers should treat lines
//! starting with `#` as comments.

use std::io::Write;
use std::path::Path;

use waffle_core::federation::TrainingHistory;
use waffle_core::metrics::{write_client_rows, write_fairness_summary, FairnessReport};
use waffle_core::mia::AttackReport;
use waffle_core::Algorithm;

use crate::error::{CliError, Result};

pub const CONFIG_SNAPSHOT: &str = "config.resolved";
pub const HISTORY: &str = "history.csv";
pub const CLIENTS: &str = "clients.csv";
pub const FAIRNESS: &str = "fairness.csv";
pub const FINAL_ACCURACY: &str = "final_accuracy.csv";
pub const MIA_REPORT: &str = "mia_report.csv";
pub const MIA_CLASSES: &str = "mia_classes.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";
pub const PLOT_MEAN: &str = "plot_mean_accuracy.dat";
pub const PLOT_MAJORITY: &str = "plot_majority_accuracy.dat";
pub const PLOT_MINORITY: &str = "plot_minority_accuracy.dat";

/// Final evaluation of one run, in percentage points.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalSummary {
    pub algorithm: Algorithm,
    pub model: String,
    pub partition: String,
    pub round: usize,
    pub parameters: usize,
    pub mean: f64,
    pub majority: Option<f64>,
    pub minority: Option<f64>,
    pub fairness: Option<FairnessReport>,
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn with_hash(hash: &str) -> Vec<u8> {
    format!("# config_hash: {hash}\n").into_bytes()
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(buf)
}

fn finish(w: csv::Writer<&mut Vec<u8>>) -> Result<()> {
    w.into_inner()
        .map(|_| ())
        .map_err(|e| CliError::Core(waffle_core::Error::Format(e.to_string())))
}

fn row<I, S>(w: &mut csv::Writer<&mut Vec<u8>>, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields)
        .map_err(|e| CliError::Core(waffle_core::Error::Format(format!("csv: {e}"))))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per round. Accuracy columns are fractions and stay empty for rounds
/// that were not evaluated.
pub fn history_csv(hash: &str, history: &TrainingHistory) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    let mut w = csv_writer(&mut buf);
    row(
        &mut w,
        [
            "round",
            "num_selected",
            "selected",
            "mean_accuracy",
            "majority_accuracy",
            "minority_accuracy",
        ],
    )?;
    for r in &history.rounds {
        let selected: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        let (mean, majority, minority) = match &r.evaluation {
            Some(e) => (e.mean.to_string(), opt(e.majority), opt(e.minority)),
            None => Default::default(),
        };
        row(
            &mut w,
            [
                r.round.to_string(),
                r.selected.len().to_string(),
                selected.join(";"),
                mean,
                majority,
                minority,
            ],
        )?;
    }
    finish(w)?;
    Ok(buf)
}

/// Per-client accuracy for every evaluated round.
pub fn clients_csv(hash: &str, history: &TrainingHistory) -> Result<Vec<u8>> {
    let rows: Vec<_> = history
        .rounds
        .iter()
        .filter_map(|r| r.evaluation.as_ref().map(|e| (r.round, e)))
        .flat_map(|(round, e)| e.clients.iter().map(move |c| (round, *c)))
        .collect();
    let mut buf = with_hash(hash);
    write_client_rows(&mut buf, &rows, true)?;
    Ok(buf)
}

pub fn fairness_csv(hash: &str, report: &FairnessReport) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    write_fairness_summary(&mut buf, report)?;
    Ok(buf)
}

/// Final accuracies laid out as one row per run, in percent.
pub fn final_csv(hash: &str, runs: &[FinalSummary]) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    let mut w = csv_writer(&mut buf);
    row(
        &mut w,
        [
            "algorithm",
            "model",
            "partition",
            "round",
            "parameters",
            "mean_accuracy",
            "majority_accuracy",
            "minority_accuracy",
            "gap",
            "variance",
        ],
    )?;
    let pct = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for s in runs {
        row(
            &mut w,
            [
                s.algorithm.to_string(),
                s.model.clone(),
                s.partition.clone(),
                s.round.to_string(),
                s.parameters.to_string(),
                format!("{:.2}", s.mean),
                pct(s.majority),
                pct(s.minority),
                pct(s.fairness.map(|f| f.gap)),
                pct(s.fairness.map(|f| f.variance)),
            ],
        )?;
    }
    finish(w)?;
    Ok(buf)
}

/// One row per grid cell with its final accuracies in percent; cells without
/// an evaluation leave the accuracy columns empty.
pub fn sweep_csv(hash: &str, cells: &[(String, Option<FinalSummary>)]) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    let mut w = csv_writer(&mut buf);
    row(
        &mut w,
        [
            "cell",
            "mean_accuracy",
            "majority_accuracy",
            "minority_accuracy",
            "gap",
            "variance",
        ],
    )?;
    let pct = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for (name, s) in cells {
        let s = s.as_ref();
        row(
            &mut w,
            [
                name.clone(),
                pct(s.map(|s| s.mean)),
                pct(s.and_then(|s| s.majority)),
                pct(s.and_then(|s| s.minority)),
                pct(s.and_then(|s| s.fairness).map(|f| f.gap)),
                pct(s.and_then(|s| s.fairness).map(|f| f.variance)),
            ],
        )?;
    }
    finish(w)?;
    Ok(buf)
}

/// `(file name, contents)` for each accuracy curve: the mean, plus one per
/// group when `grouped`. Each line is `round value` for an evaluated round.
pub fn plot_files(hash: &str, history: &TrainingHistory, grouped: bool) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let evaluated: Vec<_> = history
        .rounds
        .iter()
        .filter_map(|r| r.evaluation.as_ref().map(|e| (r.round, e)))
        .collect();
    if evaluated.is_empty() {
        return Err(CliError::key("fed.rounds", "no evaluated rounds to plot"));
    }
    let series = |name: &'static str, pick: &dyn Fn(&waffle_core::federation::RoundEvaluation) -> Option<f64>| {
        let mut buf = with_hash(hash);
        buf.extend_from_slice(b"# round accuracy\n");
        for (round, e) in &evaluated {
            if let Some(v) = pick(e) {
                buf.extend_from_slice(format!("{round} {v}\n").as_bytes());
            }
        }
        (name, buf)
    };
    let mut files = vec![series(PLOT_MEAN, &|e| Some(e.mean))];
    if grouped {
        files.push(series(PLOT_MAJORITY, &|e| e.majority));
        files.push(series(PLOT_MINORITY, &|e| e.minority));
    }
    Ok(files)
}

/// One row per attacked algorithm.
pub fn mia_csv(hash: &str, reports: &[(Algorithm, AttackReport)]) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    let mut w = csv_writer(&mut buf);
    row(&mut w, ["algorithm", "attack_accuracy", "f1", "examples", "warnings"])?;
    for (a, r) in reports {
        let examples: usize = r.per_class.iter().map(|c| c.examples).sum();
        row(
            &mut w,
            [
                a.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.f1),
                examples.to_string(),
                r.warnings.join("; "),
            ],
        )?;
    }
    finish(w)?;
    Ok(buf)
}

/// Attack accuracy broken down by true class.
pub fn mia_classes_csv(hash: &str, reports: &[(Algorithm, AttackReport)]) -> Result<Vec<u8>> {
    let mut buf = with_hash(hash);
    let mut w = csv_writer(&mut buf);
    row(&mut w, ["algorithm", "class", "examples", "attack_accuracy"])?;
    for (a, r) in reports {
        for c in &r.per_class {
            row(
                &mut w,
                [
                    a.to_string(),
                    c.class.to_string(),
                    c.examples.to_string(),
                    format!("{:.4}", c.accuracy),
                ],
            )?;
        }
    }
    finish(w)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;
    use waffle_core::data::GroupTag;
    use waffle_core::federation::{RoundEvaluation, RoundRecord};
    use waffle_core::metrics::ClientEvalRecord;

    fn history() -> TrainingHistory {
        let eval = RoundEvaluation {
            clients: vec![ClientEvalRecord {
                client_id: 0,
                group: GroupTag::Majority,
                accuracy: 0.5,
            }],
            mean: 0.5,
            majority: Some(0.5),
            minority: Some(0.25),
        };
        TrainingHistory {
            rounds: vec![
                RoundRecord {
                    round: 1,
                    selected: vec![0, 3],
                    evaluation: None,
                    wall_time: Duration::from_secs(7),
                },
                RoundRecord {
                    round: 2,
                    selected: vec![1],
                    evaluation: Some(eval),
                    wall_time: Duration::from_millis(3),
                },
            ],
        }
    }

    #[test]
    fn history_leaves_unevaluated_rounds_blank() {
        let text = String::from_utf8(history_csv("abc", &history()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: abc");
        assert_eq!(lines[2], "1,2,0;3,,,");
        assert_eq!(lines[3], "2,1,1,0.5,0.5,0.25");
        assert!(!text.contains('7'));
    }

    #[test]
    fn plots_follow_grouping() {
        assert_eq!(plot_files("h", &history(), false).unwrap().len(), 1);
        let files = plot_files("h", &history(), true).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(
            String::from_utf8(files[2].1.clone()).unwrap(),
            "# config_hash: h\n# round accuracy\n2 0.25\n"
        );
        assert!(plot_files("h", &TrainingHistory::default(), false).is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}

//! Evaluation pipelines: forward simulation and completion, linear probing
//! of latent codes and progressive super-resolution, plus their CSV output.

mod forecast;
mod probe;
mod stats;
mod superres;

pub use forecast::{
    completion_task, rollout_forward, DhnForecaster, Forecaster, GroundTruth, HnnForecaster, RolloutCase,
    RolloutReport,
};
pub use probe::{length_ratio_labels, linear_probe, ProbeReport};
pub use stats::{cox_stuart, SignTest};
pub use superres::{
    seen_segment, superres_eval, superres_progressive, train_superres_cnn, train_superres_dhn, unseen_segment,
    SuperresCnn, SuperresDhn, SuperresReport, SuperresTraining, Upsampled, Upsampler, SEGMENT_LEN, SPARSE_STRIDE,
    STAGE_SPACINGS,
};

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed-width scientific notation so reruns produce identical bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.12e}")
}

/// Writes `# comment` lines followed by a CSV table.
pub fn write_metrics_csv(path: &Path, comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| Error::format(e.to_string());
        w.write_record(header).map_err(fail)?;
        for r in rows {
            if r.len() != header.len() {
                return Err(Error::format(format!("row of {} fields under {} columns", r.len(), header.len())));
            }
            w.write_record(r).map_err(fail)?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Columns `step,state_mse,q_mse,energy_error,abs_energy_error`; `step`
/// counts from the first predicted state.
pub fn rollout_rows(report: &RolloutReport) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let rows = (0..report.horizon())
        .map(|t| {
            vec![
                (report.given + t).to_string(),
                fmt_f64(report.state_mse[t]),
                fmt_f64(report.q_mse[t]),
                fmt_f64(report.energy_error[t]),
                fmt_f64(report.abs_energy_error[t]),
            ]
        })
        .collect();
    (vec!["step", "state_mse", "q_mse", "energy_error", "abs_energy_error"], rows)
}

/// Fails if any evaluated id took part in training.
pub fn audit_ids(seen: &BTreeSet<usize>, evaluated: impl IntoIterator<Item = usize>) -> Result<()> {
    let leaked: Vec<usize> = evaluated.into_iter().filter(|id| seen.contains(id)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(vec![format!(
            "test trajectories {leaked:?} appeared in training batches"
        )]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_reports_leaks() {
        let seen: BTreeSet<usize> = [0, 1, 2].into();
        assert!(audit_ids(&seen, [5, 6]).is_ok());
        assert!(matches!(audit_ids(&seen, [5, 2]), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_rows_must_match_header() {
        let dir = std::env::temp_dir().join(format!("dhn-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        write_metrics_csv(&path, &["hash abc".into()], &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "# hash abc\na,b\n1,2\n");
        assert!(write_metrics_csv(&path, &[], &["a"], &[vec![]]).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}

//! Long-format plot data for the three training-curve panels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::experiment::{metric_value, read_metrics_csv, Band};
use crate::error::{Error, Result};

pub const PANELS: [&str; 3] = ["mean_est_err", "accuracy", "w_dist_sq"];

/// One line of `plot_data.csv`. `status` is `gap` when a run is missing or a
/// value is non-finite at that point; `mean`, `lo` and `hi` are then empty.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PlotRow {
    pub panel: String,
    pub x: usize,
    pub series: usize,
    pub mean: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub status: &'static str,
}

/// Read `metrics.csv` from `report_dir` and write `plot_data.csv` next to it.
pub fn emit_plot_data(report_dir: &Path) -> Result<PathBuf> {
    let metrics = report_dir.join("metrics.csv");
    if !metrics.exists() {
        return Err(Error::Config(format!("no metrics.csv in {}", report_dir.display())));
    }
    let rows = read_metrics_csv(&metrics)?;
    let seeds: BTreeSet<usize> = rows.iter().map(|r| r.seed).collect();
    let iters: BTreeSet<usize> = rows.iter().map(|r| r.gd_iter).collect();
    let series: BTreeSet<usize> = rows.iter().map(|r| r.m_u).collect();
    let mut cells: BTreeMap<(usize, usize), Vec<_>> = BTreeMap::new();
    for r in &rows {
        cells.entry((r.m_u, r.gd_iter)).or_default().push(r);
    }

    let mut out = Vec::new();
    for panel in PANELS {
        for &m_u in &series {
            for &x in &iters {
                let cell = cells.get(&(m_u, x)).map(Vec::as_slice).unwrap_or(&[]);
                let vals: Vec<f64> = cell.iter().filter_map(|r| metric_value(r, panel)).collect();
                let complete = cell.len() == seeds.len() && vals.iter().all(|v| v.is_finite());
                let row = if complete {
                    let b = Band::of(&vals);
                    PlotRow {
                        panel: panel.to_string(),
                        x,
                        series: m_u,
                        mean: Some(b.mean),
                        lo: Some(b.lo),
                        hi: Some(b.hi),
                        status: "ok",
                    }
                } else {
                    PlotRow {
                        panel: panel.to_string(),
                        x,
                        series: m_u,
                        mean: None,
                        lo: None,
                        hi: None,
                        status: "gap",
                    }
                };
                out.push(row);
            }
        }
    }

    let path = report_dir.join("plot_data.csv");
    let mut w = csv::Writer::from_path(&path)?;
    if out.is_empty() {
        w.write_record(["panel", "x", "series", "mean", "lo", "hi", "status"])?;
    }
    for r in &out {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::experiment::{write_metrics_csv, MetricsRow};

    fn row(m_u: usize, seed: usize, gd_iter: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            gd_iter,
            m_u,
            sigma2: 0.7,
            seed,
            mean_est_err: 1.0 + acc,
            accuracy: acc,
            bayes_acc: 0.9,
            labeled_only_acc: 0.6,
            w_dist_sq: 2.0,
            aligned_est_err: None,
        }
    }

    #[test]
    fn empty_report_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics_csv(&[], &dir.path().join("metrics.csv")).unwrap();
        let path = emit_plot_data(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "panel,x,series,mean,lo,hi,status\n");
    }

    #[test]
    fn bands_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(1, 0, 0, 0.5),
            row(1, 1, 0, 0.7),
            row(1, 0, 100, 0.6),
            row(1, 1, 100, 0.8),
            row(10, 0, 0, 0.5),
            row(10, 1, 0, 0.9),
            row(10, 0, 100, 0.7),
        ];
        write_metrics_csv(&rows, &dir.path().join("metrics.csv")).unwrap();
        let text = std::fs::read_to_string(emit_plot_data(dir.path()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 2 * 2);
        let panels: BTreeSet<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(panels.len(), 3);
        let acc_1_0: Vec<&str> = lines.iter().find(|l| l.starts_with("accuracy,0,1,")).unwrap().split(',').collect();
        let (lo, hi): (f64, f64) = (acc_1_0[4].parse().unwrap(), acc_1_0[5].parse().unwrap());
        let std = (0.02_f64).sqrt();
        assert!((hi - lo - 4.0 * std).abs() < 1e-12);
        assert!(lines.contains(&"accuracy,100,10,,,,gap"));
    }

    #[test]
    fn missing_report_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(dir.path()).is_err());
    }
}

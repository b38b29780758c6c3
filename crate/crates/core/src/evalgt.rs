//! Ground truth for test logs from localization against the mapping-log
//! maps, and the accuracy metrics reported per localization run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcl::LocalizationTrace;
use crate::pose::{Pose2D, TimedPose, VehicleParams};
use crate::preprocess::{CalibTable, DataPackage, OdomCalib};
use crate::slam::{loop_information, slam_graph, SlamOptions, LOOP_COV_FLOOR};

/// Error thresholds of the accuracy table, in meters.
pub const THRESHOLDS: [f64; 3] = [0.5, 1.0, 2.0];

/// Index into sorted `times` of the sample nearest to `t` if it lies within
/// `tol`; ties go to the earlier sample.
pub fn nearest_within(times: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = times.partition_point(|&x| x < t);
    let best = match (i.checked_sub(1), (i < times.len()).then_some(i)) {
        (Some(a), Some(b)) => {
            if t - times[a] <= times[b] - t {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return None,
    };
    ((times[best] - t).abs() <= tol).then_some(best)
}

/// Median spacing of sorted timestamps.
fn median_period(times: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Test-log poses from the full-SLAM graph of the test log plus unary
/// localization edges from every trace. Diverged trace entries are skipped;
/// with no localization edges the full-SLAM poses are returned unchanged.
pub fn build_ground_truth(
    pkgs: &[DataPackage],
    traces: &[&LocalizationTrace],
    calib: &OdomCalib,
    params: &VehicleParams,
    opts: &SlamOptions,
    table: Option<&CalibTable>,
) -> Result<Vec<Pose2D>> {
    let (mut graph, result) = slam_graph(pkgs, calib, params, opts, table)?;
    let times: Vec<f64> = pkgs.iter().map(|p| p.t).collect();
    let tol = 0.5 * median_period(&times).unwrap_or(f64::INFINITY);
    let mut added = 0;
    for trace in traces {
        if trace.entries.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidArgument("trace timestamps must increase".into()));
        }
        for e in trace.entries.iter().filter(|e| !e.diverged) {
            if let Some(i) = nearest_within(&times, e.t, tol) {
                graph.add_unary(i, e.estimate, loop_information(&e.cov, &e.estimate, LOOP_COV_FLOOR))?;
                added += 1;
            }
        }
    }
    if added == 0 {
        return Ok(result.poses);
    }
    graph.optimize(&opts.optimize)?;
    Ok(graph.poses())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Aligned packages.
    pub n: usize,
    pub rmse: f64,
    /// Population standard deviation of the per-package errors.
    pub mean_std: f64,
    /// Percentage of packages with error below each threshold, keyed by the
    /// threshold in meters.
    pub pct_under: BTreeMap<String, f64>,
}

pub fn threshold_key(tau: f64) -> String {
    format!("{tau:.1}")
}

impl MetricsReport {
    pub fn pct(&self, tau: f64) -> Option<f64> {
        self.pct_under.get(&threshold_key(tau)).copied()
    }
}

/// Per-package position errors of `trace` against `truth`, each trace entry
/// matched to the nearest truth pose within half the truth period.
pub fn aligned_errors(trace: &[TimedPose], truth: &[TimedPose]) -> Vec<f64> {
    let times: Vec<f64> = truth.iter().map(|p| p.t).collect();
    let tol = 0.5 * median_period(&times).unwrap_or(f64::INFINITY);
    trace
        .iter()
        .filter_map(|e| nearest_within(&times, e.t, tol).map(|i| e.pose.distance(&truth[i].pose)))
        .collect()
}

pub fn metrics_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::Insufficient("no trace entry aligns with the truth".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let pct_under = thresholds
        .iter()
        .map(|&tau| {
            (
                threshold_key(tau),
                100.0 * errors.iter().filter(|&&e| e < tau).count() as f64 / n,
            )
        })
        .collect();
    Ok(MetricsReport {
        n: errors.len(),
        rmse,
        mean_std: var.sqrt(),
        pct_under,
    })
}

pub fn compute_metrics(trace: &[TimedPose], truth: &[TimedPose], thresholds: &[f64]) -> Result<MetricsReport> {
    metrics_from_errors(&aligned_errors(trace, truth), thresholds)
}

/// One row of the accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub map_type: String,
    pub mode: String,
    pub diverged: bool,
    pub metrics: MetricsReport,
}

/// Aligned-column text table, one row per run.
pub fn format_table(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<13} {:<8} {:>9} {:>9} {:>8} {:>8} {:>8} {:>9}",
        "map", "mode", "RMSE(m)", "STD(m)", "<0.5m%", "<1.0m%", "<2.0m%", "diverged"
    );
    for r in rows {
        let p = |t| r.metrics.pct(t).map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            s,
            "{:<13} {:<8} {:>9.3} {:>9.3} {:>8} {:>8} {:>8} {:>9}",
            r.map_type,
            r.mode,
            r.metrics.rmse,
            r.metrics.mean_std,
            p(0.5),
            p(1.0),
            p(2.0),
            if r.diverged { "yes" } else { "no" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(n: usize, f: impl Fn(usize) -> Pose2D) -> Vec<TimedPose> {
        (0..n)
            .map(|i| TimedPose {
                t: i as f64 * 0.1,
                pose: f(i),
            })
            .collect()
    }

    #[test]
    fn identical_trace_is_perfect() {
        let truth = path(20, |i| Pose2D::new(i as f64, 0.5 * i as f64, 0.1));
        let m = compute_metrics(&truth, &truth, &THRESHOLDS).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mean_std, 0.0);
        for t in THRESHOLDS {
            assert_eq!(m.pct(t), Some(100.0));
        }
    }

    #[test]
    fn constant_offset() {
        let truth = path(20, |i| Pose2D::new(i as f64, 0.0, 0.0));
        let trace = path(20, |i| Pose2D::new(i as f64, 1.0, 0.0));
        let m = compute_metrics(&trace, &truth, &THRESHOLDS).unwrap();
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!(m.mean_std.abs() < 1e-12);
        assert_eq!(m.pct(0.5), Some(0.0));
        assert_eq!(m.pct(2.0), Some(100.0));
    }

    #[test]
    fn three_errors_by_hand() {
        let m = metrics_from_errors(&[0.3, 0.4, 1.2], &THRESHOLDS).unwrap();
        // √((0.09 + 0.16 + 1.44) / 3)
        assert!((m.rmse - (1.69f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.rmse - 0.750_555).abs() < 1e-6);
        // Σe² - (Σe)²/n over n
        assert!((m.mean_std - ((1.69 - 1.9 * 1.9 / 3.0) / 3.0f64).sqrt()).abs() < 1e-9);
        assert!((m.pct(0.5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.pct(1.0).unwrap(), m.pct(0.5).unwrap());
        assert_eq!(m.pct(2.0), Some(100.0));
    }

    #[test]
    fn alignment_tolerates_half_a_period() {
        let truth = path(10, |i| Pose2D::new(i as f64, 0.0, 0.0));
        let mut trace = path(10, |i| Pose2D::new(i as f64, 0.0, 0.0));
        for p in &mut trace {
            p.t += 0.04;
        }
        assert_eq!(compute_metrics(&trace, &truth, &THRESHOLDS).unwrap().n, 10);
        for p in &mut trace {
            p.t += 10.0;
        }
        assert!(matches!(
            compute_metrics(&trace, &truth, &THRESHOLDS),
            Err(Error::Insufficient(_))
        ));
        assert!(compute_metrics(&[], &truth, &THRESHOLDS).is_err());
    }

    #[test]
    fn nearest_prefers_earlier_on_ties() {
        let times = [0.0, 1.0, 2.0];
        assert_eq!(nearest_within(&times, 0.5, 0.5), Some(0));
        assert_eq!(nearest_within(&times, 1.6, 0.5), Some(2));
        assert_eq!(nearest_within(&times, 3.0, 0.5), None);
        assert_eq!(nearest_within(&[], 3.0, 0.5), None);
    }

    #[test]
    fn table_has_a_row_per_run() {
        let m = metrics_from_errors(&[0.1, 0.2], &THRESHOLDS).unwrap();
        let rows = vec![
            ReportRow {
                map_type: "occupancy".into(),
                mode: "STABLE".into(),
                diverged: false,
                metrics: m.clone(),
            },
            ReportRow {
                map_type: "color".into(),
                mode: "DIVERSE".into(),
                diverged: true,
                metrics: m,
            },
        ];
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().ends_with("yes"));
    }

    proptest! {
        #[test]
        fn rigid_transform_invariance(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -2.0f64..2.0, -2.0f64..2.0), 1..40),
            tx in -100.0f64..100.0, ty in -100.0f64..100.0, th in -3.0f64..3.0,
        ) {
            let truth: Vec<TimedPose> = pts.iter().enumerate().map(|(i, p)| TimedPose { t: i as f64, pose: Pose2D::new(p.0, p.1, 0.0) }).collect();
            let trace: Vec<TimedPose> = pts.iter().enumerate().map(|(i, p)| TimedPose { t: i as f64, pose: Pose2D::new(p.0 + p.2, p.1 + p.3, 0.0) }).collect();
            let g = Pose2D::new(tx, ty, th);
            let mv = |v: &[TimedPose]| v.iter().map(|p| TimedPose { t: p.t, pose: g.compose(&p.pose) }).collect::<Vec<_>>();
            let a = compute_metrics(&trace, &truth, &THRESHOLDS).unwrap();
            let b = compute_metrics(&mv(&trace), &mv(&truth), &THRESHOLDS).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
            prop_assert!((a.mean_std - b.mean_std).abs() < 1e-9);
        }

        #[test]
        fn pct_under_is_monotone(errors in prop::collection::vec(0.0f64..5.0, 1..100)) {
            let m = metrics_from_errors(&errors, &THRESHOLDS).unwrap();
            prop_assert!(m.pct(2.0).unwrap() >= m.pct(1.0).unwrap());
            prop_assert!(m.pct(1.0).unwrap() >= m.pct(0.5).unwrap());
        }
    }
}

//! Per-iteration run metrics and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t,comm_rounds,grad_evals,dist_sq,lyapunov,dispersion";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub t: u64,
    pub comm_rounds: u64,
    pub grad_evals: u64,
    /// `|x - x*|^2` of the (mean) iterate.
    pub dist_sq: Option<f64>,
    /// Lyapunov value of the method, when it has one.
    pub lyapunov: Option<f64>,
    /// `1/n sum_i |x_i - mean|^2` for multi-node methods.
    pub dispersion: Option<f64>,
}

impl RunRow {
    /// The quantity stopping rules look at: the Lyapunov value if present,
    /// otherwise the squared distance.
    pub fn progress(&self) -> Option<f64> {
        self.lyapunov.or(self.dist_sq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    ReachedTarget,
    BudgetExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub status: RunStatus,
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn first(&self) -> &RunRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &RunRow {
        self.rows.last().expect("records always hold the initial row")
    }

    /// First logged row whose progress is at most `rel` times the initial one.
    pub fn first_below(&self, rel: f64) -> Option<&RunRow> {
        let start = self.first().progress()?;
        self.rows
            .iter()
            .find(|r| r.progress().is_some_and(|v| v <= rel * start))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        let mut buf = ryu::Buffer::new();
        let mut cell = |out: &mut String, v: Option<f64>| {
            out.push(',');
            if let Some(v) = v {
                out.push_str(format_float(&mut buf, v));
            }
        };
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.t, r.comm_rounds, r.grad_evals);
            cell(&mut out, r.dist_sq);
            cell(&mut out, r.lyapunov);
            cell(&mut out, r.dispersion);
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Shortest round-trip decimal; non-finite values use `inf`/`-inf`/`NaN`.
fn format_float(buf: &mut ryu::Buffer, v: f64) -> &str {
    if v.is_finite() {
        buf.format_finite(v)
    } else if v.is_nan() {
        "NaN"
    } else if v > 0.0 {
        "inf"
    } else {
        "-inf"
    }
}

/// Parses the rows written by [`RunRecord::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<RunRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::parse(lineno, format!("expected 6 cells, got {}", cells.len())));
        }
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::parse(lineno, format!("invalid integer `{s}`")))
        };
        let float = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parse(lineno, format!("invalid number `{s}`")))
        };
        rows.push(RunRow {
            t: int(cells[0])?,
            comm_rounds: int(cells[1])?,
            grad_evals: int(cells[2])?,
            dist_sq: float(cells[3])?,
            lyapunov: float(cells[4])?,
            dispersion: float(cells[5])?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// Logging cadence and stopping rules shared by all solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunControl {
    /// Log every k-th iteration (the first and last are always logged).
    pub log_every: u64,
    /// Stop once progress falls to this fraction of its initial value.
    pub target: Option<f64>,
    /// Stop once this many communication rounds have happened.
    pub comm_budget: Option<u64>,
    /// Abort when an iterate entry exceeds this magnitude or is not finite.
    pub divergence_limit: f64,
}

impl Default for RunControl {
    fn default() -> Self {
        Self {
            log_every: 1,
            target: None,
            comm_budget: None,
            divergence_limit: 1e12,
        }
    }
}

impl RunControl {
    pub fn with_target(mut self, rel: f64) -> Self {
        self.target = Some(rel);
        self
    }

    pub fn with_comm_budget(mut self, rounds: u64) -> Self {
        self.comm_budget = Some(rounds);
        self
    }

    pub fn with_log_every(mut self, k: u64) -> Self {
        self.log_every = k.max(1);
        self
    }
}

/// Applies a [`RunControl`] to a stream of rows.
#[derive(Debug)]
pub struct Recorder {
    control: RunControl,
    method: String,
    seed: u64,
    rows: Vec<RunRow>,
    pending: Option<RunRow>,
    initial_progress: Option<f64>,
}

impl Recorder {
    pub fn new(method: impl Into<String>, seed: u64, control: RunControl) -> Self {
        Self {
            control,
            method: method.into(),
            seed,
            rows: Vec::new(),
            pending: None,
            initial_progress: None,
        }
    }

    /// Feeds the row after an iteration; `x_max` is the largest iterate
    /// magnitude. Returns a status when the run must stop.
    pub fn observe(&mut self, row: RunRow, x_max: f64) -> Option<RunStatus> {
        if self.rows.is_empty() {
            self.initial_progress = row.progress();
            self.rows.push(row);
            return self.check_stop(&row, x_max);
        }
        let stop = self.check_stop(&row, x_max);
        if stop.is_some() || row.t.is_multiple_of(self.control.log_every) {
            self.rows.push(row);
            self.pending = None;
        } else {
            self.pending = Some(row);
        }
        stop
    }

    fn check_stop(&self, row: &RunRow, x_max: f64) -> Option<RunStatus> {
        if !(x_max <= self.control.divergence_limit) {
            return Some(RunStatus::Diverged);
        }
        if let (Some(rel), Some(start), Some(now)) = (self.control.target, self.initial_progress, row.progress()) {
            if now <= rel * start {
                return Some(RunStatus::ReachedTarget);
            }
        }
        if self.control.comm_budget.is_some_and(|b| row.comm_rounds >= b) {
            return Some(RunStatus::BudgetExhausted);
        }
        None
    }

    pub fn finish(mut self, status: RunStatus) -> RunRecord {
        if let Some(row) = self.pending.take() {
            self.rows.push(row);
        }
        RunRecord {
            method: self.method,
            seed: self.seed,
            status,
            rows: self.rows,
        }
    }
}

/// Largest absolute entry, propagating NaN.
pub fn max_magnitude(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| {
        if v.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(v.abs())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(t: u64, d: f64) -> RunRow {
        RunRow {
            t,
            comm_rounds: t / 2,
            grad_evals: t,
            dist_sq: Some(d),
            lyapunov: None,
            dispersion: None,
        }
    }

    #[test]
    fn logs_first_last_and_every_kth() {
        let mut rec = Recorder::new("m", 0, RunControl::default().with_log_every(3));
        for t in 0..=7 {
            assert!(rec.observe(row(t, 1.0), 1.0).is_none());
        }
        let r = rec.finish(RunStatus::Completed);
        let ts: Vec<u64> = r.rows.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 3, 6, 7]);
    }

    #[test]
    fn stops_at_target_and_on_divergence() {
        let mut rec = Recorder::new("m", 0, RunControl::default().with_target(1e-2));
        assert!(rec.observe(row(0, 1.0), 0.0).is_none());
        assert!(rec.observe(row(1, 0.1), 0.0).is_none());
        assert_eq!(rec.observe(row(2, 0.01), 0.0), Some(RunStatus::ReachedTarget));

        let mut rec = Recorder::new("m", 0, RunControl::default());
        rec.observe(row(0, 1.0), 1.0);
        assert_eq!(rec.observe(row(1, 1.0), 1e13), Some(RunStatus::Diverged));
        assert_eq!(rec.observe(row(2, 1.0), f64::NAN), Some(RunStatus::Diverged));
    }

    #[test]
    fn nan_magnitude() {
        assert!(max_magnitude(&[1.0, f64::NAN, 2.0]).is_nan());
        assert_eq!(max_magnitude(&[1.0, -3.0]), 3.0);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(parse_csv("a,b\n").is_err());
    }

    fn opt_float() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![
            Just(None),
            any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)
        ]
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec((0u64..1000, 0u64..1000, 0u64..1000, opt_float(), opt_float(), opt_float()), 1..20)) {
            let rec = RunRecord {
                method: "m".into(),
                seed: 1,
                status: RunStatus::Completed,
                rows: rows.into_iter().map(|(t, c, g, d, l, s)| RunRow {
                    t, comm_rounds: c, grad_evals: g, dist_sq: d, lyapunov: l, dispersion: s,
                }).collect(),
            };
            let text = rec.to_csv();
            prop_assert_eq!(parse_csv(&text).unwrap(), rec.rows.clone());
        }
    }
}

//! Append-only metrics log and its CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str =
    "step,loss_diff,loss_disp,loss_total,swd,energy_dist,mean_pairwise_cos,uniformity,modes_covered,wallclock_seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_diff: f64,
    pub loss_disp: f64,
    pub loss_total: f64,
    pub swd: f64,
    pub energy_dist: f64,
    pub mean_pairwise_cos: f64,
    pub uniformity: f64,
    pub modes_covered: usize,
    pub wallclock_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<LogRow>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row; steps must be strictly increasing.
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Precondition(format!("log step {} after {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// Header plus one line per row; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.loss_diff,
                r.loss_disp,
                r.loss_total,
                r.swd,
                r.energy_dist,
                r.mean_pairwise_cos,
                r.uniformity,
                r.modes_covered,
                r.wallclock_seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("metrics file lacks the expected header".into()));
        }
        let mut log = Self::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("row {}: {} fields", n + 1, f.len())));
            }
            let bad = || Error::Format(format!("row {}: unparsable field", n + 1));
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            log.push(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss_diff: x(1)?,
                loss_disp: x(2)?,
                loss_total: x(3)?,
                swd: x(4)?,
                energy_dist: x(5)?,
                mean_pairwise_cos: x(6)?,
                uniformity: x(7)?,
                modes_covered: f[8].parse().map_err(|_| bad())?,
                wallclock_seconds: x(9)?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// First logged step whose swd is at or below `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.swd <= target).map(|r| r.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> LogRow {
        LogRow {
            step,
            loss_diff: 0.1 * step as f64,
            loss_disp: -1.25,
            loss_total: 1.0 / 3.0,
            swd: 0.5,
            energy_dist: 1e-9,
            mean_pairwise_cos: -0.01,
            uniformity: -3.0,
            modes_covered: 8,
            wallclock_seconds: 0.0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut log = RunLog::new();
        for s in [0, 10, 20] {
            log.push(row(s)).unwrap();
        }
        let csv = log.to_csv();
        assert!(csv.starts_with(HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(RunLog::from_csv(&csv).unwrap(), log);
    }

    #[test]
    fn steps_must_increase() {
        let mut log = RunLog::new();
        log.push(row(5)).unwrap();
        assert!(log.push(row(5)).is_err());
        assert!(log.push(row(4)).is_err());
    }

    #[test]
    fn first_step_reaching_threshold() {
        let mut log = RunLog::new();
        for (s, w) in [(0, 1.0), (10, 0.4), (20, 0.2)] {
            log.push(LogRow { swd: w, ..row(s) }).unwrap();
        }
        assert_eq!(log.first_step_reaching(0.5), Some(10));
        assert_eq!(log.first_step_reaching(0.1), None);
    }
}

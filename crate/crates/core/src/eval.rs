//! Accuracy aggregation, timing, and report rendering.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy of one meta-testing task over repeated runs; the task counts
/// with its best run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub runs: Vec<f64>,
    pub accuracy: f64,
    pub n_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt_seconds: Option<f64>,
}

impl TaskResult {
    pub fn new(task_id: impl Into<String>, runs: Vec<f64>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("a task needs at least one run".into()));
        }
        let accuracy = runs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            task_id: task_id.into(),
            n_runs: runs.len(),
            runs,
            accuracy,
            adapt_seconds: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setup {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub min: f64,
    pub max: f64,
    pub n_tasks: usize,
}

impl AccuracySummary {
    /// `mean±ci (min-max)` in percent with two decimals.
    pub fn cell(&self) -> String {
        format!(
            "{:.2}±{:.2} ({:.2}-{:.2})",
            self.mean * 100.0,
            self.ci95_halfwidth * 100.0,
            self.min * 100.0,
            self.max * 100.0
        )
    }
}

/// Mean, normal-approximation 95% half-width `1.96·s/√n` (sample standard
/// deviation), and range of the task accuracies. Values are summed in
/// sorted order so the result does not depend on task order.
pub fn aggregate(results: &[TaskResult]) -> Result<AccuracySummary> {
    if results.is_empty() {
        return Err(Error::Config("cannot aggregate an empty result list".into()));
    }
    let mut acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    acc.sort_by(f64::total_cmp);
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let (min, max) = (acc[0], acc[acc.len() - 1]);
    if min == max {
        return Ok(AccuracySummary {
            mean: min,
            ci95_halfwidth: 0.0,
            min,
            max,
            n_tasks: acc.len(),
        });
    }
    // min != max implies at least two tasks
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ci = 1.96 * var.sqrt() / n.sqrt();
    Ok(AccuracySummary {
        mean,
        ci95_halfwidth: ci,
        min,
        max,
        n_tasks: acc.len(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_adapt_seconds: Option<f64>,
    pub representation_seconds: Option<f64>,
    pub ae_epoch_seconds: Vec<f64>,
    pub meta_train_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub method: String,
    pub setup: Setup,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub tasks: Vec<TaskResult>,
    /// Wall-clock measurements; absent unless timing was requested, so
    /// reports of identical runs are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

impl EvalReport {
    pub fn new(experiment: impl Into<String>, method: impl Into<String>, setup: Setup, tasks: Vec<TaskResult>) -> Result<Self> {
        let s = aggregate(&tasks)?;
        Ok(Self {
            experiment: experiment.into(),
            method: method.into(),
            setup,
            mean_accuracy: s.mean,
            ci95_halfwidth: s.ci95_halfwidth,
            min_accuracy: s.min,
            max_accuracy: s.max,
            tasks,
            timing: None,
        })
    }

    pub fn summary(&self) -> AccuracySummary {
        AccuracySummary {
            mean: self.mean_accuracy,
            ci95_halfwidth: self.ci95_halfwidth,
            min: self.min_accuracy,
            max: self.max_accuracy,
            n_tasks: self.tasks.len(),
        }
    }

    pub fn cell(&self) -> String {
        self.summary().cell()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Method", "Experiment", "Setup", "Accuracy"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.experiment.clone(),
                format!("{}-way {}-shot", r.setup.n_way, r.setup.k_shot),
                r.cell(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header);
    line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str));
    for row in &rows {
        line(row.each_ref().map(String::as_str));
    }
    out
}

/// Run `phase` on the calling thread and measure its monotonic wall time.
pub fn time_phase<T>(phase: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = phase();
    (out, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::hint::black_box;

    fn task(acc: f64) -> TaskResult {
        TaskResult::new("t", vec![acc]).unwrap()
    }

    #[test]
    fn hand_cases() {
        let s = aggregate(&[task(1.0)]).unwrap();
        assert_eq!(s.cell(), "100.00±0.00 (100.00-100.00)");
        let s = aggregate(&[task(0.8), task(1.0)]).unwrap();
        assert_eq!(s.cell(), "90.00±19.60 (80.00-100.00)");
        let same: Vec<_> = (0..50).map(|_| task(0.7)).collect();
        assert_eq!(aggregate(&same).unwrap().ci95_halfwidth, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn best_run_counts_and_is_order_free() {
        let a = TaskResult::new("t", vec![0.2, 0.9, 0.5]).unwrap();
        let b = TaskResult::new("t", vec![0.5, 0.2, 0.9]).unwrap();
        assert_eq!(a.accuracy, 0.9);
        assert_eq!(a.accuracy, b.accuracy);
        assert!(TaskResult::new("t", vec![]).is_err());
    }

    #[test]
    fn aggregate_ignores_task_order() {
        let xs = [0.1, 0.7, 0.33, 0.95, 0.41, 0.6];
        let fwd: Vec<_> = xs.iter().map(|&a| task(a)).collect();
        let rev: Vec<_> = xs.iter().rev().map(|&a| task(a)).collect();
        assert_eq!(aggregate(&fwd).unwrap(), aggregate(&rev).unwrap());
    }

    #[test]
    fn report_json_round_trips() {
        let setup = Setup {
            n_way: 5,
            k_shot: 5,
            m_query: 15,
        };
        let mut r = EvalReport::new("E1", "te-maml", setup, vec![task(0.8), task(1.0 / 3.0)]).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        r.timing = Some(TimingSummary {
            mean_adapt_seconds: Some(0.125),
            ..TimingSummary::default()
        });
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let table = render_table(&[r]);
        assert!(table.contains("5-way 5-shot"));
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn timing_fixtures() {
        let (_, t) = time_phase(|| ());
        assert!(t < 0.01);
        let (_, t) = time_phase(|| std::thread::sleep(std::time::Duration::from_millis(50)));
        assert!((t - 0.05).abs() <= 0.02, "{t}");
        let work = |n: u64| (0..n).fold(0u64, |a, i| black_box(a.wrapping_add(i * i)));
        let best = |n: u64| (0..3).map(|_| time_phase(|| work(black_box(n))).1).fold(f64::INFINITY, f64::min);
        let once = best(20_000_000);
        let twice = best(40_000_000);
        assert!(twice >= once * 0.8, "{twice} vs {once}");
    }
}

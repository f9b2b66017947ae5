use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{complexity, pass_hat_k, Complexity};
use super::RunRecord;
use crate::protocol::Mode;
use crate::sandbox::ExecutorKind;

/// Aggregates for one (task, mode, executor) cell of the run matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub mode: Mode,
    pub executor: ExecutorKind,
    pub runs: u64,
    pub successes: u64,
    /// `pass_hat[k - 1]` for k in 1..=runs.
    pub pass_hat: Vec<f64>,
    pub complexity: Complexity,
    pub mean_context_chars: f64,
    pub mean_error_count: f64,
    pub mean_dispatches: f64,
    pub outcomes: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub executor: ExecutorKind,
    pub tasks: u64,
    pub runs: u64,
    pub successes: u64,
    /// Mean over tasks that have at least k runs.
    pub mean_pass_hat: Vec<f64>,
    pub mean_context_chars: f64,
    pub mean_error_count: f64,
    pub strata: BTreeMap<Complexity, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tasks: Vec<TaskRow>,
    pub modes: Vec<ModeRow>,
}

fn mean(sum: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Report {
    pub fn from_records(records: &[RunRecord]) -> Report {
        let mut groups: BTreeMap<(String, String, ExecutorKind), Vec<&RunRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.task_id.clone(), r.mode.to_string(), r.executor)).or_default().push(r);
        }
        let tasks: Vec<TaskRow> = groups
            .into_values()
            .map(|rs| {
                let n = rs.len() as u64;
                let c = rs.iter().filter(|r| r.success).count() as u64;
                let mut outcomes = BTreeMap::new();
                for r in &rs {
                    *outcomes.entry(r.outcome.label().to_string()).or_insert(0) += 1;
                }
                TaskRow {
                    task_id: rs[0].task_id.clone(),
                    mode: rs[0].mode,
                    executor: rs[0].executor,
                    runs: n,
                    successes: c,
                    pass_hat: (1..=n).map(|k| pass_hat_k(n, c, k).expect("1 <= k <= n")).collect(),
                    complexity: complexity(c, n),
                    mean_context_chars: mean(rs.iter().map(|r| r.context_chars as f64).sum(), n),
                    mean_error_count: mean(rs.iter().map(|r| f64::from(r.error_count)).sum(), n),
                    mean_dispatches: mean(rs.iter().map(|r| f64::from(r.dispatches)).sum(), n),
                    outcomes,
                }
            })
            .collect();

        let mut by_mode: BTreeMap<(String, ExecutorKind), Vec<&TaskRow>> = BTreeMap::new();
        for row in &tasks {
            by_mode.entry((row.mode.to_string(), row.executor)).or_default().push(row);
        }
        let modes = by_mode
            .into_values()
            .map(|rows| {
                let runs: u64 = rows.iter().map(|r| r.runs).sum();
                let max_k = rows.iter().map(|r| r.pass_hat.len()).max().unwrap_or(0);
                let mean_pass_hat = (0..max_k)
                    .map(|k| {
                        let vals: Vec<f64> = rows.iter().filter_map(|r| r.pass_hat.get(k).copied()).collect();
                        mean(vals.iter().sum(), vals.len() as u64)
                    })
                    .collect();
                let mut strata = BTreeMap::new();
                for r in &rows {
                    *strata.entry(r.complexity).or_insert(0) += 1;
                }
                let weighted = |f: fn(&TaskRow) -> f64| rows.iter().map(|r| f(r) * r.runs as f64).sum::<f64>();
                ModeRow {
                    mode: rows[0].mode,
                    executor: rows[0].executor,
                    tasks: rows.len() as u64,
                    runs,
                    successes: rows.iter().map(|r| r.successes).sum(),
                    mean_pass_hat,
                    mean_context_chars: mean(weighted(|r| r.mean_context_chars), runs),
                    mean_error_count: mean(weighted(|r| r.mean_error_count), runs),
                    strata,
                }
            })
            .collect();
        Report { tasks, modes }
    }

    /// Plain-text tables. Deterministic for a given record set.
    pub fn render(&self) -> String {
        let max_k = self.tasks.iter().map(|r| r.pass_hat.len()).max().unwrap_or(0);
        let pass_headers: Vec<String> = (1..=max_k).map(|k| format!("pass^{k}")).collect();
        let fmt_pass = |v: Option<&f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));

        let mut out = String::new();
        let mut headers: Vec<String> = ["task", "mode", "executor", "runs", "ok"].map(String::from).to_vec();
        headers.extend(pass_headers.iter().cloned());
        headers.extend(["complexity", "context", "errors", "dispatches", "outcomes"].map(String::from));
        let rows: Vec<Vec<String>> = self
            .tasks
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.task_id.clone(),
                    r.mode.to_string(),
                    r.executor.to_string(),
                    r.runs.to_string(),
                    r.successes.to_string(),
                ];
                row.extend((0..max_k).map(|k| fmt_pass(r.pass_hat.get(k))));
                row.push(r.complexity.to_string());
                row.push(format!("{:.1}", r.mean_context_chars));
                row.push(format!("{:.2}", r.mean_error_count));
                row.push(format!("{:.2}", r.mean_dispatches));
                row.push(r.outcomes.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(","));
                row
            })
            .collect();
        out.push_str("Runs by task\n");
        out.push_str(&table(&headers, &rows, 3));

        let mut headers: Vec<String> = ["mode", "executor", "tasks", "runs", "ok"].map(String::from).to_vec();
        headers.extend(pass_headers.iter().cloned());
        headers.extend(["context", "errors", "low", "medium", "high"].map(String::from));
        let rows: Vec<Vec<String>> = self
            .modes
            .iter()
            .map(|m| {
                let mut row =
                    vec![m.mode.to_string(), m.executor.to_string(), m.tasks.to_string(), m.runs.to_string(), m.successes.to_string()];
                row.extend((0..max_k).map(|k| fmt_pass(m.mean_pass_hat.get(k))));
                row.push(format!("{:.1}", m.mean_context_chars));
                row.push(format!("{:.2}", m.mean_error_count));
                for c in [Complexity::Low, Complexity::Medium, Complexity::High] {
                    row.push(m.strata.get(&c).copied().unwrap_or(0).to_string());
                }
                row
            })
            .collect();
        out.push_str("\nBy mode\n");
        out.push_str(&table(&headers, &rows, 2));
        out
    }

    /// One JSON object per task row, then one per mode row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.tasks {
            let _ = writeln!(out, "{}", serde_json::json!({ "row": "task", "data": row }));
        }
        for row in &self.modes {
            let _ = writeln!(out, "{}", serde_json::json!({ "row": "mode", "data": row }));
        }
        out
    }
}

/// Pads columns to a common width; the first `text_cols` are left-aligned, the rest right-aligned.
fn table(headers: &[String], rows: &[Vec<String>], text_cols: usize) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < text_cols { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

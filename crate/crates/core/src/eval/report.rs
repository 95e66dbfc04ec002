use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::eval::metrics::{aggregate, metrics, Aggregate, ConfusionCounts, Metrics};

/// Outcome of one leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub validation_subject: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl FoldRecord {
    pub fn new(validation_subject: impl Into<String>, counts: ConfusionCounts) -> Result<Self> {
        Ok(Self {
            validation_subject: validation_subject.into(),
            metrics: metrics(&counts)?,
            counts,
        })
    }
}

/// Cross-validated results for one task and run variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    /// Row label, e.g. "Dense TL".
    pub variant: String,
    pub preset: String,
    pub folds: Vec<FoldRecord>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_folds(
        task: Task,
        variant: impl Into<String>,
        preset: impl Into<String>,
        folds: Vec<FoldRecord>,
    ) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("aggregate", "no folds"));
        }
        let per_fold: Vec<(String, Metrics)> = folds
            .iter()
            .map(|f| (f.validation_subject.clone(), f.metrics))
            .collect();
        Ok(Self {
            task,
            variant: variant.into(),
            preset: preset.into(),
            aggregate: aggregate(&per_fold),
            folds,
        })
    }

    /// A report carrying only mean values, e.g. figures copied from a table.
    pub fn from_means(task: Task, variant: impl Into<String>, means: Metrics) -> Self {
        Self {
            task,
            variant: variant.into(),
            preset: String::new(),
            folds: Vec::new(),
            aggregate: Aggregate::from_means(means),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub variant: String,
    /// Percent strings with one decimal, "n/a" when undefined.
    pub cells: [String; 4],
}

impl TableRow {
    /// The four value cells joined by single spaces.
    pub fn values_line(&self) -> String {
        self.cells.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedTable {
    pub rows: Vec<TableRow>,
    #[serde(skip)]
    pub text: String,
}

pub const TABLE_HEADER: [&str; 6] = ["Task", "Variant", "Accuracy", "Sensitivity", "Specificity", "F1-Score"];
const WIDTHS: [usize; 6] = [12, 14, 9, 12, 12, 9];

pub fn percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x * 100.0),
        None => "n/a".into(),
    }
}

fn line(cols: [&str; 6]) -> String {
    let mut s = String::new();
    for (i, c) in cols.iter().enumerate() {
        if i < 2 {
            let _ = write!(s, "{c:<w$}", w = WIDTHS[i]);
        } else {
            let _ = write!(s, " {c:>w$}", w = WIDTHS[i]);
        }
    }
    s.trim_end().to_string()
}

/// Table of macro means, rows grouped by task (organ, colon, peritoneum)
/// and then by variant in input order.
pub fn render_table(reports: &[MetricsReport]) -> RenderedTable {
    let mut order: Vec<&MetricsReport> = reports.iter().collect();
    order.sort_by_key(|r| Task::ALL.iter().position(|t| *t == r.task));
    let mut text = line(TABLE_HEADER);
    text.push('\n');
    let mut rows = Vec::with_capacity(order.len());
    let mut last_task = None;
    for r in order {
        let means = r.aggregate.means();
        let row = TableRow {
            task: r.task.title().to_string(),
            variant: r.variant.clone(),
            cells: means.values().map(percent),
        };
        let task_cell = if last_task == Some(r.task) { "" } else { row.task.as_str() };
        text.push_str(&line([
            task_cell,
            &row.variant,
            &row.cells[0],
            &row.cells[1],
            &row.cells[2],
            &row.cells[3],
        ]));
        text.push('\n');
        last_task = Some(r.task);
        rows.push(row);
    }
    RenderedTable { rows, text }
}

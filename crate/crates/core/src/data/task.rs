use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Record, TissueClass};
use crate::error::{Error, Result};

/// The three binary problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// HC vs HP
    Organ,
    /// HC vs MC
    Colon,
    /// HP vs MP
    Peritoneum,
}

/// Which class is label 0 and which is label 1. Sensitivity, specificity and
/// F1 are always reported with respect to `positive`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub negative: TissueClass,
    pub positive: TissueClass,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Organ, Task::Colon, Task::Peritoneum];

    pub fn spec(self) -> TaskSpec {
        let (negative, positive) = match self {
            Task::Organ => (TissueClass::HC, TissueClass::HP),
            Task::Colon => (TissueClass::HC, TissueClass::MC),
            Task::Peritoneum => (TissueClass::HP, TissueClass::MP),
        };
        TaskSpec {
            task: self,
            negative,
            positive,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Organ => "organ",
            Task::Colon => "colon",
            Task::Peritoneum => "peritoneum",
        }
    }

    /// Table label such as `HC vs. HP`.
    pub fn title(self) -> String {
        let s = self.spec();
        format!("{} vs. {}", s.negative, s.positive)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "organ" => Ok(Task::Organ),
            "colon" => Ok(Task::Colon),
            "peritoneum" => Ok(Task::Peritoneum),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected organ, colon or peritoneum)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledRecord {
    pub record: Record,
    /// 0 = negative class, 1 = positive class.
    pub label: usize,
}

/// The records of one binary task, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSubset {
    pub spec: TaskSpec,
    pub records: Vec<LabeledRecord>,
}

impl TaskSubset {
    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn for_subjects<'a>(&'a self, subjects: &'a [String]) -> impl Iterator<Item = &'a LabeledRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| subjects.contains(&r.record.subject))
    }
}

/// Keeps the two task classes and relabels them 0 (negative) / 1 (positive).
pub fn select_task(manifest: &DatasetManifest, task: Task) -> Result<TaskSubset> {
    let spec = task.spec();
    let counts = manifest.class_counts();
    for class in [spec.negative, spec.positive] {
        if counts.get(&class).copied().unwrap_or(0) == 0 {
            return Err(Error::Manifest {
                location: manifest.root().display().to_string(),
                detail: format!("task {task} needs class {class}, which has no images"),
            });
        }
    }
    let records = manifest
        .records()
        .iter()
        .filter_map(|r| {
            let label = if r.class == spec.negative {
                0
            } else if r.class == spec.positive {
                1
            } else {
                return None;
            };
            Some(LabeledRecord {
                record: r.clone(),
                label,
            })
        })
        .collect();
    Ok(TaskSubset { spec, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(rows: &[(&str, &str, TissueClass)]) -> DatasetManifest {
        let records = rows
            .iter()
            .map(|(p, s, c)| Record {
                path: p.into(),
                subject: s.to_string(),
                class: *c,
            })
            .collect();
        DatasetManifest::from_records("/d", (8, 8), records).unwrap()
    }

    #[test]
    fn positive_classes() {
        assert_eq!(Task::Organ.spec().positive, TissueClass::HP);
        assert_eq!(Task::Colon.spec().positive, TissueClass::MC);
        assert_eq!(Task::Peritoneum.spec().positive, TissueClass::MP);
    }

    #[test]
    fn filters_and_relabels() {
        let m = manifest(&[
            ("a", "S1", TissueClass::HC),
            ("b", "S1", TissueClass::MP),
            ("c", "S2", TissueClass::MC),
            ("d", "S2", TissueClass::HP),
        ]);
        let colon = select_task(&m, Task::Colon).unwrap();
        let labels: Vec<_> = colon.records.iter().map(|r| (r.record.path.to_str().unwrap(), r.label)).collect();
        assert_eq!(labels, vec![("a", 0), ("c", 1)]);
        assert_eq!(select_task(&m, Task::Colon).unwrap(), colon);
    }

    #[test]
    fn absent_class_rejects() {
        let m = manifest(&[("a", "S1", TissueClass::HC), ("b", "S2", TissueClass::HP)]);
        assert!(select_task(&m, Task::Organ).is_ok());
        let err = select_task(&m, Task::Colon).unwrap_err();
        assert!(err.to_string().contains("MC"));
    }
}

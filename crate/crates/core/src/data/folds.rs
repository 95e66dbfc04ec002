use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::task::{LabeledRecord, Task, TaskSubset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub validation_subject: String,
    pub training_subjects: Vec<String>,
}

impl Fold {
    pub fn training_records<'a>(&'a self, subset: &'a TaskSubset) -> Vec<&'a LabeledRecord> {
        subset.for_subjects(&self.training_subjects).collect()
    }

    pub fn validation_records<'a>(&'a self, subset: &'a TaskSubset) -> Vec<&'a LabeledRecord> {
        subset
            .records
            .iter()
            .filter(|r| r.record.subject == self.validation_subject)
            .collect()
    }
}

/// Leave-one-subject-out folds for one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub task: Task,
    pub folds: Vec<Fold>,
    /// Subjects lacking one of the task classes: never validated on, but
    /// their images stay in every training pool.
    pub omitted: Vec<String>,
}

impl FoldPlan {
    pub fn fold(&self, subject: &str) -> Option<&Fold> {
        self.folds.iter().find(|f| f.validation_subject == subject)
    }
}

/// One fold per subject that has images of both task classes, in sorted
/// subject order. Each fold trains on every other subject with task images.
pub fn loso_folds(subset: &TaskSubset) -> Result<FoldPlan> {
    let mut labels: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for r in &subset.records {
        labels.entry(&r.record.subject).or_default().insert(r.label);
    }
    let all: Vec<String> = labels.keys().map(|s| s.to_string()).collect();
    let (eligible, omitted): (Vec<String>, Vec<String>) =
        all.iter().cloned().partition(|s| labels[s.as_str()].len() == 2);
    if eligible.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "loso_folds",
            detail: format!(
                "task {} needs at least 2 subjects with both classes, found {}",
                subset.task(),
                eligible.len()
            ),
        });
    }
    let folds = eligible
        .iter()
        .map(|v| Fold {
            validation_subject: v.clone(),
            training_subjects: all.iter().filter(|s| *s != v).cloned().collect(),
        })
        .collect();
    Ok(FoldPlan {
        task: subset.task(),
        folds,
        omitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{DatasetManifest, Record, TissueClass};
    use crate::data::task::select_task;

    fn subset(rows: &[(&str, TissueClass)], task: Task) -> TaskSubset {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (s, c))| Record {
                path: format!("{i}.png").into(),
                subject: s.to_string(),
                class: *c,
            })
            .collect();
        select_task(&DatasetManifest::from_records("/d", (8, 8), records).unwrap(), task).unwrap()
    }

    #[test]
    fn two_complete_subjects_give_two_folds() {
        use TissueClass::*;
        let s = subset(&[("A", HC), ("A", HP), ("B", HC), ("B", HP)], Task::Organ);
        let plan = loso_folds(&s).unwrap();
        assert_eq!(plan.folds.len(), 2);
        assert_eq!(plan.folds[0].training_subjects, vec!["B"]);
        assert_eq!(plan.folds[1].training_subjects, vec!["A"]);
        assert_eq!(plan.folds[0].validation_records(&s).len(), 2);
        assert_eq!(plan.folds[0].training_records(&s).len(), 2);
    }

    #[test]
    fn incomplete_subject_trains_but_never_validates() {
        use TissueClass::*;
        let s = subset(&[("A", HC), ("A", HP), ("B", HC), ("B", HP), ("C", HP)], Task::Organ);
        let plan = loso_folds(&s).unwrap();
        assert_eq!(plan.folds.len(), 2);
        assert_eq!(plan.omitted, vec!["C"]);
        assert!(plan.folds.iter().all(|f| f.training_subjects.contains(&"C".to_string())));
        assert!(plan.fold("C").is_none());
    }

    #[test]
    fn fewer_than_two_eligible_rejects() {
        use TissueClass::*;
        let s = subset(&[("A", HC), ("A", HP), ("B", HC)], Task::Organ);
        assert!(loso_folds(&s).is_err());
    }
}

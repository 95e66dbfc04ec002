use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::weights::format::{WeightContainer, WeightEntry};

/// Rewrites a container name prefix before matching, e.g. `features.` → ``.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenameRule {
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportPolicy {
    /// Leave the classifier as freshly initialized.
    pub skip_head: bool,
    /// Fail unless every non-head model tensor is matched.
    pub strict: bool,
    /// Copy batch-norm running statistics; otherwise they are re-estimated.
    pub import_running_stats: bool,
    /// Applied in order; the first matching prefix wins.
    pub renames: Vec<RenameRule>,
}

impl Default for ImportPolicy {
    fn default() -> Self {
        Self {
            skip_head: true,
            strict: true,
            import_running_stats: true,
            renames: Vec::new(),
        }
    }
}

impl ImportPolicy {
    /// Every tensor, head included, must be present. Used to reload a
    /// trained model.
    pub fn exact() -> Self {
        Self {
            skip_head: false,
            ..Self::default()
        }
    }

    pub fn map_name<'a>(&self, name: &'a str) -> std::borrow::Cow<'a, str> {
        for r in &self.renames {
            if let Some(rest) = name.strip_prefix(r.from.as_str()) {
                return format!("{}{rest}", r.to).into();
            }
        }
        name.into()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamStatus {
    Imported,
    /// Head tensor left at its fresh initialization.
    SkippedHead,
    /// Running statistic left for re-estimation.
    SkippedStats,
    /// No container entry; keeps its initialization (non-strict only).
    Missing,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub params: Vec<(String, ParamStatus)>,
    /// Container entries that matched nothing in the model.
    pub unused: Vec<String>,
}

impl ImportReport {
    pub fn count(&self, status: &ParamStatus) -> usize {
        self.params.iter().filter(|(_, s)| s == status).count()
    }
}

/// Copies container tensors into `model` by (renamed) name.
///
/// Shapes must agree exactly; the 3-channel input layer is taken as-is.
/// Nothing in the model is modified unless the whole import succeeds.
pub fn import_pretrained<T: Scalar>(
    model: &mut Model<T>,
    container: &WeightContainer,
    policy: &ImportPolicy,
) -> Result<ImportReport> {
    let mut by_target: HashMap<String, &WeightEntry> = HashMap::new();
    for e in container.entries() {
        let target = policy.map_name(&e.name).into_owned();
        if let Some(prev) = by_target.insert(target.clone(), e) {
            return Err(Error::Import(format!(
                "entries {:?} and {:?} both map to {target:?}",
                prev.name, e.name
            )));
        }
    }
    let head: Vec<String> = model.head_param_names();
    let mut report = ImportReport::default();
    let mut staged = Vec::new();
    let mut used = std::collections::HashSet::new();
    for (name, p) in model.named_params() {
        let is_head = head.contains(&name);
        let status = if is_head && policy.skip_head {
            used.extend(by_target.get(&name).map(|e| e.name.clone()));
            ParamStatus::SkippedHead
        } else if !p.is_trainable() && !policy.import_running_stats {
            used.extend(by_target.get(&name).map(|e| e.name.clone()));
            ParamStatus::SkippedStats
        } else if let Some(e) = by_target.get(&name) {
            if e.shape != p.tensor.shape() {
                return Err(Error::Import(format!(
                    "{name}: container entry {:?} has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            staged.push((name.clone(), e.to_tensor::<T>()?));
            used.insert(e.name.clone());
            ParamStatus::Imported
        } else if policy.strict && !is_head {
            return Err(Error::Import(format!("no container entry for model parameter {name}")));
        } else {
            ParamStatus::Missing
        };
        report.params.push((name, status));
    }
    report.unused = container
        .entries()
        .iter()
        .filter(|e| !used.contains(&e.name))
        .map(|e| e.name.clone())
        .collect();
    let mut staged: HashMap<String, _> = staged.into_iter().collect();
    for (name, p) in model.named_params_mut() {
        if let Some(t) = staged.remove(&name) {
            p.tensor.data_mut().copy_from_slice(t.data());
            p.tensor.clear_grad();
            if !p.is_trainable() {
                p.ready = true;
            }
        }
    }
    for (name, status) in &report.params {
        log::debug!("import {name}: {status:?}");
    }
    if !report.unused.is_empty() {
        log::info!("{} container entries unused", report.unused.len());
    }
    Ok(report)
}

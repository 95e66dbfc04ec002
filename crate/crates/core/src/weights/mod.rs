//! NTWC named-tensor container and pretrained-weight import.

mod format;
mod import;

pub use format::{WeightContainer, WeightData, WeightEntry, HEADER_LEN, MAGIC, VERSION};
pub use import::{import_pretrained, ImportPolicy, ImportReport, ParamStatus, RenameRule};

use crate::error::Result;
use crate::nn::Model;
use crate::scalar::Scalar;

/// Every parameter and running statistic under its hierarchical name.
pub fn export_weights<T: Scalar>(model: &Model<T>) -> Result<WeightContainer> {
    let mut c = WeightContainer::new();
    for (name, p) in model.named_params() {
        c.push(WeightEntry::from_tensor(name, &p.tensor)?)?;
    }
    Ok(c)
}

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

use super::TaskKind;

/// Targets for one batch, matching the head's output layout.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    /// Row-major `batch × out` values in the head's target space.
    Values(Vec<f64>),
}

/// Cross-entropy for classification, mean absolute error otherwise.
pub fn task_loss(g: &mut Graph, kind: &TaskKind, predictions: Var, targets: &BatchTargets) -> Result<Var> {
    match (kind, targets) {
        (TaskKind::Classification { .. }, BatchTargets::Classes(classes)) => {
            g.cross_entropy(predictions, classes)
        }
        (TaskKind::Regression { .. } | TaskKind::Landmarks { .. }, BatchTargets::Values(values)) => {
            g.l1_loss(predictions, values)
        }
        (kind, _) => Err(Error::Target(format!("targets do not match task kind {kind:?}"))),
    }
}

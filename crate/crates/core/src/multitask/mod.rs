mod bundle;
mod head;
mod loss;
mod model;

pub use bundle::{Bundle, BundleManifest, BundleTask};
pub use head::{HeadBinding, TargetNorm, TaskHead, TaskKind, DEFAULT_HIDDEN};
pub use loss::{task_loss, BatchTargets};
pub use model::{argmax, MultiTaskModel, TaskOutput};

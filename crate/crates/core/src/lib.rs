//! Differentiable image augmentation operations, augmentation policies,
//! the adversarial critic objective and the policy search loop.

pub mod adam;
pub mod augment;
mod bits;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod gradcheck;
pub mod objective;
pub mod ops;
pub mod policy;
pub mod policy_file;
pub mod reference;
pub mod rng;
pub mod search;
pub mod synthetic;

pub use data::{DataError, DatasetBundle};
pub use objective::LossReport;
pub use ops::{MagnitudeClass, OpKind};
pub use policy::{Mode, ParamMap, Policy};
pub use policy_file::PolicyFile;
pub use search::{run_search, SearchConfig, SearchError, SearchOutcome, SearchState, Searcher};
pub use synthetic::{make_synthetic, GroundTruth, SyntheticSpec};

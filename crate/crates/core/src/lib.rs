//! Streaming coreset trees over feature vectors, hierarchical sampling of the
//! tree into bounded training sets, and a synthetic tracking-by-detection loop
//! that learns its appearance model from those summaries.

pub mod classifier;
pub mod error;
pub mod lowrank;
pub mod sampling;
pub mod tracker;
pub mod tree;

pub use classifier::{LinearModel, TrainParams};
pub use error::{Error, Result};
pub use lowrank::{CoresetBlock, DataBlock, ReductionParams};
pub use sampling::{RowSource, SampleSet};
pub use tree::{CoresetNode, CoresetTree, MergeReport, StreamStats, TreeView};

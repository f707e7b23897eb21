//! Core library: tensors and autodiff, elastic weight-sharing networks,
//! semi-supervised training, and training-free candidate scoring.

mod bytes;
pub mod data;
pub mod error;
pub mod plan;
pub mod rng;
pub mod space;
pub mod ssl;
pub mod supernet;
pub mod tensor;
pub mod trainer;
pub mod zeroshot;

pub use data::{Dataset, SplitTag};
pub use error::{Error, Result};
pub use space::{ArchConfig, LatencyModel, ResourceReport, SearchSpace, StageSpec};
pub use ssl::{DistillView, LossMode, PseudoLabelResult, SslBatch};
pub use supernet::{LoadedModel, Standalone, SubnetView, Supernet};
pub use tensor::{Graph, NodeId, OptimState, ParamStore, Tensor};
pub use trainer::{SamplingStrategy, StepRecord, TrainConfig};
pub use zeroshot::{Constraint, ConstraintKind, ConstraintSet, ScoredCandidate};

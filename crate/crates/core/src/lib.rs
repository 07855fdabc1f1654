pub mod data;
pub mod diffusion;
pub mod error;
pub mod former;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod procrustes;
pub mod rmnrd;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{Joints2D, Joints3D, MeasurementSequence, PoseSequence, Rotation};
pub use procrustes::AlignmentResult;
pub use data::{GeneratorParams, SequenceFile, Skeleton, SyntheticScene};
pub use diffusion::{DiffusionPrior, NoiseSchedule};
pub use former::{FormerModel, ModelConfig};
pub use losses::{LossBreakdown, LossConfig};
pub use metrics::{EvalOptions, EvalReport};
pub use rmnrd::{fit_sequence, RmnrdDecomposition, SolverConfig};
pub use tensor::{Graph, Tensor};

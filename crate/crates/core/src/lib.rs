//! Discrete speech unit pipeline.
//!
//! Stage 1 learns per-layer aggregation weights by training a linear CTC
//! probe on the softmax-weighted sum of a frontend's layer features. Stage 2
//! freezes those weights, quantizes the aggregated features with k-means,
//! post-processes the unit streams (de-duplication, BPE) and trains a
//! discrete-token CTC probe whose error rate is compared with the
//! continuous one.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common instantiations.

pub mod aggregator;
pub mod ctc;
pub mod discrete_probe;
pub mod error;
pub mod feature_store;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod quantizer;
pub mod scalar;
pub mod sidecar;
pub mod tokenproc;

pub use aggregator::{AggregationMode, LayerWeights};
pub use error::{Error, Result};
pub use feature_store::{FeatureArchive, SynthSpec, Utterance};
pub use discrete_probe::{DiscreteConfig, DiscreteProbeModel};
pub use matrix::Matrix;
pub use pipeline::{run_pipeline, PipelineConfig, RunReport};
pub use probe::{ProbeModel, TrainConfig};
pub use quantizer::{Codebook, KmeansConfig};
pub use scalar::Scalar;
pub use tokenproc::{BpeModel, UnitSequence};

pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type LayerWeightsF32 = LayerWeights<f32>;
pub type LayerWeightsF64 = LayerWeights<f64>;
pub type CodebookF32 = Codebook<f32>;
pub type CodebookF64 = Codebook<f64>;
pub type ProbeModelF32 = ProbeModel<f32>;
pub type ProbeModelF64 = ProbeModel<f64>;
pub type DiscreteProbeModelF32 = DiscreteProbeModel<f32>;
pub type DiscreteProbeModelF64 = DiscreteProbeModel<f64>;

//! Multi-view flow features, KNN flow hypergraphs, two-phase hypergraph
//! convolution and dual contrastive training for traffic classification.

pub mod augment;
pub mod checkpoint;
pub mod contrast;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod extractors;
pub mod hypergraph;
pub mod ingest;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use augment::AugmentationPipeline;
pub use contrast::ContrastConfig;
pub use detect::{detect, DetectionRecord, WindowSpec};
pub use encoder::EncoderConfig;
pub use eval::MetricsReport;
pub use extractors::{ExtractorConfig, ViewBatch};
pub use hypergraph::FlowHypergraph;
pub use ingest::{FiveTuple, FlowRecord, PacketView, Protocol};
pub use model::{Model, ModelConfig};
pub use tensor::{ParameterStore, Rng, Tensor};
pub use trainer::{fit, Dataset, FitResult, LabelSet, TrainConfig};

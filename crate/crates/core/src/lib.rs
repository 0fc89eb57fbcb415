//! Link-aware temporal link prediction: a temporal graph store, query-aware
//! history sampling, multi-channel attention images, a small convolutional
//! classifier with class activation maps, training, and a memory baseline.

pub mod baseline;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod predictor;
pub mod sampler;
pub mod synthetic;
pub mod trainer;

pub use baseline::{edgebank_eval, edgebank_score, EdgeMemory};
pub use checkpoint::{CheckpointHeader, CheckpointMeta};
pub use encoder::{assemble_image, assemble_image_with, ChannelImage, Encoder, NUM_CHANNELS};
pub use error::{Error, Result};
pub use graph::{
    chronological_split, load_csv, sample_negative, DatasetSplit, Link, NodeId, NodeMap, TemporalGraph,
};
pub use metrics::evaluate_auc;
pub use model::{link_importance, predict_score, CamMap, EffNet, EffNetSpec};
pub use param::{Param, Parameterized};
pub use predictor::{Explanation, LinkPredictor, ModelConfig};
pub use sampler::{sample_sequence, LinkSequence, Origin, SamplingConfig};
pub use trainer::{evaluate_split, train, EpochReport, EvalReport, TimeScale, TrainConfig, TrainOutcome};

//! Relativistic performance prediction for cell-based architectures.
//!
//! Cells ([`cellgraph`]) are priced by [`costmodel`], turned into 19×7×7
//! tensors by [`encoder`] and scored by a small convolutional network
//! ([`tensornet`]) trained with the pairwise and triplet losses of
//! [`ranking`]. [`evosearch`] uses the scores as fitness; [`metrics`]
//! measures rank agreement; [`datastore`] holds labelled records.

pub mod cellgraph;
pub mod costmodel;
pub mod datastore;
pub mod encoder;
pub mod evosearch;
pub mod metrics;
pub mod ranking;
pub mod tensornet;
pub mod trainer;

pub use cellgraph::{CellError, CellGraph, Op};
pub use datastore::{ArchRecord, StoreError};
pub use encoder::{EncodeError, Encoder, FeatureTensor, NormScaler};
pub use evosearch::{EaConfig, SearchError};
pub use metrics::{MetricError, RankReport};
pub use ranking::{LossConfig, LossError};
pub use tensornet::{NetError, PredictorArch, PredictorModel};
pub use trainer::{TrainConfig, TrainError};

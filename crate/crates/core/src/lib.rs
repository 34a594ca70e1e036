//! Harness for CT-volume COVID classification pipelines.
//!
//! Deep-network inference is externalized: models report sub-volume or
//! per-slice predictions through a line-delimited prediction file, and this
//! crate handles everything around them. That covers slice ingestion and HU
//! windowing, image and volume preprocessing, deterministic sub-volume
//! sampling with flip-based test-time augmentation, vote aggregation, the
//! `(96, 3)` slice-probability features with trainable heads, and macro-F1
//! evaluation.

pub mod aggregate;
pub mod error;
pub mod eval;
pub mod heads;
pub mod ingest;
pub mod predictor;
pub mod preprocess;
pub mod sampling;
pub mod types;

mod util;

pub use aggregate::{FeatureMatrix, SliceClass, SliceFilterConfig, VoteThresholds};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, FoldAssignment, Metrics};
pub use heads::{HeadKind, HeadModel, TrainConfig};
pub use ingest::{PredictionKind, PredictionRecord, WindowSpec};
pub use predictor::{FilePredictor, Predictor, SyntheticPredictor, SyntheticPredictorConfig, VolumeKey};
pub use preprocess::{BBox, FlipSpec, MiniVolume};
pub use sampling::{SubVolumePlan, TtaPlan};
pub use types::{Image, Label, Volume};

//! Synthetic tracking-by-detection loop driven by coreset summaries.

pub mod detect;
pub mod kalman;
pub mod pipeline;
pub mod stream;

pub use detect::{detect, Detection};
pub use kalman::{em_fit, kalman_predict, kalman_update, KalmanState, NoiseParams};
pub use pipeline::{
    evaluate, run_cat, ExecutionMode, FrameRecord, TrackRun, TrackerConfig, TrainingSource,
};
pub use stream::{generate_stream, Candidate, Frame, GroundTruth, SyntheticStreamConfig};

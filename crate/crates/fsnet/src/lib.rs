//! Small convolutional networks, gradient-based and black-box adversarial
//! attacks against them, and an entropy detector that flags attacked inputs
//! from the texture of guided-backpropagation feature response maps.

pub mod attacks;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod network;
pub mod response;
pub mod tensor;
#[cfg(feature = "testkit")]
pub mod testkit;
pub mod weights;

pub use attacks::{
    boundary_attack, deepfool, fgsm, gradient_attack, one_pixel_attack, AttackResult,
    BoundaryConfig, DeepFoolConfig, OnePixelConfig,
};
pub use data::{load_idx, load_netpbm, save_pgm, save_ppm, synth_shapes, Dataset};
pub use detector::{
    average_entropy, calibrate_threshold, decide, detect, local_spatial_entropy, DetectionScore,
    DetectorConfig, EntropyMap, EntropyMode, Verdict,
};
pub use error::{Error, Result};
pub use eval::{
    detection_rate_at_fpr, entropy_score, histogram_csv, outcomes_csv, paired_scores,
    parse_outcomes_csv, roc, roc_csv, run_experiment, sample_seed, summarize, summary_csv,
    summary_table, AttackSpec, AttackSummary, RocCurve, RocPoint, SampleOutcome,
};
pub use network::{
    EpochMetrics, ForwardTrace, LayerSpec, Model, NetworkSpec, Parameters, TrainSchedule,
};
pub use response::{guided_backprop, to_grayscale, FeatureResponse, GrayscaleMap};
pub use tensor::{PoolSwitches, Tensor};
pub use weights::{load_weights, save_weights};

//! On-disk formats: activation, feature and checkpoint files (binary,
//! little-endian, `f32` payloads), the metrics CSV, and run configuration.

mod activations;
mod bytes;
mod checkpoint;
mod config;
mod features;
mod metrics;

pub use activations::{
    read_activations, write_activations, ActivationReader, ActivationWriter,
    ACTIVATION_HEADER_LEN, ACTIVATION_MAGIC, ACTIVATION_VERSION,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    ExactState, Moments, CHECKPOINT_HEADER_LEN, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, FLAG_EXACT,
    FLAG_MOMENTS,
};
pub use config::{config_from_map, load_config, parse_config, ConfigKey, CONFIG_KEYS};
pub use features::{
    decode_features, encode_features, read_features, write_features, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use metrics::{append_metrics, read_metrics, sig9, MetricsRecord, MetricsWriter, METRICS_HEADER};

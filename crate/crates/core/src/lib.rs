pub mod audio_io;
pub mod cognitive_effects;
pub mod config;
pub mod distortion_metrics;
pub mod ear_model;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod salience_mapping;
pub mod stats;
pub mod synth;

//! Numeric core of the U-DFA segmentation stack.
//!
//! Everything here is allocation-only and free of IO so it builds under
//! `no_std` (disable the default `std` feature). The tensor model, file
//! formats, and CLI live in the `udfa` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod array;
pub mod augment;
pub mod config;
pub mod interp;
pub mod labels;
pub mod metrics;
pub mod rng;
pub mod split;
pub mod synth;

pub use array::{Grid2, SliceSample, Volume, VolumeSample};
pub use config::{
    default_acdc_config, default_synapse_config, BottleneckRoute, ConfigError, DatasetKind,
    ModelConfig, RunConfig, StagePartition, TrainConfig,
};
pub use split::SplitData;

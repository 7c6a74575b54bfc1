//! Command-line surface: synthetic data, dataset preparation, training,
//! inference, evaluation, ablation sweeps and report tables.

pub mod commands;
pub mod synth;

pub use commands::*;
pub use synth::{synthesize_pair, write_dataset, SyntheticStainSpec};

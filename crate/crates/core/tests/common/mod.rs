#![allow(dead_code)]

use std::path::Path;

use vireid::config::ExperimentConfig;
use vireid::data::{generate_synthetic, Manifest, SynthSpec};

/// The default synthetic set (8 identities, both platforms and modalities).
pub fn default_set(dir: &Path) -> Manifest {
    generate_synthetic(&SynthSpec::default(), 0, dir).expect("synthetic set")
}

pub fn config(overrides: &[&str]) -> ExperimentConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_str_with_overrides("", &owned).expect("valid overrides")
}

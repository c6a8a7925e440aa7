pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod intermediary;
pub mod memory;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod style;
pub mod trainer;

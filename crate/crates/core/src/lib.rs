pub mod assembly;
pub mod cli;
pub mod config;
pub mod data;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

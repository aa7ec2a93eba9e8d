pub mod cli;
pub mod cmapss;
pub mod config;
pub mod harness;
pub mod neural;
pub mod physics;
pub mod synth;

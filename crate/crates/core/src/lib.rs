//! Style conversion for multi-style lesion segmentation: synthetic corpora,
//! a small segmentation network with taps, origin probes, targeted
//! input-space attacks that convert annotation style, and the experiment
//! harness around them.

pub mod attack;
pub mod cli;
pub mod corpus;
pub mod harness;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod segcore;
pub mod styleops;
pub mod viz;

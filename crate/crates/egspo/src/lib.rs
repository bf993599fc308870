//! File formats, the `egspo` command line and the experiment harness built
//! on `egspo-core`.

pub mod cli;
pub mod clock;
pub mod harness;
pub mod persistence;
pub mod selftest;

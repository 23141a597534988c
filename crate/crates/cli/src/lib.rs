//! Pipeline files, the pipeline runner, the weak-scaling harness and the
//! shipped demos behind the `boxmr` command.

pub mod app;
pub mod bench;
pub mod demo;
pub mod pipeline;
pub mod runner;

pub use boxmr;

//! Training, evaluation and analysis around the toy models, plus the
//! command-line front end.

pub mod ablate;
pub mod analysis;
pub mod cli;
pub mod data;
pub mod models;
pub mod optim;
pub mod suites;
pub mod train;

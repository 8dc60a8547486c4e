pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod frontend;
pub mod gradcheck;
pub mod lgs;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod simulator;
pub mod trainer;
pub mod wav;

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod kan;
pub mod nn;
pub mod attention;
pub mod model;
pub mod matching;
pub mod synthfield;
pub mod metrics;
pub mod optim;
pub mod train;
pub mod checkpoint;
pub mod cli;
pub mod config;

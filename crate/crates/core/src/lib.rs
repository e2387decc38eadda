pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod imu;
pub mod masking;
pub mod model;
pub mod nn;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod protocols;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};

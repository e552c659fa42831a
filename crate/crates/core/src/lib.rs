pub mod schedule;
pub mod tensor;
pub mod model;
pub mod data;
pub mod metrics;
pub mod train;
pub mod config;

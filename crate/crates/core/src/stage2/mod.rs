//! Stage 2.
pub mod edm;
pub mod model;
pub mod sample;
pub mod train;

//! A desk-scale detector and synthetic benchmark for exercising the
//! alignment losses end to end.

pub mod dataset;
pub mod detector;
pub mod loss;
pub mod map;
pub mod scene;
pub mod train;

//! Plain-slice numeric kernels behind the graph operations.

pub mod conv;
pub mod norm;
pub mod roi;

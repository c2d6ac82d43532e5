pub mod dataset;
pub mod dynamics;
pub mod eval;
pub mod input;
pub mod render;
pub mod seg;
pub mod selfcheck;
pub mod sim;

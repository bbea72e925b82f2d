pub mod eval;
pub mod fold;
pub mod generate;
pub mod predict;
pub mod train;

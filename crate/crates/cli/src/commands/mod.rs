pub mod ablate;
pub mod build_graph;
pub mod convert;
pub mod eval;
pub mod plot;
pub mod predict;
pub mod sweep;
pub mod train;

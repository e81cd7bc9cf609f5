pub mod fixtures;
pub mod graph_ops;
pub mod periods;

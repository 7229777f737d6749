pub mod numerics;
pub mod dataio;
pub mod semantic;
pub mod quantizer;
pub mod graph;
pub mod gnn;
pub mod recommender;
pub mod eval;
pub mod synthetic;
pub mod pipeline;
pub mod checks;

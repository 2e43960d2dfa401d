pub mod bench;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod objective;
pub mod optim;
pub mod render;
pub mod sage;
pub mod sl3;
pub mod synth;

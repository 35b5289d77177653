pub mod checkpoint;
pub mod embedding_store;
pub mod eval;
pub mod gat;
pub mod geometry;
pub mod graph;
pub mod label_space;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod run;
pub mod synth;
pub mod train;
pub mod visual;

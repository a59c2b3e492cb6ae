//! Contrastive video representation learning with a curriculum over the
//! temporal span from which positive clips are drawn, plus an auxiliary
//! loss that regresses the frame distance between positives.

pub mod adcore;
pub mod eval;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod synthvid;
pub mod train;

pub use adcore::{AdError, Graph, Real, Stream, Tensor, Var};

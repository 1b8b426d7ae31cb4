//! Round-based simulation of federated learning over clients with
//! heterogeneous compute and time-varying uplinks.
//!
//! The server picks a diverse subset of clients each round by greedy
//! facility-location maximization over their historical updates, then gives
//! every selected client the largest Top-k compression ratio that still lets
//! it finish within the round's share of the remaining time budget. Uploads
//! are sparsified with per-client error feedback. Four baselines run on the
//! same simulated environment for paired comparison.
//!
//! ```
//! use fedsim::compression::{densify, top_k_compress};
//! use fedsim::DenseVector;
//!
//! let g = DenseVector::from(vec![3.0, -1.0, 2.0, 0.5]);
//! let (update, residual) = top_k_compress(&g, 0.5).unwrap();
//! assert_eq!(update.indices, vec![0, 2]);
//! assert_eq!(densify(&update).add(&residual), g);
//! ```

pub mod cli;
pub mod compression;
pub mod config;
pub mod datagen;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod ratioplan;
pub mod report;
pub mod rng;
pub mod selection;
pub mod simenv;
mod vector;

pub use error::{Error, Result};
pub use vector::DenseVector;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/ratios.md")]
    mod ratios {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/rounds.md")]
    mod rounds {}
}

//! Cooperative multi-agent Q-learning with value factorization over
//! dynamically generated agent graphs.
//!
//! Individual recurrent Q-networks act on local observations only. During
//! training a graph generator samples a sparse agent graph per timestep, a
//! masked attention layer blends the individual Q-values over that graph, and
//! a state-conditioned hypernetwork combines the result monotonically into the
//! joint value. VDN, QMIX and the graph ablations share the same pipeline.

pub mod agents;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod graphgen;
pub mod mixers;
pub mod networks;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

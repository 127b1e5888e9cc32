//! Numerics for the Lotka-Volterra SDE with a deformed-GOE interaction matrix:
//! the realizability frontier, the invariant Gibbs measure, the Parisi
//! functional and its Ruelle-cascade representation.

pub mod error;
pub mod frontier;
pub mod gibbs;
pub mod optim;
pub mod parisi;
pub mod quad;
pub mod randmat;
pub mod rpc;
pub mod rng;
pub mod sde;
pub mod special;

pub use error::{Error, Result};

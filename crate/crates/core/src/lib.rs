//! Data-adapted architecture search: easiness profiling, a block x operator
//! supernet with Gumbel-Softmax mixtures and a FLOPs penalty, and a search
//! driver that grows the class subset while pruning candidates.

pub mod data;
pub mod easiness;
pub mod error;
pub mod nn;
pub mod search;
pub mod seed;
pub mod supernet;
pub mod train;

pub use error::{Error, Result};

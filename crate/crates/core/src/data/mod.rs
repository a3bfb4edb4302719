pub mod csv;
pub mod dataset;
pub mod idx;
pub mod synth;

pub use self::csv::load_csv;
pub use dataset::{Dataset, Provenance, SplitPair};
pub use idx::{load_idx, write_idx};
pub use synth::SynthSpec;

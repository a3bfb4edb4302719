//! Search driver, its configuration and logs, plus final training of the
//! derived architecture.

pub mod ablate;
pub mod config;
pub mod driver;
pub mod finetune;
pub mod log;

pub use ablate::{ablate, ablate_one, ablation_csv, AblationMode, AblationRow};
pub use config::{class_count, ArchNorm, SearchConfig, SpaceRef, MIN_BATCH};
pub use driver::{
    check_ranking, phases, phases_for, planned_forwards, run_search, ArchStep, Phase, SearchOutcome, Searcher,
};
pub use finetune::{default_fit, finetune, mean_std, Metrics};
pub use log::{write_logit_history, EpochRow, LogitRow, SearchLog};

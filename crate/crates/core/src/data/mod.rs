//! Demonstrations, keyframes, the synthetic task generator, dataset files
//! and evaluation.

pub mod episode;
pub mod eval;
pub mod io;
pub mod keyframes;
pub mod synthetic;

pub use episode::{Episode, KeyframeAction, Observation, Step};
pub use eval::{evaluate, EvalConfig, EvalMetrics, GtPolicy, ModelPolicy, Policy};
pub use io::{load_dataset, save_dataset, DatasetManifest};
pub use keyframes::extract_keyframes;
pub use synthetic::{gen_episode, gen_synthetic, SyntheticTaskSpec, Task};

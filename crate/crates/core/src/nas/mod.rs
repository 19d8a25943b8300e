//! Reinforcement-learning architecture search.
//!
//! A recurrent [`Controller`] emits one token per decision slot of a
//! [`SearchSpace`]; each sampled child is noise-trained, evaluated over `K`
//! weight-noise samples, and the chosen statistic of that distribution is the
//! reward for a policy-gradient update.

mod controller;
mod search;
mod space;

pub use controller::{Controller, ControllerConfig, UpdateInfo};
pub use search::{
    best_episode, check_termination, compute_reward, run_random_search, run_search, train_child, ChildConfig,
    ChildOutcome, EpisodeRecord, SearchConfig, SearchResult, Termination, DEFAULT_REPEAT_LIMIT,
};
pub use space::{Dimension, LayerKind, SearchSpace, Slot};

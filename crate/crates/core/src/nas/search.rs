use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::controller::{Controller, ControllerConfig};
use super::space::SearchSpace;
use crate::arch::ArchitectureSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_distribution, reduce, EvalDistribution, Statistic};
use crate::nn::Model;
use crate::noise::{derive_seed, NoiseSpec};
use crate::train::{train, TrainConfig};

const CONTROLLER_INIT: u64 = 0x4354_4c49;
const CONTROLLER_SAMPLE: u64 = 0x4354_4c53;
const RANDOM_SAMPLE: u64 = 0x524e_4453;
const CHILD: u64 = 0x4348_4c44;
const TRAIN_NOISE: u64 = 0x544e_5345;
const EVAL_NOISE: u64 = 0x454e_5345;

/// Consecutive identical samples that end a search.
pub const DEFAULT_REPEAT_LIMIT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ChildConfig {
    fn default() -> Self {
        ChildConfig {
            epochs: 1,
            batch_size: 32,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub episodes: usize,
    pub child: ChildConfig,
    /// Noise samples per child evaluation.
    pub samples: usize,
    pub statistic: Statistic,
    /// Weight noise used both for child training and for evaluation.
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
    pub repeat_limit: usize,
    pub controller: ControllerConfig,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.samples == 0 || self.repeat_limit == 0 {
            return Err(Error::InvalidArgument(
                "episodes, samples and repeat limit must be at least 1".into(),
            ));
        }
        NoiseSpec::new(self.mu, self.sigma, 0).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub tokens: Vec<usize>,
    pub architecture: ArchitectureSpec,
    pub log_prob: f64,
    pub reward: f64,
    /// Absent when the child failed.
    pub distribution: Option<EvalDistribution>,
    pub train_batches: u64,
    pub skipped_batches: u64,
    pub failure: Option<String>,
    pub baseline: Option<f64>,
    pub advantage: Option<f64>,
    /// Not part of the serialized record so that histories are reproducible;
    /// written to a separate timing log instead.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    EpisodeLimit,
    Converged,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: EpisodeRecord,
    pub history: Vec<EpisodeRecord>,
    pub termination: Termination,
    pub controller: Option<Controller>,
}

pub fn compute_reward(dist: &EvalDistribution, statistic: Statistic) -> Result<f64> {
    reduce(&dist.samples, statistic)
}

/// True once `limit` episodes ran or the last `repeat` architectures were identical.
pub fn check_termination(history: &[EpisodeRecord], limit: usize, repeat: usize) -> bool {
    termination_reason(history, limit, repeat).is_some()
}

fn termination_reason(history: &[EpisodeRecord], limit: usize, repeat: usize) -> Option<Termination> {
    if repeat > 0 && history.len() >= repeat {
        let tail = &history[history.len() - repeat..];
        if tail.iter().all(|r| r.tokens == tail[0].tokens) {
            return Some(Termination::Converged);
        }
    }
    (history.len() >= limit).then_some(Termination::EpisodeLimit)
}

pub struct ChildOutcome {
    pub distribution: EvalDistribution,
    pub train_batches: u64,
    pub skipped_batches: u64,
}

/// Noise-trains a freshly initialized child and evaluates it under noise.
pub fn train_child(
    arch: &ArchitectureSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SearchConfig,
    child_seed: u64,
) -> Result<ChildOutcome> {
    let mut model = Model::init(arch.build()?, child_seed);
    let tcfg = TrainConfig {
        epochs: cfg.child.epochs,
        batch_size: cfg.child.batch_size,
        lr: cfg.child.lr,
        noise: NoiseSpec::new(cfg.mu, cfg.sigma, derive_seed(child_seed, TRAIN_NOISE))?,
        quantize: true,
        seed: child_seed,
    };
    let report = train(&mut model, train_set, &tcfg, None)?;
    let spec = NoiseSpec::new(cfg.mu, cfg.sigma, derive_seed(child_seed, EVAL_NOISE))?;
    let distribution = evaluate_distribution(&model.net, &model.params, test_set, &spec, cfg.samples)?;
    Ok(ChildOutcome {
        distribution,
        train_batches: report.state.batches,
        skipped_batches: report.state.skipped_batches,
    })
}

enum Proposer {
    Policy(Controller),
    Uniform(Vec<usize>),
}

/// Policy-gradient search. `on_episode` sees every record as soon as it exists.
pub fn run_search(
    space: &SearchSpace,
    cfg: &SearchConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_episode: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<SearchResult> {
    space.validate()?;
    let controller = Controller::new(
        &space.cardinalities(),
        cfg.controller.clone(),
        derive_seed(cfg.seed, CONTROLLER_INIT),
    )?;
    search_loop(
        space,
        cfg,
        train_set,
        test_set,
        Proposer::Policy(controller),
        derive_seed(cfg.seed, CONTROLLER_SAMPLE),
        on_episode,
    )
}

/// Uniform random sampling over the same space with the same per-episode budget.
pub fn run_random_search(
    space: &SearchSpace,
    cfg: &SearchConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_episode: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<SearchResult> {
    space.validate()?;
    let cfg = SearchConfig {
        repeat_limit: usize::MAX,
        ..cfg.clone()
    };
    search_loop(
        space,
        &cfg,
        train_set,
        test_set,
        Proposer::Uniform(space.cardinalities()),
        derive_seed(cfg.seed, RANDOM_SAMPLE),
        on_episode,
    )
}

fn search_loop(
    space: &SearchSpace,
    cfg: &SearchConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut proposer: Proposer,
    sample_seed: u64,
    on_episode: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<SearchResult> {
    cfg.validate()?;
    if train_set.image_shape() != test_set.image_shape() || train_set.classes() != test_set.classes() {
        return Err(Error::InvalidArgument(
            "training and test sets disagree on shape or classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let child_base = derive_seed(cfg.seed, CHILD);
    let mut history: Vec<EpisodeRecord> = Vec::new();
    let termination = loop {
        let start = Instant::now();
        let episode = history.len();
        let (tokens, log_prob) = match &proposer {
            Proposer::Policy(c) => c.sample(&mut rng),
            Proposer::Uniform(cards) => {
                let t: Vec<usize> = cards.iter().map(|&c| rng.random_range(0..c)).collect();
                let lp = -cards.iter().map(|&c| (c as f64).ln()).sum::<f64>();
                (t, lp)
            }
        };
        let architecture = space.decode(&tokens, train_set.image_shape(), train_set.classes())?;
        let child_seed = derive_seed(child_base, episode as u64);
        let outcome = train_child(&architecture, train_set, test_set, cfg, child_seed);
        let (reward, distribution, train_batches, skipped_batches, failure) = match outcome {
            Ok(o) => (
                compute_reward(&o.distribution, cfg.statistic)?,
                Some(o.distribution),
                o.train_batches,
                o.skipped_batches,
                None,
            ),
            Err(e) => {
                log::warn!("episode {episode}: child failed: {e}");
                (0.0, None, 0, 0, Some(e.to_string()))
            }
        };
        let (baseline, advantage) = match &mut proposer {
            Proposer::Policy(c) => {
                let info = c.update(&tokens, reward)?;
                (info.baseline_before, Some(info.advantage))
            }
            Proposer::Uniform(_) => (None, None),
        };
        let record = EpisodeRecord {
            episode,
            tokens,
            architecture,
            log_prob,
            reward,
            distribution,
            train_batches,
            skipped_batches,
            failure,
            baseline,
            advantage,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("episode {episode}: reward {reward:.4}");
        on_episode(&record)?;
        history.push(record);
        if let Some(t) = termination_reason(&history, cfg.episodes, cfg.repeat_limit) {
            break t;
        }
    };
    let best = best_episode(&history).clone();
    Ok(SearchResult {
        best,
        history,
        termination,
        controller: match proposer {
            Proposer::Policy(c) => Some(c),
            Proposer::Uniform(_) => None,
        },
    })
}

/// Highest reward; the earliest episode wins ties.
pub fn best_episode(history: &[EpisodeRecord]) -> &EpisodeRecord {
    history
        .iter()
        .reduce(|best, r| if r.reward > best.reward { r } else { best })
        .expect("search histories are never empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_cifar, Split};

    fn record(tokens: Vec<usize>, reward: f64) -> EpisodeRecord {
        let space = SearchSpace::micro();
        EpisodeRecord {
            episode: 0,
            architecture: space.decode(&tokens, [1, 4, 4], 2).unwrap(),
            tokens,
            log_prob: 0.0,
            reward,
            distribution: None,
            train_batches: 0,
            skipped_batches: 0,
            failure: None,
            baseline: None,
            advantage: None,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn termination_rules() {
        assert!(!check_termination(&[], 10, 5));
        let same: Vec<_> = (0..5).map(|_| record(vec![0; 12], 0.5)).collect();
        assert!(check_termination(&same, 10, 5));
        assert!(!check_termination(&same[..4], 10, 5));
        let mut mixed = same.clone();
        mixed[2] = record(vec![1; 12], 0.5);
        assert!(!check_termination(&mixed, 10, 5));
        assert!(check_termination(&mixed, 5, 5));
    }

    #[test]
    fn reward_is_the_statistic() {
        let spec = NoiseSpec::zero(0);
        let d = EvalDistribution::from_samples(spec, 0.9, vec![0.6, 0.8]).unwrap();
        assert!((compute_reward(&d, Statistic::Mean).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(compute_reward(&d, Statistic::P95Min).unwrap(), 0.6);
        let c = EvalDistribution::from_samples(spec, 0.9, vec![0.7; 5]).unwrap();
        for s in [Statistic::Mean, Statistic::P95Min, Statistic::Max] {
            assert_eq!(compute_reward(&c, s).unwrap(), 0.7);
        }
    }

    #[test]
    fn best_prefers_earliest_maximum() {
        let mut h = vec![
            record(vec![0; 12], 0.3),
            record(vec![1; 12], 0.8),
            record(vec![0; 12], 0.8),
        ];
        for (i, r) in h.iter_mut().enumerate() {
            r.episode = i;
        }
        assert_eq!(best_episode(&h).episode, 1);
    }

    fn tiny_cfg(episodes: usize, seed: u64) -> SearchConfig {
        SearchConfig {
            episodes,
            child: ChildConfig {
                epochs: 1,
                batch_size: 16,
                lr: 0.05,
            },
            samples: 2,
            statistic: Statistic::Mean,
            mu: 0.0,
            sigma: 0.04,
            seed,
            repeat_limit: DEFAULT_REPEAT_LIMIT,
            controller: ControllerConfig::default(),
        }
    }

    #[test]
    fn short_search_is_reproducible() {
        let space = SearchSpace {
            fc_hidden: 8,
            ..SearchSpace::micro()
        };
        let train_set = synthetic_cifar(40, 1, Split::Train).unwrap();
        let test_set = synthetic_cifar(20, 2, Split::Test).unwrap();
        let mut seen = 0;
        let a = run_search(&space, &tiny_cfg(3, 7), &train_set, &test_set, &mut |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.termination, Termination::EpisodeLimit);
        let b = run_search(&space, &tiny_cfg(3, 7), &train_set, &test_set, &mut |_| Ok(())).unwrap();
        let json = |h: &[EpisodeRecord]| h.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>();
        assert_eq!(json(&a.history), json(&b.history));
        for r in &a.history {
            // ceil(40 / 16) batches in the single epoch
            assert_eq!(r.train_batches, 3);
            assert_eq!(r.reward, r.distribution.as_ref().unwrap().mean);
        }
        let rnd = run_random_search(&space, &tiny_cfg(2, 7), &train_set, &test_set, &mut |_| Ok(())).unwrap();
        assert_eq!(rnd.history.len(), 2);
        assert!(rnd.controller.is_none());
    }
}

//! Recurrent policy over a fixed sequence of categorical decisions.
//!
//! At step `s` an LSTM cell reads either a learned start vector (`s = 0`) or
//! the embedding of the token chosen at step `s - 1`, and a per-slot linear
//! head turns its hidden state into logits over that slot's options. The
//! heads start at zero, so a fresh controller samples uniformly.
//!
//! Learning is REINFORCE with an exponential-moving-average baseline; the
//! gradient of the sequence log-probability is computed by backpropagation
//! through time and applied with Adam (gradient ascent).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub learning_rate: f64,
    /// Baseline decay: `b <- beta * b + (1 - beta) * reward`.
    pub baseline_decay: f64,
    /// Half-width of the uniform initialization of non-head parameters.
    pub init_scale: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 64,
            embedding: 32,
            learning_rate: 5e-3,
            baseline_decay: 0.95,
            init_scale: 0.1,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    cards: Vec<usize>,
    hidden: usize,
    embedding: usize,
    start: usize,
    /// `emb[s]` embeds the token of slot `s` (input to step `s + 1`).
    emb: Vec<usize>,
    w_x: usize,
    w_h: usize,
    bias: usize,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(cards: &[usize], hidden: usize, embedding: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let start = take(embedding);
        let emb = cards[..cards.len().saturating_sub(1)]
            .iter()
            .map(|&c| take(c * embedding))
            .collect();
        let w_x = take(4 * hidden * embedding);
        let w_h = take(4 * hidden * hidden);
        let bias = take(4 * hidden);
        let head_w = cards.iter().map(|&c| take(c * hidden)).collect();
        let head_b = cards.iter().map(|&c| take(c)).collect();
        Layout {
            cards: cards.to_vec(),
            hidden,
            embedding,
            start,
            emb,
            w_x,
            w_h,
            bias,
            head_w,
            head_b,
            total: at,
        }
    }

    fn input_offset(&self, step: usize, tokens: &[usize]) -> usize {
        if step == 0 {
            self.start
        } else {
            self.emb[step - 1] + tokens[step - 1] * self.embedding
        }
    }
}

/// Per-step activations kept for the backward pass.
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>, // i, f, g, o after their nonlinearities
    c: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    config: ControllerConfig,
    cardinalities: Vec<usize>,
    theta: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_steps: u64,
    baseline: Option<f64>,
    episodes: u64,
    skipped_updates: u64,
}

/// Outcome of one [`Controller::update`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateInfo {
    pub baseline_before: Option<f64>,
    pub advantage: f64,
    /// False for zero advantage or a non-finite gradient.
    pub applied: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Controller {
    pub fn new(cardinalities: &[usize], config: ControllerConfig, seed: u64) -> Result<Self> {
        if cardinalities.is_empty() || cardinalities.contains(&0) {
            return Err(Error::InvalidArgument(
                "controller needs at least one slot with at least one option".into(),
            ));
        }
        if config.hidden == 0 || config.embedding == 0 {
            return Err(Error::InvalidArgument("controller sizes must be positive".into()));
        }
        if !(config.learning_rate > 0.0) || !(0.0..1.0).contains(&config.baseline_decay) {
            return Err(Error::InvalidArgument(
                "controller learning rate must be > 0 and decay in [0, 1)".into(),
            ));
        }
        let layout = Layout::new(cardinalities, config.hidden, config.embedding);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; layout.total];
        let heads_start = layout.head_w[0];
        for v in &mut theta[..heads_start] {
            *v = rng.random_range(-config.init_scale..=config.init_scale);
        }
        let n = theta.len();
        Ok(Controller {
            config,
            cardinalities: cardinalities.to_vec(),
            theta,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_steps: 0,
            baseline: None,
            episodes: 0,
            skipped_updates: 0,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.cardinalities, self.config.hidden, self.config.embedding)
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    pub fn num_parameters(&self) -> usize {
        self.theta.len()
    }

    /// Runs the policy. With `forced` the given tokens are scored; otherwise
    /// tokens are sampled from `rng`.
    fn run(
        &self,
        theta: &[f64],
        forced: Option<&[usize]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<usize>, f64, Vec<StepCache>) {
        let l = self.layout();
        let (hd, ed) = (l.hidden, l.embedding);
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut tokens = Vec::with_capacity(l.cards.len());
        let mut caches = Vec::with_capacity(l.cards.len());
        let mut log_prob = 0.0;
        for (s, &card) in l.cards.iter().enumerate() {
            let x = &theta[l.input_offset(s, &tokens)..][..ed];
            let mut z = theta[l.bias..l.bias + 4 * hd].to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let wx = &theta[l.w_x + r * ed..][..ed];
                let wh = &theta[l.w_h + r * hd..][..hd];
                *zr += wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + wh.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut gates = z;
            for k in 0..hd {
                gates[k] = sigmoid(gates[k]);
                gates[hd + k] = sigmoid(gates[hd + k]);
                gates[2 * hd + k] = gates[2 * hd + k].tanh();
                gates[3 * hd + k] = sigmoid(gates[3 * hd + k]);
            }
            let c_new: Vec<f64> = (0..hd)
                .map(|k| gates[hd + k] * c[k] + gates[k] * gates[2 * hd + k])
                .collect();
            let h_new: Vec<f64> = (0..hd).map(|k| gates[3 * hd + k] * c_new[k].tanh()).collect();
            let logits: Vec<f64> = (0..card)
                .map(|a| {
                    let w = &theta[l.head_w[s] + a * hd..][..hd];
                    theta[l.head_b[s] + a] + w.iter().zip(&h_new).map(|(p, q)| p * q).sum::<f64>()
                })
                .collect();
            let probs = softmax(&logits);
            let token = match forced {
                Some(t) => t[s],
                None => {
                    let u: f64 = rng.as_deref_mut().expect("sampling needs an rng").random();
                    let mut acc = 0.0;
                    probs
                        .iter()
                        .position(|&p| {
                            acc += p;
                            u < acc
                        })
                        .unwrap_or(card - 1)
                }
            };
            log_prob += probs[token].ln();
            tokens.push(token);
            caches.push(StepCache {
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                c_prev: std::mem::replace(&mut c, c_new.clone()),
                gates,
                c: c_new,
                h: h_new,
                probs,
            });
        }
        (tokens, log_prob, caches)
    }

    /// Samples one token per slot; returns the tokens and their total log-probability.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
        let (tokens, lp, _) = self.run(&self.theta, None, Some(rng));
        (tokens, lp)
    }

    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        Ok(self.run(&self.theta, Some(tokens), None).1)
    }

    /// Probabilities of each option at slot `slot` given the preceding tokens.
    pub fn slot_probabilities(&self, prefix: &[usize], slot: usize) -> Result<Vec<f64>> {
        if slot >= self.cardinalities.len() || prefix.len() < slot {
            return Err(Error::InvalidArgument("slot out of range or prefix too short".into()));
        }
        let mut tokens = prefix[..slot].to_vec();
        tokens.resize(self.cardinalities.len(), 0);
        let (_, _, caches) = self.run(&self.theta, Some(&tokens), None);
        Ok(caches[slot].probs.clone())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.cardinalities.len() || tokens.iter().zip(&self.cardinalities).any(|(t, c)| t >= c) {
            return Err(Error::InvalidArgument(format!("invalid token sequence {tokens:?}")));
        }
        Ok(())
    }

    /// Gradient of `log p(tokens)` with respect to every parameter.
    pub fn log_prob_gradient(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let l = self.layout();
        let (hd, ed) = (l.hidden, l.embedding);
        let (_, _, caches) = self.run(&self.theta, Some(tokens), None);
        let theta = &self.theta;
        let mut grad = vec![0.0; theta.len()];
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for s in (0..caches.len()).rev() {
            let cache = &caches[s];
            let mut dh = dh_next.clone();
            for (a, &p) in cache.probs.iter().enumerate() {
                let dlogit = if a == tokens[s] { 1.0 } else { 0.0 } - p;
                grad[l.head_b[s] + a] += dlogit;
                let w = l.head_w[s] + a * hd;
                for k in 0..hd {
                    grad[w + k] += dlogit * cache.h[k];
                    dh[k] += dlogit * theta[w + k];
                }
            }
            let g = &cache.gates;
            let mut dz = vec![0.0; 4 * hd];
            for k in 0..hd {
                let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let tc = cache.c[k].tanh();
                let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
                dz[k] = dc * gg * i * (1.0 - i);
                dz[hd + k] = dc * cache.c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dc * i * (1.0 - gg * gg);
                dz[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let x_off = l.input_offset(s, tokens);
            dh_next = vec![0.0; hd];
            let mut dx = vec![0.0; ed];
            for (r, &d) in dz.iter().enumerate() {
                grad[l.bias + r] += d;
                let wx = l.w_x + r * ed;
                for e in 0..ed {
                    grad[wx + e] += d * theta[x_off + e];
                    dx[e] += d * theta[wx + e];
                }
                let wh = l.w_h + r * hd;
                for k in 0..hd {
                    grad[wh + k] += d * cache.h_prev[k];
                    dh_next[k] += d * theta[wh + k];
                }
            }
            for (e, v) in dx.into_iter().enumerate() {
                grad[x_off + e] += v;
            }
        }
        Ok(grad)
    }

    /// REINFORCE step for one episode: ascend `(reward - baseline) * grad log p(tokens)`,
    /// then fold `reward` into the baseline. The first reward only seeds the baseline.
    pub fn update(&mut self, tokens: &[usize], reward: f64) -> Result<UpdateInfo> {
        if !reward.is_finite() {
            return Err(Error::NonFinite(format!("reward {reward}")));
        }
        self.check_tokens(tokens)?;
        let baseline_before = self.baseline;
        let advantage = baseline_before.map_or(0.0, |b| reward - b);
        let mut applied = false;
        if advantage != 0.0 {
            let grad = self.log_prob_gradient(tokens)?;
            if grad.iter().all(|g| g.is_finite()) {
                self.adam_ascent(&grad, advantage);
                applied = true;
            } else {
                self.skipped_updates += 1;
                log::warn!("controller update skipped: non-finite gradient");
            }
        }
        let beta = self.config.baseline_decay;
        self.baseline = Some(baseline_before.map_or(reward, |b| beta * b + (1.0 - beta) * reward));
        self.episodes += 1;
        Ok(UpdateInfo {
            baseline_before,
            advantage,
            applied,
        })
    }

    fn adam_ascent(&mut self, grad: &[f64], scale: f64) {
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let lr = self.config.learning_rate;
        for (i, &g0) in grad.iter().enumerate() {
            let g = g0 * scale;
            self.adam_m[i] = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            self.adam_v[i] = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let (m, v) = (self.adam_m[i] / c1, self.adam_v[i] / c2);
            self.theta[i] += lr * m / (v.sqrt() + ADAM_EPS);
        }
    }

    #[cfg(test)]
    pub(crate) fn theta_mut(&mut self) -> &mut Vec<f64> {
        &mut self.theta
    }
}

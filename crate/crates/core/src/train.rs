//! Noise-injection training.
//!
//! Every batch evaluates the gradient at perturbed weights and applies it to
//! the unperturbed ones:
//!
//! 1. save the current weights `W_ori`;
//! 2. draw one noise sample `N_j` and load `W_ori + N_j` into the model;
//! 3. run forward and backward on the batch;
//! 4. restore `W_ori` and take an SGD step with the collected gradient.
//!
//! With `sigma = 0` this is plain SGD, bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::nn::{sgd_step, Model};
use crate::noise::{derive_seed, perturb, NoiseSpec};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub noise: NoiseSpec,
    /// Train through quantized weights (straight-through to the shadow
    /// full-precision weights).
    pub quantize: bool,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        self.noise.validate()
    }
}

/// Carried across batches of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Noise sample index for the next batch; strictly increasing.
    pub next_noise_index: u64,
    pub batches: u64,
    pub skipped_batches: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchOutcome {
    Updated {
        loss: f32,
        noise_index: u64,
    },
    /// Loss or gradient was not finite; weights left unchanged.
    Skipped {
        noise_index: u64,
    },
}

pub fn noisy_train_batch(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<BatchOutcome> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let noise_index = state.next_noise_index;
    state.next_noise_index += 1;
    state.batches += 1;

    let w_ori = model.params.clone();
    let base = if cfg.quantize {
        model.net.effective_params(&w_ori)
    } else {
        w_ori.clone()
    };
    model.params = perturb(&base, &cfg.noise, noise_index)?;
    let result = model.net.forward_tape(&model.params, images).and_then(|tape| {
        let loss = tape.cross_entropy(labels)?;
        let grads = model.net.backward(&tape, &loss)?;
        Ok((loss, grads))
    });
    model.params = w_ori;
    let (loss, grads) = result?;

    if !loss.is_finite() || !grads.is_finite() {
        state.skipped_batches += 1;
        log::warn!("batch {noise_index}: non-finite loss or gradient, skipped");
        return Ok(BatchOutcome::Skipped { noise_index });
    }
    sgd_step(&mut model.params, &grads, cfg.lr)?;
    Ok(BatchOutcome::Updated {
        loss: loss.scalar,
        noise_index,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's updated batches (examples-weighted).
    pub loss: f64,
    /// Clean accuracy after the epoch, on the validation set if one was
    /// given, else on the training set.
    pub clean_accuracy: f64,
    pub skipped_batches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub state: TrainState,
}

pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = TrainState::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let skipped_before = state.skipped_batches;
        let (mut loss_sum, mut seen) = (0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            if let BatchOutcome::Updated { loss, .. } = noisy_train_batch(model, &x, &y, cfg, &mut state)? {
                loss_sum += loss as f64 * chunk.len() as f64;
                seen += chunk.len();
            }
        }
        let eval_set = validation.unwrap_or(data);
        let clean_accuracy = accuracy(&model.net, &model.net.effective_params(&model.params), eval_set)?;
        let stats = EpochStats {
            epoch,
            loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            clean_accuracy,
            skipped_batches: state.skipped_batches - skipped_before,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, clean accuracy {:.4}",
            stats.loss,
            stats.clean_accuracy
        );
        epochs.push(stats);
    }
    Ok(TrainReport { epochs, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{Layer, Network, ParamMap};

    fn scalar_model(w: f32) -> Model {
        let net = Network::new(
            vec![1],
            vec![Layer::Dense {
                name: "fc".into(),
                in_features: 1,
                out_features: 2,
                quant: None,
            }],
        )
        .unwrap();
        let mut p = ParamMap::new();
        p.insert("fc.weight", Tensor::new(vec![2, 1], vec![w, -w]).unwrap());
        p.insert("fc.bias", Tensor::zeros(&[2]));
        Model::new(net, p).unwrap()
    }

    fn cfg(sigma: f64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.1,
            noise: NoiseSpec::new(0.0, sigma, 11).unwrap(),
            quantize: false,
            seed: 5,
        }
    }

    #[test]
    fn squared_error_closed_form() {
        // L = (w x - y)^2 with x = 1, y = 0, evaluated at w + n = 1.1:
        // dL/dw = 2 (w + n) x = 2.2, so w_new = 1 - 0.1 * 2.2 = 0.78.
        let (w, n, x, y, lr) = (1.0f64, 0.1f64, 1.0f64, 0.0f64, 0.1f64);
        let grad = 2.0 * ((w + n) * x - y) * x;
        assert!((grad - 2.2).abs() < 1e-12);
        assert!((w - lr * grad - 0.78).abs() < 1e-12);
    }

    #[test]
    fn update_uses_gradient_at_perturbed_point() {
        let mut model = scalar_model(0.5);
        let c = cfg(0.3);
        let mut state = TrainState::default();
        let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let labels = [0, 1, 0];
        let w_ori = model.params.clone();

        let outcome = noisy_train_batch(&mut model, &x, &labels, &c, &mut state).unwrap();
        assert_eq!(
            outcome,
            BatchOutcome::Updated {
                loss: match outcome {
                    BatchOutcome::Updated { loss, .. } => loss,
                    _ => unreachable!(),
                },
                noise_index: 0
            }
        );

        // independent recomputation of the gradient at W_ori + N_0
        let w_dep = perturb(&w_ori, &c.noise, 0).unwrap();
        let tape = model.net.forward_tape(&w_dep, &x).unwrap();
        let g = model
            .net
            .backward(&tape, &tape.cross_entropy(&labels).unwrap())
            .unwrap();
        for (name, new) in model.params.iter() {
            let (old, gv) = (w_ori.get(name).unwrap(), g.get(name).unwrap());
            for ((&a, &b), &d) in new.data().iter().zip(old.data()).zip(gv.data()) {
                assert_eq!(a.to_bits(), (b - c.lr * d).to_bits());
            }
        }
        assert_eq!(state.next_noise_index, 1);
    }

    #[test]
    fn skips_non_finite_batches() {
        let mut model = scalar_model(f32::MAX);
        let mut state = TrainState::default();
        let x = Tensor::new(vec![1, 1], vec![f32::MAX]).unwrap();
        let before = model.params.clone();
        let out = noisy_train_batch(&mut model, &x, &[0], &cfg(0.0), &mut state).unwrap();
        assert_eq!(out, BatchOutcome::Skipped { noise_index: 0 });
        assert_eq!(state.skipped_batches, 1);
        assert!(model.params.bit_eq(&before));
    }

    fn toy_data(n: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let pixels: Vec<f32> = (0..n)
            .flat_map(|i| {
                let base = if i % 2 == 0 { 0.2 } else { 0.8 };
                [base, 1.0 - base, ((i * 7) % 10) as f32 / 10.0]
            })
            .collect();
        Dataset::new([1, 1, 3], pixels, labels, 2, Split::Train).unwrap()
    }

    fn toy_model(seed: u64) -> Model {
        let net = Network::new(
            vec![1, 1, 3],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    name: "a".into(),
                    in_features: 3,
                    out_features: 6,
                    quant: None,
                },
                Layer::Relu,
                Layer::Dense {
                    name: "b".into(),
                    in_features: 6,
                    out_features: 2,
                    quant: None,
                },
            ],
        )
        .unwrap();
        Model::init(net, seed)
    }

    #[test]
    fn zero_sigma_equals_vanilla_sgd() {
        let data = toy_data(40);
        let mut noisy = toy_model(1);
        train(&mut noisy, &data, &TrainConfig { epochs: 3, ..cfg(0.0) }, None).unwrap();

        // hand-rolled vanilla loop with the same shuffles
        let mut vanilla = toy_model(1);
        let c = cfg(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, SHUFFLE_STREAM));
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            for chunk in order.chunks(c.batch_size) {
                let (x, y) = data.batch(chunk).unwrap();
                let tape = vanilla.net.forward_tape(&vanilla.params, &x).unwrap();
                let g = vanilla.net.backward(&tape, &tape.cross_entropy(&y).unwrap()).unwrap();
                sgd_step(&mut vanilla.params, &g, c.lr).unwrap();
            }
        }
        assert!(noisy.params.bit_eq(&vanilla.params));
    }

    #[test]
    fn training_is_deterministic_and_indices_increase() {
        let data = toy_data(30);
        let c = TrainConfig { epochs: 2, ..cfg(0.05) };
        let mut a = toy_model(3);
        let mut b = toy_model(3);
        let ra = train(&mut a, &data, &c, None).unwrap();
        let rb = train(&mut b, &data, &c, None).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(ra, rb);
        // ceil(30 / 4) = 8 batches per epoch, indices 0..16 used once each
        assert_eq!(ra.state.next_noise_index, 16);
        assert_eq!(ra.state.batches, 16);
    }

    #[test]
    fn tiny_learning_rate_bounds_each_step() {
        let data = toy_data(8);
        let mut model = toy_model(2);
        let c = TrainConfig {
            lr: 1e-6,
            batch_size: 8,
            ..cfg(0.0)
        };
        let (x, y) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let tape = model.net.forward_tape(&model.params, &x).unwrap();
        let g = model.net.backward(&tape, &tape.cross_entropy(&y).unwrap()).unwrap();
        let g_max = g
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0f32, f32::max);
        let before = model.params.clone();
        noisy_train_batch(&mut model, &x, &y, &c, &mut TrainState::default()).unwrap();
        for (name, t) in model.params.iter() {
            for (&a, &b) in t.data().iter().zip(before.get(name).unwrap().data()) {
                assert!((a - b).abs() <= c.lr * g_max * 1.0001);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let data = toy_data(4);
        let mut m = toy_model(0);
        assert!(train(&mut m, &data, &TrainConfig { epochs: 0, ..cfg(0.0) }, None).is_err());
        assert!(train(&mut m, &data, &TrainConfig { lr: 0.0, ..cfg(0.0) }, None).is_err());
        assert!(train(
            &mut m,
            &data,
            &TrainConfig {
                batch_size: 0,
                ..cfg(0.0)
            },
            None
        )
        .is_err());
    }
}

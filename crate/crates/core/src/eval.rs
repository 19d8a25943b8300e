//! Accuracy under sampled device noise.
//!
//! Each of `K` samples perturbs the deployed weights once (`sample_index`
//! `0..K`) and measures accuracy over the whole test set. The resulting
//! distribution is summarized by its mean, its 95% minimum (the value 95% of
//! the samples reach or exceed) and its maximum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_class, Network, ParamMap};
use crate::noise::{perturb, NoiseSpec};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    P95Min,
    Max,
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "p95min" | "95" => Ok(Statistic::P95Min),
            "max" => Ok(Statistic::Max),
            other => Err(Error::InvalidArgument(format!(
                "unknown statistic `{other}` (expected mean, p95min or max)"
            ))),
        }
    }
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Statistic::Mean => "mean",
            Statistic::P95Min => "p95min",
            Statistic::Max => "max",
        })
    }
}

/// 1-based ascending rank of the 95% minimum: `ceil(0.05 * k)`, at least 1.
pub fn p95min_rank(k: usize) -> usize {
    k.div_ceil(20).max(1)
}

pub fn reduce(samples: &[f64], statistic: Statistic) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot reduce an empty sample set".into()));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN accuracy sample".into()));
    }
    Ok(match statistic {
        Statistic::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
        Statistic::Max => samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Statistic::P95Min => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[p95min_rank(samples.len()) - 1]
        }
    })
}

/// Fraction of correctly classified examples, using `params` exactly as given.
pub fn accuracy(net: &Network, params: &ParamMap, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = net.forward(params, &x)?;
        for (n, &label) in labels.iter().enumerate() {
            if argmax_class(logits.row(n))? == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of the network deployed with noise sample `sample_index`.
/// `w_trained` are the stored full-precision weights; quantized layers are
/// quantized before the noise is added.
pub fn evaluate_once(
    net: &Network,
    w_trained: &ParamMap,
    testset: &Dataset,
    spec: &NoiseSpec,
    sample_index: u64,
) -> Result<f64> {
    let deployed = perturb(&net.effective_params(w_trained), spec, sample_index)?;
    accuracy(net, &deployed, testset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDistribution {
    pub noise: NoiseSpec,
    pub k: usize,
    pub clean_accuracy: f64,
    /// Accuracy of sample `j` at position `j`.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub p95min: f64,
    pub max: f64,
}

impl EvalDistribution {
    pub fn from_samples(noise: NoiseSpec, clean_accuracy: f64, samples: Vec<f64>) -> Result<Self> {
        Ok(EvalDistribution {
            noise,
            k: samples.len(),
            clean_accuracy,
            mean: reduce(&samples, Statistic::Mean)?,
            p95min: reduce(&samples, Statistic::P95Min)?,
            max: reduce(&samples, Statistic::Max)?,
            samples,
        })
    }

    pub fn statistic(&self, statistic: Statistic) -> f64 {
        match statistic {
            Statistic::Mean => self.mean,
            Statistic::P95Min => self.p95min,
            Statistic::Max => self.max,
        }
    }
}

pub fn evaluate_distribution(
    net: &Network,
    w_trained: &ParamMap,
    testset: &Dataset,
    spec: &NoiseSpec,
    k: usize,
) -> Result<EvalDistribution> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one noise sample".into()));
    }
    spec.validate()?;
    let effective = net.effective_params(w_trained);
    let clean = accuracy(net, &effective, testset)?;
    let samples = (0..k as u64)
        .into_par_iter()
        .map(|j| accuracy(net, &perturb(&effective, spec, j)?, testset))
        .collect::<Result<Vec<_>>>()?;
    EvalDistribution::from_samples(*spec, clean, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::Layer;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn constant_samples() {
        let s = [0.7; 13];
        for st in [Statistic::Mean, Statistic::P95Min, Statistic::Max] {
            assert!((reduce(&s, st).unwrap() - 0.7).abs() < 1e-15);
        }
        assert!(reduce(&[], Statistic::Mean).is_err());
    }

    #[test]
    fn p95min_nearest_rank() {
        let ten: Vec<f64> = (1..=10).rev().map(|i| i as f64 / 10.0).collect();
        assert_eq!(reduce(&ten, Statistic::P95Min).unwrap(), 0.1);
        let hundred: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(reduce(&hundred, Statistic::P95Min).unwrap(), 0.05);
        assert_eq!(p95min_rank(1), 1);
        assert_eq!(p95min_rank(20), 1);
        assert_eq!(p95min_rank(21), 2);
        assert_eq!(p95min_rank(10_000), 500);
    }

    #[test]
    fn statistic_names() {
        assert_eq!("p95min".parse::<Statistic>().unwrap(), Statistic::P95Min);
        assert_eq!(Statistic::Mean.to_string(), "mean");
        assert!("median".parse::<Statistic>().is_err());
        assert_eq!(serde_json::to_string(&Statistic::P95Min).unwrap(), "\"p95min\"");
    }

    proptest! {
        #[test]
        fn reductions_are_ordered(samples in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let (p, m, x) = (
                reduce(&samples, Statistic::P95Min).unwrap(),
                reduce(&samples, Statistic::Mean).unwrap(),
                reduce(&samples, Statistic::Max).unwrap(),
            );
            let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(min <= p && p <= x && m <= x);
            let naive = samples.iter().sum::<f64>() / samples.len() as f64;
            prop_assert!((m - naive).abs() <= 1e-12 * samples.len() as f64);
        }
    }

    /// Two-class network whose logits are `[x0, x1]` scaled by a large weight.
    fn margin_model() -> (Network, ParamMap, Dataset) {
        let net = Network::new(
            vec![1, 1, 2],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    name: "fc".into(),
                    in_features: 2,
                    out_features: 2,
                    quant: None,
                },
            ],
        )
        .unwrap();
        let mut p = ParamMap::new();
        p.insert(
            "fc.weight",
            Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap(),
        );
        p.insert("fc.bias", Tensor::zeros(&[2]));
        let ds = Dataset::new([1, 1, 2], vec![1.0, 0.0, 0.0, 1.0], vec![0, 1], 2, Split::Test).unwrap();
        (net, p, ds)
    }

    #[test]
    fn zero_noise_gives_clean_accuracy() {
        let (net, p, ds) = margin_model();
        let clean = accuracy(&net, &p, &ds).unwrap();
        assert_eq!(evaluate_once(&net, &p, &ds, &NoiseSpec::zero(3), 5).unwrap(), clean);
    }

    #[test]
    fn margin_exceeds_noise_bound() {
        // Logit margin is 10. With sigma = 1e-3 every one of the 6 parameters
        // moves by less than 6 sigma in all samples drawn here, which shifts
        // each logit by at most 2 * 6e-3.
        let (net, p, ds) = margin_model();
        let spec = NoiseSpec::new(0.0, 1e-3, 1).unwrap();
        let d = evaluate_distribution(&net, &p, &ds, &spec, 50).unwrap();
        assert_eq!(d.clean_accuracy, 1.0);
        assert!(d.samples.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn constant_output_model_scores_chance() {
        let net = Network::new(
            vec![1, 1, 1],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    name: "fc".into(),
                    in_features: 1,
                    out_features: 10,
                    quant: None,
                },
            ],
        )
        .unwrap();
        let mut p = net.init_params(0);
        *p.get_mut("fc.weight").unwrap() = Tensor::zeros(&[10, 1]);
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ds = Dataset::new([1, 1, 1], vec![0.3; 100], labels, 10, Split::Test).unwrap();
        assert!((accuracy(&net, &p, &ds).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_sample_distribution() {
        let (net, p, ds) = margin_model();
        let spec = NoiseSpec::new(0.0, 5.0, 2).unwrap();
        let d = evaluate_distribution(&net, &p, &ds, &spec, 1).unwrap();
        assert_eq!(d.samples.len(), 1);
        assert!(d.mean == d.p95min && d.p95min == d.max);
        let again = evaluate_distribution(&net, &p, &ds, &spec, 1).unwrap();
        assert_eq!(d, again);
        assert_eq!(evaluate_once(&net, &p, &ds, &spec, 0).unwrap(), d.samples[0]);
    }
}

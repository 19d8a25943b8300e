//! Monte-Carlo study of how weight noise moves a network's output vector.
//!
//! For one fixed input, `K` noise samples give `K` output-change vectors
//! `O_dep(j) - O_ori`. Each output element is histogrammed into `N` equal
//! bins over its empirical range, a Gaussian is fitted by maximum
//! likelihood, and the fit is scored by the mean squared error and the
//! chi-square statistic between observed and Gaussian bin probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::nn::{softmax, Network, ParamMap};
use crate::noise::{perturb, NoiseSpec};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Bins whose expected probability falls below this are left out of the
/// chi-square sum.
pub const CHI_SQUARE_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputDomain {
    /// Pre-softmax output vector.
    #[default]
    Logits,
    /// Softmax probabilities.
    Probabilities,
}

/// `K x C` matrix of output changes, row `j` from noise sample `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputChangeSamples {
    pub k: usize,
    pub classes: usize,
    pub values: Vec<f32>,
    pub input_id: usize,
    pub noise: NoiseSpec,
}

impl OutputChangeSamples {
    pub fn row(&self, j: usize) -> &[f32] {
        &self.values[j * self.classes..(j + 1) * self.classes]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.k).map(|j| self.values[j * self.classes + c] as f64).collect()
    }
}

fn output(net: &Network, params: &ParamMap, input: &Tensor, domain: OutputDomain) -> Result<Vec<f32>> {
    let logits = net.forward(params, input)?;
    match domain {
        OutputDomain::Logits => Ok(logits.into_data()),
        OutputDomain::Probabilities => softmax(logits.data()),
    }
}

fn check_single(net: &Network, input: &Tensor) -> Result<()> {
    if input.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "output-change analysis takes one example of shape {:?}, got {:?}",
            net.input_shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// `F(w_exp + N_j, I) - F(w_exp, I)`. `w_exp` are the weights as deployed
/// (already quantized, if the network is quantized).
pub fn output_change(
    net: &Network,
    w_exp: &ParamMap,
    input: &Tensor,
    spec: &NoiseSpec,
    sample_index: u64,
) -> Result<Vec<f32>> {
    check_single(net, input)?;
    let clean = output(net, w_exp, input, OutputDomain::Logits)?;
    let noisy = output(net, &perturb(w_exp, spec, sample_index)?, input, OutputDomain::Logits)?;
    Ok(noisy.iter().zip(&clean).map(|(a, b)| a - b).collect())
}

pub fn collect_changes(
    net: &Network,
    w_exp: &ParamMap,
    input: &Tensor,
    input_id: usize,
    spec: &NoiseSpec,
    k: usize,
    domain: OutputDomain,
) -> Result<OutputChangeSamples> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one noise sample".into()));
    }
    check_single(net, input)?;
    spec.validate()?;
    let clean = output(net, w_exp, input, domain)?;
    let rows = (0..k as u64)
        .into_par_iter()
        .map(|j| {
            let noisy = output(net, &perturb(w_exp, spec, j)?, input, domain)?;
            Ok(noisy.iter().zip(&clean).map(|(a, b)| a - b).collect::<Vec<f32>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f32> = rows.into_iter().flatten().collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "output change of sample {} element {}",
            i / clean.len(),
            i % clean.len()
        )));
    }
    Ok(OutputChangeSamples {
        k,
        classes: clean.len(),
        values,
        input_id,
        noise: *spec,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
}

/// Maximum-likelihood normal fit (population standard deviation).
pub fn gaussian_fit(samples: &[f64]) -> Result<GaussianFit> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} samples", samples.len())));
    }
    let n = samples.len() as f64;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if lo == hi || !(var > 0.0) {
        return Err(Error::DegenerateFit("zero variance".into()));
    }
    Ok(GaussianFit { mean, std: var.sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` edges from the sample minimum to the sample maximum.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Equal-width bins over `[min, max]`; the last bin is closed on the right.
pub fn histogram_probabilities(samples: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("histogram sample".into()));
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::DegenerateFit("samples span an empty range".into()));
    }
    let width = (max - min) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|i| min + i as f64 * width).collect();
    edges[n_bins] = max;
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        let b = (((x - min) / width).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total = samples.len() as f64;
    let probabilities = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(Histogram {
        edges,
        counts,
        probabilities,
    })
}

/// Standard normal upper tail `P(Z > z)`.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Gaussian mass of every bin: `Phi((e[i+1]-mean)/std) - Phi((e[i]-mean)/std)`.
pub fn expected_probabilities(mean: f64, std: f64, edges: &[f64]) -> Result<Vec<f64>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("std must be positive, got {std}")));
    }
    if edges.len() < 2 {
        return Err(Error::InvalidArgument("need at least two bin edges".into()));
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let (a, b) = ((w[0] - mean) / std, (w[1] - mean) / std);
            // Difference of whichever tail keeps both terms small.
            if a >= 0.0 {
                normal_sf(a) - normal_sf(b)
            } else if b <= 0.0 {
                normal_sf(-b) - normal_sf(-a)
            } else {
                1.0 - normal_sf(b) - normal_sf(-a)
            }
        })
        .collect())
}

fn check_lengths(o: &[f64], e: &[f64]) -> Result<()> {
    if o.len() != e.len() || o.is_empty() {
        return Err(Error::Shape(format!(
            "observed has {} bins, expected has {}",
            o.len(),
            e.len()
        )));
    }
    Ok(())
}

/// `(1/N) sum (O_i - E_i)^2`.
pub fn mse_metric(observed: &[f64], expected: &[f64]) -> Result<f64> {
    check_lengths(observed, expected)?;
    let sum: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2)).sum();
    Ok(sum / observed.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub value: f64,
    pub excluded_bins: usize,
}

/// `sum (O_i - E_i)^2 / E_i` over bins with `E_i >= CHI_SQUARE_EPSILON`.
pub fn chi_square_metric(observed: &[f64], expected: &[f64]) -> Result<ChiSquare> {
    check_lengths(observed, expected)?;
    let mut value = 0.0;
    let mut excluded_bins = 0;
    for (o, e) in observed.iter().zip(expected) {
        if *e >= CHI_SQUARE_EPSILON {
            value += (o - e).powi(2) / e;
        } else {
            excluded_bins += 1;
        }
    }
    if excluded_bins == observed.len() {
        return Err(Error::DegenerateFit("every bin has negligible expected mass".into()));
    }
    Ok(ChiSquare { value, excluded_bins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementFit {
    pub element: usize,
    /// Set when the element never moved (zero variance); no fit exists.
    pub degenerate: bool,
    pub fit: Option<GaussianFit>,
    pub bin_edges: Vec<f64>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub chi_square: Option<f64>,
    pub excluded_bins: usize,
    pub mse: Option<f64>,
}

impl ElementFit {
    fn degenerate(element: usize) -> Self {
        ElementFit {
            element,
            degenerate: true,
            fit: None,
            bin_edges: Vec::new(),
            observed: Vec::new(),
            expected: Vec::new(),
            chi_square: None,
            excluded_bins: 0,
            mse: None,
        }
    }
}

pub fn fit_element(element: usize, samples: &[f64], n_bins: usize) -> Result<ElementFit> {
    let fit = match gaussian_fit(samples) {
        Ok(f) => f,
        Err(Error::DegenerateFit(_)) => return Ok(ElementFit::degenerate(element)),
        Err(e) => return Err(e),
    };
    let hist = match histogram_probabilities(samples, n_bins) {
        Ok(h) => h,
        Err(Error::DegenerateFit(_)) => return Ok(ElementFit::degenerate(element)),
        Err(e) => return Err(e),
    };
    let expected = expected_probabilities(fit.mean, fit.std, &hist.edges)?;
    let chi = chi_square_metric(&hist.probabilities, &expected)?;
    let mse = mse_metric(&hist.probabilities, &expected)?;
    Ok(ElementFit {
        element,
        degenerate: false,
        fit: Some(fit),
        bin_edges: hist.edges,
        observed: hist.probabilities,
        expected,
        chi_square: Some(chi.value),
        excluded_bins: chi.excluded_bins,
        mse: Some(mse),
    })
}

/// Per-element fits plus their averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub noise: NoiseSpec,
    pub samples: usize,
    pub n_bins: usize,
    pub input_id: usize,
    pub domain: OutputDomain,
    pub elements: Vec<ElementFit>,
    /// Mean over non-degenerate elements; `None` if all are degenerate.
    pub mean_chi_square: Option<f64>,
    pub mean_mse: Option<f64>,
    pub degenerate_elements: usize,
}

impl FitReport {
    pub fn from_samples(samples: &OutputChangeSamples, n_bins: usize, domain: OutputDomain) -> Result<Self> {
        let elements = (0..samples.classes)
            .map(|c| fit_element(c, &samples.column(c), n_bins))
            .collect::<Result<Vec<_>>>()?;
        let fitted: Vec<&ElementFit> = elements.iter().filter(|e| !e.degenerate).collect();
        let mean_of = |f: fn(&ElementFit) -> Option<f64>| {
            (!fitted.is_empty()).then(|| fitted.iter().filter_map(|e| f(e)).sum::<f64>() / fitted.len() as f64)
        };
        Ok(FitReport {
            noise: samples.noise,
            samples: samples.k,
            n_bins,
            input_id: samples.input_id,
            domain,
            mean_chi_square: mean_of(|e| e.chi_square),
            mean_mse: mean_of(|e| e.mse),
            degenerate_elements: elements.len() - fitted.len(),
            elements,
        })
    }

    /// Plot-ready table: one line per (element, bin) with the bin center and
    /// the observed and Gaussian probabilities.
    pub fn histogram_table(&self) -> String {
        let mut out = String::from("# element\tbin_center\tobserved\texpected\n");
        for e in &self.elements {
            let centers = e.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1]));
            for ((c, o), x) in centers.zip(&e.observed).zip(&e.expected) {
                out.push_str(&format!("{}\t{c:.9e}\t{o:.9e}\t{x:.9e}\n", e.element));
            }
        }
        out
    }
}

/// Runs the whole study on one input: collect `k` output changes, then fit
/// and score every output element.
pub fn run_study(
    net: &Network,
    w_exp: &ParamMap,
    input: &Tensor,
    input_id: usize,
    spec: &NoiseSpec,
    k: usize,
    n_bins: usize,
    domain: OutputDomain,
) -> Result<FitReport> {
    let samples = collect_changes(net, w_exp, input, input_id, spec, k, domain)?;
    FitReport::from_samples(&samples, n_bins, domain)
}

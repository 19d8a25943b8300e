//! Additive i.i.d. Gaussian weight noise: `W_dep = W_exp + N(mu, sigma)`.
//!
//! Draws are counter-based. The value at element `i` of stream `s` for
//! Monte-Carlo sample `j` depends only on `(seed, s, j, i)`:
//!
//! ```text
//! key    = mix(mix(mix(seed) ^ s) ^ j)
//! u_a    = mix(key ^ 2*(i/2))      u_b = mix(key ^ 2*(i/2) + 1)
//! z_even = r cos(2 pi u_b),  z_odd = r sin(2 pi u_b),  r = sqrt(-2 ln u_a)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Elements `2k` and `2k+1` share
//! one Box-Muller pair. Samples can therefore be generated in any order or in
//! parallel with identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamMap;
use crate::tensor::Tensor;

/// Standard deviation used throughout the device-variation experiments.
pub const DEFAULT_SIGMA: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { mu, sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds the spec from a variance instead of a standard deviation.
    pub fn from_variance(mu: f64, variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be >= 0, got {variance}"
            )));
        }
        Self::new(mu, variance.sqrt(), seed)
    }

    pub fn zero(seed: u64) -> Self {
        NoiseSpec {
            mu: 0.0,
            sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise mean must be finite, got {}",
                self.mu
            )));
        }
        Ok(())
    }

    /// True when perturbation leaves weights untouched.
    pub fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.mu == 0.0
    }
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(label.wrapping_add(0x5EED)))
}

fn sample_key(seed: u64, stream: u64, sample_index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ sample_index)
}

/// Standard-normal pair for counter `pair` under `key`.
#[inline]
fn normal_pair(key: u64, pair: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let a = splitmix64(key ^ pair.wrapping_mul(2));
    let b = splitmix64(key ^ pair.wrapping_mul(2).wrapping_add(1));
    // u_a in (0, 1] keeps the logarithm finite.
    let ua = ((a >> 11) + 1) as f64 * SCALE;
    let ub = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * ua.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * ub).sin_cos();
    (r * c, r * s)
}

fn fill_noise(out: &mut [f32], spec: &NoiseSpec, key: u64, mut apply: impl FnMut(&mut f32, f32)) {
    let mut i = 0;
    while i < out.len() {
        let (z0, z1) = normal_pair(key, (i / 2) as u64);
        apply(&mut out[i], (spec.mu + spec.sigma * z0) as f32);
        if i + 1 < out.len() {
            apply(&mut out[i + 1], (spec.mu + spec.sigma * z1) as f32);
        }
        i += 2;
    }
}

/// Stream identifier for a named tensor (FNV-1a of the name), so noise does
/// not depend on how many tensors precede it.
pub fn stream_for(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn sample_noise(shape: &[usize], spec: &NoiseSpec, sample_index: u64) -> Result<Tensor> {
    sample_noise_stream(shape, spec, sample_index, 0)
}

pub fn sample_noise_stream(shape: &[usize], spec: &NoiseSpec, sample_index: u64, stream: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut t = Tensor::zeros(shape);
    if spec.sigma == 0.0 {
        t.data_mut().fill(spec.mu as f32);
        return Ok(t);
    }
    let key = sample_key(spec.seed, stream, sample_index);
    fill_noise(t.data_mut(), spec, key, |dst, v| *dst = v);
    Ok(t)
}

/// Noise tensors for every entry of `params`, one stream per tensor name.
pub fn sample_noise_map(params: &ParamMap, spec: &NoiseSpec, sample_index: u64) -> Result<ParamMap> {
    params
        .iter()
        .map(|(name, t)| {
            sample_noise_stream(t.shape(), spec, sample_index, stream_for(name)).map(|n| (name.clone(), n))
        })
        .collect()
}

/// Returns `params + N_j` with independent noise on every tensor; `params`
/// is left untouched.
pub fn perturb(params: &ParamMap, spec: &NoiseSpec, sample_index: u64) -> Result<ParamMap> {
    spec.validate()?;
    let mut out = params.clone();
    if spec.is_identity() {
        return Ok(out);
    }
    for (name, t) in out.iter_mut() {
        if spec.sigma == 0.0 {
            let mu = spec.mu as f32;
            t.data_mut().iter_mut().for_each(|v| *v += mu);
            continue;
        }
        let key = sample_key(spec.seed, stream_for(name), sample_index);
        fill_noise(t.data_mut(), spec, key, |dst, v| *dst += v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> NoiseSpec {
        NoiseSpec::new(0.0, sigma, 42).unwrap()
    }

    #[test]
    fn zero_sigma_gives_zero_noise() {
        let n = sample_noise(&[3, 4], &spec(0.0), 5).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_negative_sigma() {
        assert!(NoiseSpec::new(0.0, -0.1, 0).is_err());
        let bad = NoiseSpec {
            mu: 0.0,
            sigma: -1.0,
            seed: 0,
        };
        assert!(sample_noise(&[2], &bad, 0).is_err());
        assert!(NoiseSpec::from_variance(0.0, -1.0, 0).is_err());
        assert!((NoiseSpec::from_variance(0.0, 0.04, 0).unwrap().sigma - 0.2).abs() < 1e-15);
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = sample_noise(&[100], &spec(0.04), 3).unwrap();
        let b = sample_noise(&[100], &spec(0.04), 3).unwrap();
        assert!(a.bit_eq(&b));
        let c = sample_noise(&[100], &spec(0.04), 4).unwrap();
        assert!(!a.bit_eq(&c));
        let other_seed = sample_noise(&[100], &NoiseSpec::new(0.0, 0.04, 43).unwrap(), 3).unwrap();
        assert!(!a.bit_eq(&other_seed));
    }

    #[test]
    fn element_value_independent_of_tensor_length() {
        let short = sample_noise(&[7], &spec(1.0), 9).unwrap();
        let long = sample_noise(&[64], &spec(1.0), 9).unwrap();
        assert_eq!(short.data(), &long.data()[..7]);
    }

    #[test]
    fn large_sample_moments() {
        let n = 1_000_000;
        let t = sample_noise(&[n], &spec(0.04), 0).unwrap();
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 * 0.04 / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() / 0.04 - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn samples_are_uncorrelated() {
        let n = 1_000_000;
        let a = sample_noise(&[n], &spec(1.0), 0).unwrap();
        let b = sample_noise(&[n], &spec(1.0), 1).unwrap();
        let (ma, mb) = (
            a.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64,
            b.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64,
        );
        let (mut sab, mut saa, mut sbb) = (0f64, 0f64, 0f64);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        let corr = sab / (saa * sbb).sqrt();
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    fn one_weight(v: f32) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn perturb_zero_sigma_is_bitwise_identity() {
        let mut p = one_weight(-0.0);
        p.insert("b", Tensor::from_vec(vec![1.5, -2.25, 0.0]).unwrap());
        assert!(perturb(&p, &spec(0.0), 17).unwrap().bit_eq(&p));
    }

    #[test]
    fn perturb_is_additive_and_non_mutating() {
        let p = one_weight(1.0);
        let forced = one_weight(0.05);
        assert_eq!(p.add(&forced).unwrap().get("w").unwrap().data(), &[1.05]);

        let before = p.clone();
        let s = spec(0.04);
        let out = perturb(&p, &s, 2).unwrap();
        assert!(p.bit_eq(&before));
        let noise = sample_noise_map(&p, &s, 2).unwrap();
        assert!(out.bit_eq(&p.add(&noise).unwrap()));
    }

    #[test]
    fn tensors_get_independent_noise() {
        let mut p = ParamMap::new();
        p.insert("a", Tensor::zeros(&[50]));
        p.insert("b", Tensor::zeros(&[50]));
        let out = perturb(&p, &spec(1.0), 0).unwrap();
        assert_ne!(out.get("a").unwrap().data(), out.get("b").unwrap().data());
    }

    #[test]
    fn perturbation_mean_recovers_weight() {
        let p = one_weight(0.7);
        let k = 10_000;
        let mean = (0..k)
            .map(|j| perturb(&p, &spec(0.04), j).unwrap().get("w").unwrap().data()[0] as f64)
            .sum::<f64>()
            / k as f64;
        assert!((mean - 0.7).abs() < 4.0 * 0.04 / (k as f64).sqrt(), "{mean}");
    }
}

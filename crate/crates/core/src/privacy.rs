//! Gaussian weight-perturbation mechanism and its (ε, δ) reporting algebra.
//!
//! Each named tensor is treated as one "layer": the noise added to a tensor
//! is i.i.d. N(0, σ²) with σ = α · η, where η is the population standard
//! deviation of that tensor's current entries. The mechanism itself is
//! parameterized only by α; the δ bound per requested ε is informational.

use ndarray::ArrayViewD;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelWeights;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("noise level alpha must be >= 0, got {0}")]
    InvalidAlpha(f64),
    #[error("empty tensor has no standard deviation")]
    EmptyTensor,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

/// Mechanism parameters and reporting preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacyConfig {
    /// Dimensionless noise multiplier α; σ = α · η per tensor.
    pub alpha: f64,
    /// L2 sensitivity Δ₂(f) used in δ reporting.
    pub sensitivity: f64,
    /// ε values for which δ lower bounds are reported.
    pub report_epsilons: Vec<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            sensitivity: 1.0,
            report_epsilons: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Noise actually applied to one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorNoise {
    pub name: String,
    /// Population std of the tensor's pre-noise entries.
    pub eta: f64,
    /// σ = α · η.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaBound {
    pub epsilon: f64,
    pub delta_min: f64,
}

/// Per-tensor noise scales plus δ bounds for the requested ε values.
///
/// The δ bounds use the smallest positive per-tensor σ (the weakest layer);
/// with α = 0 no noise is added and no bounds are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub alpha: f64,
    pub tensors: Vec<TensorNoise>,
    pub delta_bounds: Vec<DeltaBound>,
}

/// Population standard deviation of all entries of one tensor.
pub fn layer_eta(tensor: &ArrayViewD<f64>) -> Result<f64, PrivacyError> {
    let n = tensor.len();
    if n == 0 {
        return Err(PrivacyError::EmptyTensor);
    }
    let mean = tensor.iter().sum::<f64>() / n as f64;
    let var = tensor.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}

/// Lower bound on δ for the Gaussian mechanism:
/// δ > (5/4) · exp(−ε²σ² / (2 Δ₂²)).
///
/// The raw value is returned even when it exceeds 1, in which case the bound
/// is vacuous.
pub fn delta_bound(epsilon: f64, sigma: f64, sensitivity: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::NonPositive("epsilon"));
    }
    if !(sigma > 0.0) {
        return Err(PrivacyError::NonPositive("sigma"));
    }
    if !(sensitivity > 0.0) {
        return Err(PrivacyError::NonPositive("sensitivity"));
    }
    Ok(1.25 * (-epsilon * epsilon * sigma * sigma / (2.0 * sensitivity * sensitivity)).exp())
}

/// Add i.i.d. N(0, (α·η)²) noise to every tensor, with η computed from the
/// tensor's own pre-noise entries.
///
/// `stream_for` supplies an independent generator per tensor name, so
/// perturbing a subset of tensors never changes the noise drawn for others.
/// α = 0 (or a constant tensor, where η = 0) returns the input bit-exactly.
pub fn perturb_weights(
    weights: &ModelWeights,
    alpha: f64,
    stream_for: &mut dyn FnMut(&str) -> ChaCha8Rng,
) -> Result<ModelWeights, PrivacyError> {
    if !(alpha >= 0.0) {
        return Err(PrivacyError::InvalidAlpha(alpha));
    }
    let mut out = weights.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for (name, mut tensor) in out.tensors_mut() {
        let eta = layer_eta(&tensor.view())?;
        let sigma = alpha * eta;
        if sigma == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
        let mut rng = stream_for(name);
        for x in tensor.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Describe the noise [`perturb_weights`] would apply at these settings.
pub fn noise_report(weights: &ModelWeights, config: &PrivacyConfig) -> NoiseReport {
    let tensors: Vec<TensorNoise> = weights
        .tensors()
        .iter()
        .map(|(name, t)| {
            let eta = layer_eta(t).expect("model tensors are non-empty");
            TensorNoise {
                name: (*name).to_string(),
                eta,
                sigma: config.alpha * eta,
            }
        })
        .collect();

    let weakest_sigma = tensors
        .iter()
        .map(|t| t.sigma)
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min);

    let delta_bounds = if weakest_sigma.is_finite() {
        config
            .report_epsilons
            .iter()
            .filter(|&&eps| eps > 0.0)
            .map(|&epsilon| DeltaBound {
                epsilon,
                delta_min: delta_bound(epsilon, weakest_sigma, config.sensitivity)
                    .expect("validated inputs"),
            })
            .collect()
    } else {
        Vec::new()
    };

    NoiseReport {
        alpha: config.alpha,
        tensors,
        delta_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelDims};
    use crate::rng::derive_rng;
    use ndarray::{arr1, Array1};

    #[test]
    fn eta_of_constant_tensor_is_zero() {
        let t = Array1::from_elem(16, 3.5).into_dyn();
        assert_eq!(layer_eta(&t.view()).unwrap(), 0.0);
    }

    #[test]
    fn eta_of_plus_minus_one_is_one() {
        let t = arr1(&[-1.0, 1.0]).into_dyn();
        assert!((layer_eta(&t.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eta_is_homogeneous_in_scale() {
        let t = arr1(&[0.3, -1.1, 2.2, 0.05, -0.7]).into_dyn();
        let eta = layer_eta(&t.view()).unwrap();
        for k in [-3.0, 0.5, 7.0] {
            let scaled = t.mapv(|x| k * x);
            let eta_k = layer_eta(&scaled.view()).unwrap();
            assert!((eta_k - k.abs() * eta).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_rejects_empty() {
        let t = Array1::<f64>::zeros(0).into_dyn();
        assert!(matches!(
            layer_eta(&t.view()),
            Err(PrivacyError::EmptyTensor)
        ));
    }

    #[test]
    fn alpha_zero_is_bit_identity() {
        let w = init_weights(ModelDims::new(8, 6, 4, 3), 5);
        let out = perturb_weights(&w, 0.0, &mut |name| derive_rng(1, &["noise", name])).unwrap();
        assert_eq!(w, out);
    }

    #[test]
    fn constant_tensor_is_unchanged_at_any_alpha() {
        let dims = ModelDims::new(8, 6, 4, 3);
        let mut w = init_weights(dims, 5);
        w.b_proj.fill(0.0); // eta = 0 for this tensor
        let out = perturb_weights(&w, 2.0, &mut |name| derive_rng(1, &["noise", name])).unwrap();
        assert_eq!(w.b_proj, out.b_proj);
        assert!(w.w_proj.iter().zip(out.w_proj.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn perturbation_is_deterministic_per_stream() {
        let w = init_weights(ModelDims::new(8, 6, 4, 3), 5);
        let a = perturb_weights(&w, 0.1, &mut |name| derive_rng(9, &["noise", name])).unwrap();
        let b = perturb_weights(&w, 0.1, &mut |name| derive_rng(9, &["noise", name])).unwrap();
        let c = perturb_weights(&w, 0.1, &mut |name| derive_rng(10, &["noise", name])).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn noise_streams_are_independent_per_tensor() {
        // Zeroing one tensor (so it draws nothing) must not change the noise
        // applied to any other tensor.
        let dims = ModelDims::new(8, 6, 4, 3);
        let w1 = init_weights(dims, 5);
        let mut w2 = w1.clone();
        w2.u_a.fill(0.0);

        let p1 = perturb_weights(&w1, 0.2, &mut |name| derive_rng(3, &["noise", name])).unwrap();
        let p2 = perturb_weights(&w2, 0.2, &mut |name| derive_rng(3, &["noise", name])).unwrap();
        let noise1 = &p1.w_proj - &w1.w_proj;
        let noise2 = &p2.w_proj - &w2.w_proj;
        assert_eq!(noise1, noise2);
    }

    #[test]
    fn empirical_noise_statistics_match_sigma() {
        // One large tensor with eta exactly 1.
        let dims = ModelDims::new(500, 200, 4, 2); // w_proj has 100k entries
        let mut w = ModelWeights::zeros(dims);
        for (i, x) in w.w_proj.iter_mut().enumerate() {
            *x = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let alpha = 0.1;
        let p = perturb_weights(&w, alpha, &mut |name| derive_rng(17, &["noise", name])).unwrap();
        let noise: Vec<f64> = p
            .w_proj
            .iter()
            .zip(w.w_proj.iter())
            .map(|(a, b)| a - b)
            .collect();
        let n = noise.len() as f64;
        assert!(n >= 1e5);
        let mean = noise.iter().sum::<f64>() / n;
        let std = (noise.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - alpha).abs() < 0.02 * alpha, "std {std}");
        assert!(mean.abs() < 3.0 * alpha / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn delta_bound_reference_value() {
        let d = delta_bound(1.0, 1.0, 1.0).unwrap();
        assert!((d - 1.25 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((d - 0.7581633246407919).abs() < 1e-12);
    }

    #[test]
    fn delta_bound_monotonicity() {
        let mut prev = f64::INFINITY;
        for sigma in [0.1, 0.5, 1.0, 2.0, 5.0, 50.0] {
            let d = delta_bound(1.0, sigma, 1.0).unwrap();
            assert!(d < prev);
            prev = d;
        }
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.5, 1.0, 2.0] {
            let d = delta_bound(eps, 1.0, 1.0).unwrap();
            assert!(d < prev);
            prev = d;
        }
        // Increasing sensitivity loosens the bound.
        assert!(delta_bound(1.0, 1.0, 2.0).unwrap() > delta_bound(1.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn delta_bound_rejects_non_positive_inputs() {
        assert!(delta_bound(0.0, 1.0, 1.0).is_err());
        assert!(delta_bound(1.0, 0.0, 1.0).is_err());
        assert!(delta_bound(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn report_lists_every_tensor_with_sigma_alpha_eta() {
        let w = init_weights(ModelDims::new(8, 6, 4, 3), 5);
        let cfg = PrivacyConfig {
            alpha: 0.25,
            ..PrivacyConfig::default()
        };
        let report = noise_report(&w, &cfg);
        assert_eq!(report.tensors.len(), 10);
        for t in &report.tensors {
            assert!((t.sigma - cfg.alpha * t.eta).abs() <= f64::EPSILON * t.sigma.abs());
        }
        assert_eq!(report.delta_bounds.len(), 3);

        let silent = noise_report(&w, &PrivacyConfig::default());
        assert!(silent.delta_bounds.is_empty());
    }
}

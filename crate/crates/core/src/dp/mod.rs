//! Differential-privacy mechanisms and accounting: the Laplace mechanism,
//! per-example clipping with Gaussian noising, subsampled-Gaussian
//! composition via a Renyi accountant, and the privacy-budget split between
//! pretraining and DP-SGD.

pub mod accountant;

pub use accountant::{accountant_epsilon, AccountantState};

use rand::Rng;

use crate::autodiff::GradientSet;
use crate::rng as noise_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The total budget and its split: `epsilon_sgd` feeds DP-SGD,sequentially
/// composed with `epsilon_pretrain` spent on the transition-matrix release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon_total: f64,
    pub epsilon_sgd: f64,
    pub epsilon_pretrain: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    /// The guarantee reported for the whole run: the exact sum of the parts.
    pub fn total(&self) -> f64 {
        self.epsilon_sgd + self.epsilon_pretrain
    }

    /// True when the allocation left nothing for DP-SGD; the training phase
    /// must then be skipped rather than run with a zero budget.
    pub fn sgd_exhausted(&self) -> bool {
        self.epsilon_sgd <= 0.0
    }
}

/// DP-SGD noise configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// L2 clipping norm; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Noise multiplier: per-coordinate std is `sigma * clip_norm / batch`.
    pub sigma: f64,
    /// Poisson sampling rate.
    pub sampling_rate: f64,
    /// Step count.
    pub steps: usize,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Privacy(format!("clip norm {} <= 0", self.clip_norm)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Privacy(format!("sigma {} < 0", self.sigma)));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Privacy(format!(
                "sampling rate {} outside (0, 1]",
                self.sampling_rate
            )));
        }
        Ok(())
    }
}

/// Add i.i.d. Laplace noise of scale `sensitivity / epsilon` per entry.
pub fn laplace_mechanism<S: Scalar, R: Rng>(
    values: &Tensor<S>,
    sensitivity: S,
    epsilon: S,
    rng: &mut R,
) -> Result<Tensor<S>> {
    if !(epsilon > S::zero()) {
        return Err(Error::Privacy(format!("epsilon {epsilon} must be positive")));
    }
    if !(sensitivity > S::zero()) {
        return Err(Error::Privacy(format!(
            "sensitivity {sensitivity} must be positive"
        )));
    }
    let scale = sensitivity / epsilon;
    let data = values
        .data()
        .iter()
        .map(|v| *v + noise_rng::laplace(rng, scale))
        .collect();
    Ok(Tensor::from_vec(values.dims(), data))
}

/// Clip each example's flattened gradient to norm `clip_norm`, average over
/// `batch_size`, and add isotropic Gaussian noise of per-coordinate std
/// `sigma * clip_norm / batch_size`.
///
/// `batch_size` is the divisor, not necessarily `per_example.len()`: under
/// Poisson sampling the accountant assumes division by the expected batch.
pub fn clip_and_noise<S: Scalar, R: Rng>(
    per_example: &[GradientSet<S>],
    clip_norm: S,
    sigma: S,
    batch_size: usize,
    rng: &mut R,
) -> Result<GradientSet<S>> {
    if per_example.is_empty() {
        return Err(Error::Privacy("empty batch".into()));
    }
    if !(clip_norm > S::zero()) {
        return Err(Error::Privacy(format!("clip norm {clip_norm} must be positive")));
    }
    if sigma < S::zero() {
        return Err(Error::Privacy(format!("sigma {sigma} must be nonnegative")));
    }
    let mut total = per_example[0].clone();
    total.scale(S::zero());
    total.example = None;
    for grads in per_example {
        let norm = grads.l2_norm();
        let factor = if norm > clip_norm {
            clip_norm / norm
        } else {
            S::one()
        };
        total.axpy(factor, grads);
    }
    let inv = S::one() / S::from_f64_lossy(batch_size as f64);
    total.scale(inv);
    if sigma > S::zero() {
        let std = sigma * clip_norm * inv;
        for tensor in 0..per_example[0].tensors().len() {
            let t = &mut total.tensors_mut()[tensor];
            for v in t.data_mut() {
                *v += noise_rng::gaussian(rng, std);
            }
        }
    }
    Ok(total)
}

/// Split a total budget between the transition-matrix release and DP-SGD:
/// `eps_pretrain = min(c * w^2 * 4^i_res * ln(w) / |D|, eps_total)`, the rest
/// goes to training. Keeps the released matrix at a constant signal-to-noise
/// ratio using only public metadata (`w`, `|D|`).
pub fn allocate_budget(
    epsilon_total: f64,
    w: usize,
    dataset_size: usize,
    i_res: u8,
    c: f64,
) -> Result<PrivacyBudget> {
    if !(epsilon_total > 0.0) {
        return Err(Error::Privacy(format!("epsilon {epsilon_total} must be positive")));
    }
    if w < 2 || dataset_size == 0 || !(c > 0.0) {
        return Err(Error::Privacy(format!(
            "bad allocation inputs: w={w}, |D|={dataset_size}, c={c}"
        )));
    }
    let cells = (w * w) as f64;
    let regions = 4f64.powi(i_res as i32);
    let raw = c * cells * regions * (w as f64).ln() / dataset_size as f64;
    let epsilon_pretrain = raw.min(epsilon_total);
    let epsilon_sgd = epsilon_total - epsilon_pretrain;
    Ok(PrivacyBudget {
        epsilon_total,
        epsilon_sgd,
        epsilon_pretrain,
        delta: f64::NAN, // callers fill in their delta
    })
}

/// The guarantee for the sequentially composed pipeline.
pub fn total_privacy(epsilon_sgd: f64, epsilon_pretrain: f64, delta: f64) -> (f64, f64) {
    (epsilon_sgd + epsilon_pretrain, delta)
}

/// Key-value privacy report block written next to every trained artifact.
pub fn privacy_report(
    budget: &PrivacyBudget,
    noise: &NoiseParams,
) -> String {
    format!(
        "epsilon_total {}\nepsilon_sgd {}\nepsilon_pretrain {}\ndelta {}\nsigma {}\nclip_norm {}\nsteps {}\nsampling_rate {}\naccountant rdp\n",
        budget.total(),
        budget.epsilon_sgd,
        budget.epsilon_pretrain,
        budget.delta,
        noise.sigma,
        noise.clip_norm,
        noise.steps,
        noise.sampling_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::rng::stream;

    #[test]
    fn laplace_requires_positive_epsilon() {
        let mut rng = stream(0);
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        assert!(laplace_mechanism(&t, 1.0, 0.0, &mut rng).is_err());
        assert!(laplace_mechanism(&t, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_high_epsilon_is_nearly_noiseless() {
        let mut rng = stream(1);
        let t: Tensor<f64> = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.0, 3.5]);
        let noised = laplace_mechanism(&t, 1.0, 1e9, &mut rng).unwrap();
        for (a, b) in t.data().iter().zip(noised.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn laplace_moments_match_scale() {
        // sensitivity 2, epsilon 1 -> scale 2, variance 8.
        let mut rng = stream(2);
        let n = 1_000_000;
        let zeros = Tensor::zeros(&[n]);
        let noised = laplace_mechanism(&zeros, 2.0, 1.0, &mut rng).unwrap();
        let mean: f64 = noised.data().iter().sum::<f64>() / n as f64;
        let var: f64 =
            noised.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 8.0).abs() / 8.0 < 0.02);
    }

    fn grad_with(store: &ParamStore<f64>, values: &[f64]) -> GradientSet<f64> {
        let mut g = GradientSet::zeros_like(store);
        let id = crate::autodiff::ParamId(0);
        g.grad_mut(id).data_mut().copy_from_slice(values);
        g
    }

    fn small_store() -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.register("p", Tensor::zeros(&[3]));
        store
    }

    #[test]
    fn clipping_rescales_to_the_ball() {
        let store = small_store();
        let mut rng = stream(3);
        // Norm 10 clipped to 1.
        let g = grad_with(&store, &[6.0, 8.0, 0.0]);
        let out = clip_and_noise(&[g], 1.0, 0.0, 1, &mut rng).unwrap();
        assert!((out.l2_norm() - 1.0).abs() < 1e-12);
        // Norm 0.5 unchanged.
        let g = grad_with(&store, &[0.3, 0.4, 0.0]);
        let out = clip_and_noise(&[g.clone()], 1.0, 0.0, 1, &mut rng).unwrap();
        assert_eq!(out.tensors()[0].data(), g.tensors()[0].data());
    }

    #[test]
    fn sigma_zero_is_plain_clipped_mean() {
        let store = small_store();
        let mut rng = stream(4);
        let a = grad_with(&store, &[2.0, 0.0, 0.0]);
        let b = grad_with(&store, &[0.0, 4.0, 0.0]);
        let out = clip_and_noise(&[a, b], 1.0, 0.0, 2, &mut rng).unwrap();
        // Clipped to unit norm each: (1,0,0) and (0,1,0); mean = (0.5, 0.5, 0).
        assert_eq!(out.tensors()[0].data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn infinite_clip_disables_rescaling() {
        let store = small_store();
        let mut rng = stream(5);
        let g = grad_with(&store, &[30.0, 40.0, 0.0]);
        let out = clip_and_noise(&[g], f64::INFINITY, 0.0, 1, &mut rng).unwrap();
        assert_eq!(out.tensors()[0].data(), &[30.0, 40.0, 0.0]);
    }

    #[test]
    fn budget_allocation_matches_closed_form() {
        // w=32, |D|=10^4, i_res=2, c=0.018, eps=2.
        let b = allocate_budget(2.0, 32, 10_000, 2, 0.018).unwrap();
        let expect = 0.018 * 1024.0 * 16.0 * (32f64).ln() / 10_000.0;
        assert!((b.epsilon_pretrain - expect).abs() < 1e-12);
        assert!((b.epsilon_pretrain - 0.1022).abs() < 5e-4);
        assert!((b.epsilon_sgd - 1.898).abs() < 5e-4);
        assert_eq!(b.total(), b.epsilon_sgd + b.epsilon_pretrain);
    }

    #[test]
    fn budget_allocation_clamps_to_total() {
        // Small dataset: the formula exceeds the total and clamps.
        let b = allocate_budget(1.0, 64, 10, 2, 0.018).unwrap();
        assert_eq!(b.epsilon_pretrain, 1.0);
        assert_eq!(b.epsilon_sgd, 0.0);
        assert!(b.sgd_exhausted());
    }

    #[test]
    fn total_privacy_adds_components() {
        assert_eq!(total_privacy(0.0, 0.7, 1e-5), (0.7, 1e-5));
        assert_eq!(total_privacy(1.3, 0.0, 1e-5), (1.3, 1e-5));
        let (eps, delta) = total_privacy(1.898, 0.102, 1e-5);
        assert!((eps - 2.0).abs() < 1e-12);
        assert_eq!(delta, 1e-5);
    }
}

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; parameters and moments were left untouched.
    Skipped,
}

/// Adam moments for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub timestep: u64,
    pub skipped: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            timestep: 0,
            skipped: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update. Parameters with no gradient (`None`)
    /// are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> StepOutcome {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            self.skipped += 1;
            return StepOutcome::Skipped;
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v.to_f64_lossy() * v.to_f64_lossy())
            .sum::<f64>()
            .sqrt();
        let clip = match cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.timestep += 1;
        let t = self.timestep as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let step_size = lr / (1.0 - b1.powi(t));
        let corr2 = 1.0 - b2.powi(t);
        let (b1, b2, eps, clip) = (T::lit(b1), T::lit(b2), T::lit(cfg.eps), T::lit(clip));
        let (step_size, corr2) = (T::lit(step_size), T::lit(corr2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.tensors_mut()[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= step_size * m[j] / ((v[j] / corr2).sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

/// Cosine decay from `base` to `base * floor` after a linear warm-up.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup: u64, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
    base * (floor + (1.0 - floor) * cos)
}

//! Diffusion noise schedule and the closed-form forward noising process.
//!
//! A linear β schedule over `t ∈ {1, …, T}` with `αₜ = 1 − βₜ` and
//! `ᾱₜ = ∏_{s≤t} αₛ`. Timesteps are 1-indexed; `ᾱ₀` is defined as 1 so the
//! sampler's boundary step to a fully denoised latent uses the same formula
//! as every other step.

use ndarray::Array3;

use crate::codec::LatentGrid;
use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable schedule parameters, stored in checkpoints so sampling
/// rebuilds exactly the schedule the model was trained under.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { t_max: DEFAULT_T, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Precomputed β, α, ᾱ tables. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// β interpolated linearly from `beta_start` to `beta_end`, endpoints
    /// inclusive.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Param(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start}, end={beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (t_max - 1) as f64;
        let beta: Vec<f64> = (0..t_max).map(|i| beta_start + step * i as f64).collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self { t_max, beta, alpha, alpha_bar })
    }

    /// The default desk-scale schedule: T=100, β from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// βₜ for 1-indexed t.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "timestep {t} outside 1..={}", self.t_max);
        self.beta[t - 1]
    }

    /// αₜ for 1-indexed t.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "timestep {t} outside 1..={}", self.t_max);
        self.alpha[t - 1]
    }

    /// ᾱₜ for 0-indexed boundary included: `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "timestep {t} outside 0..={}", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Closed-form forward noising: `√ᾱₜ·z0 + √(1−ᾱₜ)·eps`.
    pub fn forward_noise(&self, z0: &LatentGrid, t: usize, eps: &Array3<f64>) -> Result<LatentGrid> {
        if !(1..=self.t_max).contains(&t) {
            return Err(Error::Param(format!(
                "forward_noise timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        if eps.dim() != z0.values.dim() {
            return Err(Error::Shape(format!(
                "noise shape {:?} does not match latent shape {:?}",
                eps.dim(),
                z0.values.dim()
            )));
        }
        Ok(LatentGrid {
            values: noise_with_alpha_bar(&z0.values, self.alpha_bar(t), eps),
            source_shape: z0.source_shape,
            source_dynamic_range: z0.source_dynamic_range,
        })
    }
}

/// The noising formula on raw arrays, for a given ᾱ.
pub fn noise_with_alpha_bar(z0: &Array3<f64>, alpha_bar: f64, eps: &Array3<f64>) -> Array3<f64> {
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    z0 * signal + eps * noise
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_beta_gives_hand_computed_alpha_bar() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_eq!(s.beta(1), 0.1);
        assert_eq!(s.beta(2), 0.1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.t_max(), 100);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(100), 0.02);
        for t in 1..s.t_max() {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn alpha_bar_matches_recomputed_product() {
        let s = NoiseSchedule::default_linear();
        for t in 1..=s.t_max() {
            let prod: f64 = (1..=t).map(|u| s.alpha(u)).product();
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod.abs());
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn noising_formula_hand_values() {
        let one = Array3::from_elem((1, 1, 1), 1.0);
        // Zero noise weight leaves the latent untouched.
        let out = noise_with_alpha_bar(&one, 1.0, &one);
        assert_eq!(out[(0, 0, 0)], 1.0);
        // alpha_bar = 0.25 with z0 = eps = 1: 0.5 + sqrt(0.75).
        let out = noise_with_alpha_bar(&one, 0.25, &one);
        assert!((out[(0, 0, 0)] - 1.366025403784).abs() < 1e-9);
        // alpha_bar -> 0 leaves only the noise term.
        let out = noise_with_alpha_bar(&one, 0.0, &(&one * 0.3));
        assert!((out[(0, 0, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_rejects_mismatched_shapes_and_bad_t() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let z0 = LatentGrid {
            values: Array3::zeros((2, 2, 1)),
            source_shape: (4, 4, 1),
            source_dynamic_range: 1.0,
        };
        let eps = Array3::zeros((2, 2, 2));
        assert!(matches!(s.forward_noise(&z0, 1, &eps), Err(crate::Error::Shape(_))));
        let eps = Array3::zeros((2, 2, 1));
        assert!(matches!(s.forward_noise(&z0, 0, &eps), Err(crate::Error::Param(_))));
        assert!(matches!(s.forward_noise(&z0, 5, &eps), Err(crate::Error::Param(_))));
    }

    #[test]
    fn variance_law_monte_carlo() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &t in &[1usize, 37, 100] {
            let n = 10_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let eps: f64 = rng.sample(StandardNormal);
                let z0 = Array3::zeros((1, 1, 1));
                let out = noise_with_alpha_bar(&z0, s.alpha_bar(t), &Array3::from_elem((1, 1, 1), eps));
                let v = out[(0, 0, 0)];
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            let expected = 1.0 - s.alpha_bar(t);
            assert!(
                (var - expected).abs() < 0.05 * expected,
                "t={t}: sample var {var} vs expected {expected}"
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Scaling both inputs scales the output: the formula is linear.
            #[test]
            fn forward_noise_is_linear(
                a in -3.0f64..3.0,
                z in -2.0f64..2.0,
                e in -2.0f64..2.0,
                t in 1usize..=100,
            ) {
                let s = NoiseSchedule::default_linear();
                let zg = Array3::from_elem((1, 1, 1), z);
                let eg = Array3::from_elem((1, 1, 1), e);
                let scaled = noise_with_alpha_bar(&(&zg * a), s.alpha_bar(t), &(&eg * a));
                let base = noise_with_alpha_bar(&zg, s.alpha_bar(t), &eg);
                prop_assert!((scaled[(0,0,0)] - a * base[(0,0,0)]).abs() < 1e-12);
            }
        }
    }
}

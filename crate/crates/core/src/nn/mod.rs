//! Minimal neural-network substrate: parameters, gradients, layers.
//!
//! Everything is `f64` on CPU, single sample at a time. Layers own their
//! weights under stable dotted names ("enc1.conv1.w", ...); backward passes
//! accumulate gradients into a [`GradStore`] keyed by those names, which
//! keeps forward passes `&self` and lets training code decide which subset
//! of parameters to update (full fine-tuning vs. adapter-only).

pub mod attention;
pub mod ops;
pub mod time_embed;

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView2, ArrayViewD};
use rand::Rng;
use rand_distr::StandardNormal;

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    grads: BTreeMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add (accumulating) a gradient contribution for `name`.
    pub fn add(&mut self, name: &str, g: ArrayD<f64>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<ArrayViewD<'_, f64>> {
        self.grads.get(name).map(|g| g.view())
    }

    /// Merge another store into this one, summing overlapping entries.
    pub fn merge(&mut self, other: GradStore) {
        for (name, g) in other.grads {
            self.add(&name, g);
        }
    }

    /// Multiply every gradient by a scalar (batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// View a dynamic-dimension parameter as 2-D.
pub fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("parameter is 2-d")
}

/// Draw an i.i.d. Gaussian array with the given standard deviation.
pub fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_fn(shape.to_vec().as_slice(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Stochastic gradient descent with classical momentum.
///
/// Velocity buffers are keyed by parameter name and created lazily, so the
/// same optimizer works for full-model and adapter-only updates.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Apply one update. `visit` must call its callback once per updatable
    /// parameter; parameters without a gradient in `grads` are skipped.
    pub fn step(
        &mut self,
        grads: &GradStore,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut ArrayD<f64>)),
    ) {
        let lr = self.lr;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        visit(&mut |name, value| {
            let Some(g) = grads.grads.get(name) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(value.shape()));
            v.zip_mut_with(g, |vi, gi| *vi = momentum * *vi + gi);
            value.zip_mut_with(v, |wi, vi| *wi -= lr * vi);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn grad_store_accumulates_and_scales() {
        let mut gs = GradStore::new();
        gs.add("w", arr1(&[1.0, 2.0]).into_dyn());
        gs.add("w", arr1(&[0.5, 0.5]).into_dyn());
        gs.scale(2.0);
        let g = gs.get("w").unwrap();
        assert_eq!(g[[0]], 3.0);
        assert_eq!(g[[1]], 5.0);
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_update() {
        // Two steps with constant gradient g: v1 = g, w1 = w0 - lr*g;
        // v2 = m*g + g, w2 = w1 - lr*(m+1)*g.
        let mut w = arr1(&[1.0]).into_dyn();
        let mut gs = GradStore::new();
        gs.add("w", arr1(&[2.0]).into_dyn());
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&gs, |f| f("w", &mut w));
        assert!((w[[0]] - 0.8).abs() < 1e-12);
        opt.step(&gs, |f| f("w", &mut w));
        assert!((w[[0]] - (0.8 - 0.1 * (0.9 * 2.0 + 2.0))).abs() < 1e-12);
    }

    #[test]
    fn sgd_skips_params_without_gradients() {
        let mut w = arr1(&[1.0]).into_dyn();
        let gs = GradStore::new();
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&gs, |f| f("w", &mut w));
        assert_eq!(w[[0]], 1.0);
    }
}

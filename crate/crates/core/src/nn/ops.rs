//! Layer primitives with hand-written forward/backward passes.
//!
//! Convolutions are lowered to matrix products via im2col so the hot path
//! runs through ndarray's tuned matmul. Every backward pass here is covered
//! by a finite-difference test at the bottom of the file.

use ndarray::{Array2, Array3, ArrayD, Axis, Dimension};
use rand::Rng;

use super::{as2, gaussian, GradStore};
use crate::error::{Error, Result};

/// Fully connected layer: `y = x·W (+ b)`, weights shaped (d_in, d_out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ArrayD<f64>,
    pub b: Option<ArrayD<f64>>,
}

impl Linear {
    /// Gaussian-initialized layer with std `2/sqrt(d_in + d_out)`-style
    /// scaling left to the caller via `std`.
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            w: gaussian(&[d_in, d_out], std, rng),
            b: bias.then(|| ArrayD::zeros(vec![d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&as2(&self.w));
        if let Some(b) = &self.b {
            let b = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b;
        }
        y
    }

    /// Backward through the layer. `x` is the forward input. Returns dx and
    /// accumulates dW (and db) into `grads`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut GradStore) -> Array2<f64> {
        grads.add(&format!("{}.w", self.name), x.t().dot(dy).into_dyn());
        if self.b.is_some() {
            grads.add(&format!("{}.b", self.name), dy.sum_axis(Axis(0)).into_dyn());
        }
        dy.dot(&as2(&self.w).t())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}.w", self.name), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", self.name), b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
}

/// 2-D convolution over (C, H, W) features, stride 1, "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    /// Shaped (c_out, c_in, k, k).
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub k: usize,
}

/// Forward activations a conv layer needs to run its backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, k: usize, std: f64, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "only odd kernels are supported");
        Self {
            name: name.to_string(),
            w: gaussian(&[c_out, c_in, k, k], std, rng),
            b: ArrayD::zeros(vec![c_out]),
            k,
        }
    }

    /// Kaiming-style init for SiLU-activated stacks.
    pub fn kaiming<R: Rng>(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self::new(name, c_in, c_out, k, (2.0 / fan_in).sqrt(), rng)
    }

    /// All-zero weights and bias, used for output heads so a fresh network
    /// predicts exactly zero.
    pub fn zeroed(name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            name: name.to_string(),
            w: ArrayD::zeros(vec![c_out, c_in, k, k]),
            b: ArrayD::zeros(vec![c_out]),
            k,
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[0]
    }

    fn w2(&self) -> Array2<f64> {
        let (c_out, c_in) = (self.c_out(), self.c_in());
        self.w
            .view()
            .into_shape_with_order((c_out, c_in * self.k * self.k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "{}: input channels", self.name);
        let cols = im2col(x, self.k);
        let y_flat = self.w2().dot(&cols.t());
        let mut y = y_flat.into_shape_with_order((self.c_out(), h, w)).unwrap();
        let b = self.b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut plane, &bias) in y.outer_iter_mut().zip(b.iter()) {
            plane += bias;
        }
        (y, ConvCache { cols, in_dim: (c_in, h, w) })
    }

    pub fn backward(&self, cache: &ConvCache, dy: &Array3<f64>, grads: &mut GradStore) -> Array3<f64> {
        let (c_in, h, w) = cache.in_dim;
        let c_out = self.c_out();
        let dy_std = dy.as_standard_layout();
        let dy_flat = dy_std.view().into_shape_with_order((c_out, h * w)).unwrap();
        let dw = dy_flat.dot(&cache.cols);
        grads.add(
            &format!("{}.w", self.name),
            dw.into_shape_with_order((c_out, c_in, self.k, self.k)).unwrap().into_dyn(),
        );
        grads.add(&format!("{}.b", self.name), dy_flat.sum_axis(Axis(1)).into_dyn());
        let dcols = dy_flat.t().dot(&self.w2());
        col2im(&dcols, c_in, h, w, self.k)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}.w", self.name), &self.w);
        f(&format!("{}.b", self.name), &self.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        f(&format!("{}.b", self.name), &mut self.b);
    }
}

/// Unfold (C,H,W) into (H·W, C·k·k) patches with zero padding of k/2.
pub fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut cols = Array2::zeros((h * w, c * k * k));
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for ch in 0..c {
                for ki in 0..k {
                    let yy = (i + ki).wrapping_sub(pad);
                    if yy >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let xx = (j + kj).wrapping_sub(pad);
                        if xx >= w {
                            continue;
                        }
                        cols[(row, (ch * k + ki) * k + kj)] = x[(ch, yy, xx)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub fn col2im(dcols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = k / 2;
    let mut dx = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for ch in 0..c {
                for ki in 0..k {
                    let yy = (i + ki).wrapping_sub(pad);
                    if yy >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let xx = (j + kj).wrapping_sub(pad);
                        if xx >= w {
                            continue;
                        }
                        dx[(ch, yy, xx)] += dcols[(row, (ch * k + ki) * k + kj)];
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling, stride 2. Spatial dims must be even.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, i, j)| {
        0.25 * (x[(ch, 2 * i, 2 * j)]
            + x[(ch, 2 * i, 2 * j + 1)]
            + x[(ch, 2 * i + 1, 2 * j)]
            + x[(ch, 2 * i + 1, 2 * j + 1)])
    })
}

pub fn avg_pool2_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, _, _) = dy.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| 0.25 * dy[(ch, i / 2, j / 2)])
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[(ch, i / 2, j / 2)])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        dy[(ch, 2 * i, 2 * j)]
            + dy[(ch, 2 * i, 2 * j + 1)]
            + dy[(ch, 2 * i + 1, 2 * j)]
            + dy[(ch, 2 * i + 1, 2 * j + 1)]
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x·σ(x)`.
pub fn silu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Backward of SiLU given the forward *input*.
pub fn silu_backward<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |xi, &di| {
        let s = sigmoid(*xi);
        *xi = di * (s * (1.0 + *xi * (1.0 - s)));
    });
    dx
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of row-wise softmax: given probabilities `p` and upstream `dp`,
/// returns d(logits). Per row: `p ∘ (dp − <dp, p>)`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for ((mut ds_row, p_row), dp_row) in
        ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows())
    {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((d, &pi), &dpi) in ds_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *d = pi * (dpi - dot);
        }
    }
    ds
}

/// Scaled dot-product attention `softmax(QKᵀ/√d)·V`.
///
/// Width checks are hard errors because mismatches indicate trace/layer
/// wiring bugs, not recoverable conditions.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(attention_with_cache(q, k, v)?.0)
}

pub struct AttnCache {
    pub p: Array2<f64>,
}

pub fn attention_with_cache(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<(Array2<f64>, AttnCache)> {
    let d = q.ncols();
    if k.ncols() != d {
        return Err(Error::Shape(format!(
            "attention width mismatch: Q is n x {d}, K is m x {}",
            k.ncols()
        )));
    }
    if v.nrows() != k.nrows() {
        return Err(Error::Shape(format!(
            "attention K has {} rows but V has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let p = softmax_rows(&scores);
    Ok((p.dot(v), AttnCache { p }))
}

/// Backward of [`attention`]: returns (dQ, dK, dV).
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttnCache,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = cache.p.t().dot(dout);
    let dp = dout.dot(&v.t());
    let ds = softmax_rows_backward(&cache.p, &dp) * scale;
    let dq = ds.dot(k);
    let dk = ds.t().dot(q);
    (dq, dk, dv)
}

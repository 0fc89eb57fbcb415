//! Convolution, batch normalization and SiLU with explicit backward passes.
//!
//! Feature maps are stored channel-major as `[C, B * L * L]` matrices so a
//! convolution over the whole batch is one matrix product and
//! normalization statistics are contiguous row reductions.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::param::{join, Param, Parameterized};

/// Batch size and spatial side of a `[C, B * side * side]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub side: usize,
}

impl Geometry {
    pub fn area(&self) -> usize {
        self.side * self.side
    }

    pub fn columns(&self) -> usize {
        self.batch * self.area()
    }
}

fn im2col(x: ArrayView2<f64>, geo: Geometry, kernel: usize) -> Array2<f64> {
    let (channels, n) = x.dim();
    let side = geo.side as isize;
    let area = geo.area();
    let half = (kernel / 2) as isize;
    let mut cols = Array2::zeros((channels * kernel * kernel, n));
    for c in 0..channels {
        let src = x.row(c);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..kernel {
            for kx in 0..kernel {
                let mut dst_row = cols.row_mut((c * kernel + ky) * kernel + kx);
                let dst = dst_row.as_slice_mut().expect("contiguous rows");
                let (dy, dx) = (ky as isize - half, kx as isize - half);
                for b in 0..geo.batch {
                    let base = b * area;
                    for y in 0..side {
                        let sy = y + dy;
                        if sy < 0 || sy >= side {
                            continue;
                        }
                        let x_lo = (-dx).max(0);
                        let x_hi = (side - dx).min(side);
                        let d0 = base + (y * side) as usize;
                        let s0 = base + (sy * side) as usize;
                        for xx in x_lo..x_hi {
                            dst[d0 + xx as usize] = src[s0 + (xx + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<f64>, channels: usize, geo: Geometry, kernel: usize) -> Array2<f64> {
    let n = geo.columns();
    let side = geo.side as isize;
    let area = geo.area();
    let half = (kernel / 2) as isize;
    let mut x = Array2::zeros((channels, n));
    for c in 0..channels {
        let mut dst_row = x.row_mut(c);
        let dst = dst_row.as_slice_mut().expect("contiguous rows");
        for ky in 0..kernel {
            for kx in 0..kernel {
                let src = cols.row((c * kernel + ky) * kernel + kx);
                let src = src.as_slice().expect("contiguous rows");
                let (dy, dx) = (ky as isize - half, kx as isize - half);
                for b in 0..geo.batch {
                    let base = b * area;
                    for y in 0..side {
                        let sy = y + dy;
                        if sy < 0 || sy >= side {
                            continue;
                        }
                        let x_lo = (-dx).max(0);
                        let x_hi = (side - dx).min(side);
                        let d0 = base + (y * side) as usize;
                        let s0 = base + (sy * side) as usize;
                        for xx in x_lo..x_hi {
                            dst[s0 + (xx + dx) as usize] += src[d0 + xx as usize];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 convolution with "same" zero padding and no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out, in * k * k]`, input-channel-major then kernel row, column.
    pub weight: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::normal(&[out_channels, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, geo: Geometry) -> Array2<f64> {
        if self.kernel == 1 {
            self.weight.mat().dot(&x)
        } else {
            self.weight.mat().dot(&im2col(x, geo, self.kernel))
        }
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>, geo: Geometry) -> Array2<f64> {
        if self.kernel == 1 {
            general_mat_mul(1.0, &dy, &x.t(), 1.0, &mut self.weight.grad_mat_mut());
            self.weight.mat().t().dot(&dy)
        } else {
            let cols = im2col(x, geo, self.kernel);
            general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut self.weight.grad_mat_mut());
            drop(cols);
            let dcols = self.weight.mat().t().dot(&dy);
            col2im(dcols.view(), self.in_channels, geo, self.kernel)
        }
    }
}

/// Per-channel normalization over batch and spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Normalizes `z` in place with batch statistics, returning `xhat` and
    /// per-channel `1 / std`. Running statistics use the unbiased variance.
    fn normalize_train(&mut self, z: &mut Array2<f64>) -> Vec<f64> {
        let n = z.ncols() as f64;
        let mut inv_std = Vec::with_capacity(z.nrows());
        for (c, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let m = self.momentum;
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased;
        }
        inv_std
    }

    fn affine(&self, xhat: &Array2<f64>) -> Array2<f64> {
        let mut y = xhat.clone();
        for (c, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            row.mapv_inplace(|v| g * v + b);
        }
        y
    }

    pub fn infer(&self, mut z: Array2<f64>) -> Array2<f64> {
        for (c, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
            let (mean, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
            row.mapv_inplace(|v| g * (v - mean) * inv + b);
        }
        z
    }

    /// Gradient through the training-mode transform.
    fn backward(&mut self, dy: &Array2<f64>, xhat: &Array2<f64>, inv_std: &[f64]) -> Array2<f64> {
        let n = dy.ncols() as f64;
        let mut dz = Array2::zeros(dy.raw_dim());
        for c in 0..dy.nrows() {
            let (dy_c, xh_c) = (dy.row(c), xhat.row(c));
            let sum_dy = dy_c.sum();
            let sum_dy_xh = dy_c.dot(&xh_c);
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * inv_std[c] / n;
            Zip::from(dz.row_mut(c))
                .and(dy_c)
                .and(xh_c)
                .for_each(|d, &g, &x| *d = k * (n * g - sum_dy - x * sum_dy_xh));
        }
        dz
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct CbaCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    geo: Geometry,
}

/// Convolution, batch normalization and an optional SiLU.
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub activation: bool,
    cache: Option<CbaCache>,
}

impl Clone for ConvBnAct {
    fn clone(&self) -> Self {
        Self {
            conv: self.conv.clone(),
            bn: self.bn.clone(),
            activation: self.activation,
            cache: None,
        }
    }
}

impl std::fmt::Debug for ConvBnAct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvBnAct")
            .field("conv", &self.conv)
            .field("bn", &self.bn)
            .field("activation", &self.activation)
            .finish()
    }
}

impl ConvBnAct {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, kernel, rng),
            bn: BatchNorm::new(out_channels),
            activation,
            cache: None,
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward_train(&mut self, x: &Array2<f64>, geo: Geometry) -> Array2<f64> {
        let mut xhat = self.conv.forward(x.view(), geo);
        let inv_std = self.bn.normalize_train(&mut xhat);
        let mut y = self.bn.affine(&xhat);
        if self.activation {
            y.mapv_inplace(silu);
        }
        self.cache = Some(CbaCache {
            input: x.clone(),
            xhat,
            inv_std,
            geo,
        });
        y
    }

    pub fn infer(&self, x: ArrayView2<f64>, geo: Geometry) -> Array2<f64> {
        let mut y = self.bn.infer(self.conv.forward(x, geo));
        if self.activation {
            y.mapv_inplace(silu);
        }
        y
    }

    pub fn backward(&mut self, mut dout: Array2<f64>) -> Array2<f64> {
        let cache = self.cache.take().expect("backward without forward_train");
        if self.activation {
            let pre = self.bn.affine(&cache.xhat);
            Zip::from(&mut dout).and(&pre).for_each(|d, &y| *d *= silu_grad(y));
        }
        let dz = self.bn.backward(&dout, &cache.xhat, &cache.inv_std);
        drop(dout);
        self.conv.backward(cache.input.view(), dz.view(), cache.geo)
    }
}

impl Parameterized for ConvBnAct {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "conv.weight"), &mut self.conv.weight);
        f(&join(prefix, "bn.gamma"), &mut self.bn.gamma);
        f(&join(prefix, "bn.beta"), &mut self.bn.beta);
        f(&join(prefix, "bn.running_mean"), &mut self.bn.running_mean);
        f(&join(prefix, "bn.running_var"), &mut self.bn.running_var);
    }
}

/// Fused inverted residual block at stride 1 with equal in/out width.
///
/// Expansion 1: 3x3 conv + BN + SiLU. Expansion `e > 1`: 3x3 conv to `e`
/// times the width + BN + SiLU, then 1x1 projection + BN. Both add the
/// block input to the result.
#[derive(Clone, Debug)]
pub struct FusedMbConv {
    pub expand: ConvBnAct,
    pub project: Option<ConvBnAct>,
}

impl FusedMbConv {
    pub fn new<R: Rng + ?Sized>(width: usize, expansion: usize, rng: &mut R) -> Self {
        if expansion <= 1 {
            Self {
                expand: ConvBnAct::new(width, width, 3, true, rng),
                project: None,
            }
        } else {
            let hidden = width * expansion;
            Self {
                expand: ConvBnAct::new(width, hidden, 3, true, rng),
                project: Some(ConvBnAct::new(hidden, width, 1, false, rng)),
            }
        }
    }

    /// The last convolution before the residual sum.
    pub fn final_conv_mut(&mut self) -> &mut Conv2d {
        match &mut self.project {
            Some(p) => &mut p.conv,
            None => &mut self.expand.conv,
        }
    }

    pub fn clear_cache(&mut self) {
        self.expand.clear_cache();
        if let Some(p) = &mut self.project {
            p.clear_cache();
        }
    }

    pub fn forward_train(&mut self, x: Array2<f64>, geo: Geometry) -> Array2<f64> {
        let mut h = self.expand.forward_train(&x, geo);
        if let Some(p) = &mut self.project {
            h = p.forward_train(&h, geo);
        }
        h + x
    }

    pub fn infer(&self, x: Array2<f64>, geo: Geometry) -> Array2<f64> {
        let mut h = self.expand.infer(x.view(), geo);
        if let Some(p) = &self.project {
            h = p.infer(h.view(), geo);
        }
        h + x
    }

    pub fn backward(&mut self, dout: Array2<f64>) -> Array2<f64> {
        let mut d = dout.clone();
        if let Some(p) = &mut self.project {
            d = p.backward(d);
        }
        self.expand.backward(d) + dout
    }
}

impl Parameterized for FusedMbConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.expand.visit_params(&join(prefix, "expand"), f);
        if let Some(p) = &mut self.project {
            p.visit_params(&join(prefix, "project"), f);
        }
    }
}

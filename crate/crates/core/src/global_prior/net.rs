//! Small convolutional regressor: a stack of valid 3x3 convolutions with ReLU,
//! then fully connected layers ending in a scalar.
//!
//! Activations are channels-last `(batch, height, width, channels)` and
//! convolutions run as im2col followed by a matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub patch_side: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub conv_filters: Vec<usize>,
    pub dense_units: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            patch_side: 13,
            in_channels: 2,
            kernel: 3,
            conv_filters: vec![8, 16, 32],
            dense_units: vec![64, 32],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let shrink = self.conv_filters.len() * (self.kernel.saturating_sub(1));
        if self.kernel == 0 || self.patch_side <= shrink {
            return Err(Error::InvalidConfig(format!(
                "patch side {} too small for {} valid {}x{} convolutions",
                self.patch_side,
                self.conv_filters.len(),
                self.kernel,
                self.kernel
            )));
        }
        if self.in_channels == 0
            || self
                .conv_filters
                .iter()
                .chain(&self.dense_units)
                .any(|&u| u == 0)
        {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.patch_side * self.patch_side * self.in_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_side: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `(kernel * kernel * in_channels, filters)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    fn out_side(&self) -> usize {
        self.in_side - self.kernel + 1
    }

    fn im2col(&self, input: &[f64], batch: usize) -> Array2<f64> {
        let (s, c, k) = (self.in_side, self.in_channels, self.kernel);
        let o = self.out_side();
        let width = k * k * c;
        let mut cols = Array2::zeros((batch * o * o, width));
        let buf = cols.as_slice_mut().expect("standard layout");
        for b in 0..batch {
            let img = &input[b * s * s * c..(b + 1) * s * s * c];
            for y in 0..o {
                for x in 0..o {
                    let row = ((b * o + y) * o + x) * width;
                    for ky in 0..k {
                        let src = ((y + ky) * s + x) * c;
                        let dst = row + ky * k * c;
                        buf[dst..dst + k * c].copy_from_slice(&img[src..src + k * c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, batch: usize) -> Vec<f64> {
        let (s, c, k) = (self.in_side, self.in_channels, self.kernel);
        let o = self.out_side();
        let width = k * k * c;
        let mut out = vec![0.0; batch * s * s * c];
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        for b in 0..batch {
            let img = &mut out[b * s * s * c..(b + 1) * s * s * c];
            for y in 0..o {
                for x in 0..o {
                    let row = ((b * o + y) * o + x) * width;
                    for ky in 0..k {
                        let dst = ((y + ky) * s + x) * c;
                        let from = row + ky * k * c;
                        for (d, v) in img[dst..dst + k * c]
                            .iter_mut()
                            .zip(&src[from..from + k * c])
                        {
                            *d += v;
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(inputs, outputs)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The regressor. Hidden layers use ReLU; the output is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub conv: Vec<ConvLayer>,
    pub dense: Vec<DenseLayer>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv: Vec<(Array2<f64>, Array1<f64>)>,
    pub dense: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Forward activations kept for back-propagation.
struct Cache {
    conv_cols: Vec<Array2<f64>>,
    conv_out: Vec<Array2<f64>>,
    dense_in: Vec<Array2<f64>>,
    dense_out: Vec<Array2<f64>>,
}

fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, shape: (usize, usize)) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// `out = a · b + bias` (bias broadcast over rows).
fn affine(a: ArrayView2<'_, f64>, w: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), w.ncols()));
    for mut row in out.rows_mut() {
        row.assign(bias);
    }
    general_mat_mul(1.0, &a, w, 1.0, &mut out);
    out
}

impl Network {
    /// Initializes weights uniformly in `±sqrt(6 / fan_in)`; biases start at 0.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut conv = Vec::new();
        let (mut side, mut channels) = (arch.patch_side, arch.in_channels);
        for &filters in &arch.conv_filters {
            let fan_in = arch.kernel * arch.kernel * channels;
            conv.push(ConvLayer {
                in_side: side,
                in_channels: channels,
                kernel: arch.kernel,
                weight: fan_in_uniform(rng, fan_in, (fan_in, filters)),
                bias: Array1::zeros(filters),
            });
            side = side - arch.kernel + 1;
            channels = filters;
        }
        let mut dense = Vec::new();
        let mut width = side * side * channels;
        for &units in arch.dense_units.iter().chain(std::iter::once(&1)) {
            dense.push(DenseLayer {
                weight: fan_in_uniform(rng, width, (width, units)),
                bias: Array1::zeros(units),
            });
            width = units;
        }
        Ok(Network { arch, conv, dense })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .chain(self.dense.iter().map(|l| l.weight.len() + l.bias.len()))
            .sum()
    }

    fn forward_cached(&self, input: &[f64], batch: usize) -> (Array1<f64>, Cache) {
        debug_assert_eq!(input.len(), batch * self.arch.input_len());
        let mut cache = Cache {
            conv_cols: Vec::with_capacity(self.conv.len()),
            conv_out: Vec::with_capacity(self.conv.len()),
            dense_in: Vec::with_capacity(self.dense.len()),
            dense_out: Vec::with_capacity(self.dense.len()),
        };
        let mut act: Vec<f64> = input.to_vec();
        for layer in &self.conv {
            let cols = layer.im2col(&act, batch);
            let mut out = affine(cols.view(), &layer.weight, &layer.bias);
            relu_inplace(&mut out);
            act = out.as_slice().expect("standard layout").to_vec();
            cache.conv_cols.push(cols);
            cache.conv_out.push(out);
        }
        let width = act.len() / batch;
        let mut x = Array2::from_shape_vec((batch, width), act).expect("flatten");
        let last = self.dense.len() - 1;
        for (k, layer) in self.dense.iter().enumerate() {
            let mut out = affine(x.view(), &layer.weight, &layer.bias);
            if k < last {
                relu_inplace(&mut out);
            }
            cache.dense_in.push(x);
            cache.dense_out.push(out.clone());
            x = out;
        }
        (x.column(0).to_owned(), cache)
    }

    /// Predictions for a batch of flattened patches.
    pub fn forward(&self, input: &[f64], batch: usize) -> Array1<f64> {
        self.forward_cached(input, batch).0
    }

    /// Mean absolute error and its parameter gradients.
    pub fn mae_and_gradients(&self, input: &[f64], targets: &[f64]) -> (f64, Gradients) {
        let batch = targets.len();
        let (pred, cache) = self.forward_cached(input, batch);
        let loss = pred
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / batch as f64;
        let dpred = Array2::from_shape_fn((batch, 1), |(b, _)| {
            let e = pred[b] - targets[b];
            let s = if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            };
            s / batch as f64
        });
        (loss, self.backward(dpred, cache, batch))
    }

    fn backward(&self, mut grad: Array2<f64>, cache: Cache, batch: usize) -> Gradients {
        let mut dense_grads = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for k in (0..self.dense.len()).rev() {
            let layer = &self.dense[k];
            if k < last {
                let out = &cache.dense_out[k];
                grad.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let input = &cache.dense_in[k];
            let dw = input.t().dot(&grad);
            let db = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weight.t());
            dense_grads.push((dw, db));
        }
        dense_grads.reverse();

        let mut conv_grads = Vec::with_capacity(self.conv.len());
        // flattened (batch, features) is the same memory as (batch*o*o, filters)
        let mut grad_flat: Vec<f64> = grad.iter().copied().collect();
        for k in (0..self.conv.len()).rev() {
            let layer = &self.conv[k];
            let out = &cache.conv_out[k];
            let mut g = Array2::from_shape_vec(out.dim(), grad_flat).expect("conv grad shape");
            g.zip_mut_with(out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            });
            let cols = &cache.conv_cols[k];
            let dw = cols.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            conv_grads.push((dw, db));
            grad_flat = if k > 0 {
                let dcols = g.dot(&layer.weight.t());
                layer.col2im(&dcols, batch)
            } else {
                Vec::new()
            };
        }
        conv_grads.reverse();
        Gradients {
            conv: conv_grads,
            dense: dense_grads,
        }
    }

    /// Every parameter tensor as `(weights, bias)` pairs, conv layers first.
    pub fn tensors_mut(&mut self) -> Vec<(&mut Array2<f64>, &mut Array1<f64>)> {
        self.conv
            .iter_mut()
            .map(|l| (&mut l.weight, &mut l.bias))
            .chain(self.dense.iter_mut().map(|l| (&mut l.weight, &mut l.bias)))
            .collect()
    }

    pub fn tensors(&self) -> Vec<(&Array2<f64>, &Array1<f64>)> {
        self.conv
            .iter()
            .map(|l| (&l.weight, &l.bias))
            .chain(self.dense.iter().map(|l| (&l.weight, &l.bias)))
            .collect()
    }

    /// All parameters in a fixed order (for serialization).
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for (w, b) in self.tensors_mut() {
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }
}

impl Gradients {
    pub fn tensors(&self) -> Vec<(&Array2<f64>, &Array1<f64>)> {
        self.conv
            .iter()
            .chain(self.dense.iter())
            .map(|(w, b)| (w, b))
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    moments: Vec<(Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>)>,
}

impl Adam {
    pub fn new(net: &Network, step_size: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let moments = net
            .tensors()
            .into_iter()
            .map(|(w, b)| {
                (
                    Array2::zeros(w.dim()),
                    Array2::zeros(w.dim()),
                    Array1::zeros(b.len()),
                    Array1::zeros(b.len()),
                )
            })
            .collect();
        Adam {
            step_size,
            beta1,
            beta2,
            epsilon,
            t: 0,
            moments,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.step_size;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        };
        for (((w, b), (gw, gb)), (mw, vw, mb, vb)) in net
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.moments.iter_mut())
        {
            ndarray::Zip::from(w)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(b)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            patch_side: 7,
            in_channels: 2,
            kernel: 3,
            conv_filters: vec![3, 4],
            dense_units: vec![5],
        }
    }

    #[test]
    fn shapes_and_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(Architecture::default(), &mut rng).unwrap();
        // 8*(18+1) + 16*(72+1) + 32*(144+1) + 64*(1568+1) + 32*(64+1) + (32+1)
        assert_eq!(
            net.parameter_count(),
            152 + 1168 + 4640 + 100_416 + 2080 + 33
        );
        let x = vec![0.3; 4 * net.arch.input_len()];
        assert_eq!(net.forward(&x, 4).len(), 4);
    }

    #[test]
    fn bad_architecture_rejected() {
        let arch = Architecture {
            patch_side: 6,
            ..Architecture::default()
        };
        assert!(arch.validate().is_err());
    }

    #[test]
    fn im2col_convolution_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(small_arch(), &mut rng).unwrap();
        let layer = &net.conv[0];
        let input: Vec<f64> = (0..2 * 49 * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cols = layer.im2col(&input, 2);
        let out = affine(cols.view(), &layer.weight, &layer.bias);
        let (s, c, k, o) = (7, 2, 3, 5);
        for b in 0..2 {
            for y in 0..o {
                for x in 0..o {
                    for f in 0..layer.weight.ncols() {
                        let mut acc = layer.bias[f];
                        for ky in 0..k {
                            for kx in 0..k {
                                for ch in 0..c {
                                    acc += input[((b * s + y + ky) * s + x + kx) * c + ch]
                                        * layer.weight[[(ky * k + kx) * c + ch, f]];
                                }
                            }
                        }
                        let got = out[[(b * o + y) * o + x, f]];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(small_arch(), &mut rng).unwrap();
        let mut other = Network::new(small_arch(), &mut rng).unwrap();
        assert_ne!(net, other);
        other.set_flat_parameters(&net.flat_parameters()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_flat_parameters(&[0.0; 3]).is_err());
    }

    #[test]
    fn adam_reduces_loss_on_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(small_arch(), &mut rng).unwrap();
        let x: Vec<f64> = (0..8 * 98).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..8).map(|k| k as f64 * 0.1).collect();
        let mut adam = Adam::new(&net, 1e-2, 0.9, 0.999, 1e-8);
        let (first, _) = net.mae_and_gradients(&x, &y);
        for _ in 0..200 {
            let (_, g) = net.mae_and_gradients(&x, &y);
            adam.step(&mut net, &g);
        }
        let (last, _) = net.mae_and_gradients(&x, &y);
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}

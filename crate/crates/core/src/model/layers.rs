//! Dense building blocks with explicit reverse-mode derivatives.
//!
//! Activations are time-major `(T, D)` matrices. Each `backward` accumulates
//! parameter gradients into a [`Gradients`] buffer and returns the input
//! gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamId, ParamStore};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&store.mat(self.weight));
        if let Some(b) = self.bias {
            y += &store.vec(b);
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Gradients,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grads.mat_mut(self.weight));
        if let Some(b) = self.bias {
            grads.vec_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        dy.dot(&store.mat(self.weight).t())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormTape {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormTape) {
        let d = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let s = *is;
            row.mapv_inplace(|v| (v - mean) * s);
        }
        let y = &normalized * &store.vec(self.gamma) + store.vec(self.beta);
        (y, LayerNormTape { normalized, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Gradients,
        tape: &LayerNormTape,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        grads
            .vec_mut(self.gamma)
            .scaled_add(1.0, &(&dy * &tape.normalized).sum_axis(Axis(0)));
        grads.vec_mut(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let gamma = store.vec(self.gamma);
        let d = dy.ncols() as f64;
        let mut dx = &dy * &gamma;
        for ((mut row, xhat), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(tape.normalized.rows())
            .zip(tape.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            row.zip_mut_with(&xhat, |g, &x| *g = is * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

/// Strided 1-D convolution over time-major input, padded so that the output
/// has exactly `floor(L / stride)` frames.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    /// `(out_channels, kernel, in_channels)`
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dTape {
    padded: Array2<f64>,
    input_len: usize,
}

impl Conv1d {
    fn left_pad(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        input_len / self.stride
    }

    fn patches<'a>(&self, padded: &'a Array2<f64>, out_len: usize) -> ArrayView2<'a, f64> {
        use ndarray::ShapeBuilder;
        let cin = self.in_channels;
        let flat = padded.as_slice().expect("standard layout");
        ArrayView2::from_shape(
            (out_len, self.kernel * cin).strides((self.stride * cin, 1)),
            flat,
        )
        .expect("patch view in bounds")
    }

    /// Returns the pre-activation output `(L / stride, out_channels)`.
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, Conv1dTape) {
        debug_assert_eq!(store.tensor(self.weight).shape[0], self.out_channels);
        let len = x.nrows();
        let out_len = self.output_len(len);
        let pad_total = self.kernel - self.stride;
        let mut padded = Array2::zeros((len + pad_total, self.in_channels));
        let pl = self.left_pad();
        padded.slice_mut(ndarray::s![pl..pl + len, ..]).assign(&x);
        let w = store.mat(self.weight);
        let mut y = self.patches(&padded, out_len).dot(&w.t());
        y += &store.vec(self.bias);
        (
            y,
            Conv1dTape {
                padded,
                input_len: len,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Gradients,
        tape: &Conv1dTape,
        dy: ArrayView2<'_, f64>,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let out_len = dy.nrows();
        let patches = self.patches(&tape.padded, out_len);
        general_mat_mul(1.0, &dy.t(), &patches, 1.0, &mut grads.mat_mut(self.weight));
        grads.vec_mut(self.bias).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        if !need_input_grad {
            return None;
        }
        let dpatch = dy.dot(&store.mat(self.weight));
        let cin = self.in_channels;
        let mut dpad = vec![0.0; tape.padded.len()];
        let width = self.kernel * cin;
        for (t, row) in dpatch.rows().into_iter().enumerate() {
            let start = t * self.stride * cin;
            for (acc, g) in dpad[start..start + width].iter_mut().zip(row.iter()) {
                *acc += g;
            }
        }
        let pl = self.left_pad();
        let dx = Array2::from_shape_vec(
            (tape.input_len, cin),
            dpad[pl * cin..(pl + tape.input_len) * cin].to_vec(),
        )
        .expect("input grad shape");
        Some(dx)
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Fixed sinusoidal position table `(T, D)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = Array2::from_shape_fn((3, 5), |(i, j)| (i * j) as f64 - 2.0);
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_length_is_floor_of_stride() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", vec![2, 10, 1], vec![0.1; 20], super::super::params::ParamGroup::Cnn)
            .unwrap();
        let b = store
            .register("b", vec![2], vec![0.0; 2], super::super::params::ParamGroup::Cnn)
            .unwrap();
        let conv = Conv1d {
            weight: w,
            bias: b,
            kernel: 10,
            stride: 5,
            in_channels: 1,
            out_channels: 2,
        };
        for len in [5usize, 9, 10, 11, 99, 100] {
            let x = Array2::ones((len, 1));
            let (y, _) = conv.forward(&store, x.view());
            assert_eq!(y.nrows(), len / 5);
        }
    }
}

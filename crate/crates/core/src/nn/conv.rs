//! 5×5 same-padded convolution layers lowered to matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, NdFloat};
use rand::Rng;

use crate::error::{Error, Result};

pub const KERNEL: usize = 5;
pub const PAD: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `(out, in, 5, 5)`.
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: NdFloat> ConvGrads<T> {
    pub fn zeros_like(layer: &ConvLayer<T>) -> Self {
        Self { weight: Array4::zeros(layer.weight.dim()), bias: Array1::zeros(layer.bias.len()) }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// Destination columns `[lo, hi)` of a tap offset `k` and source start.
fn tap_span(k: usize, n: usize) -> (usize, usize, usize) {
    let lo = PAD.saturating_sub(k);
    let hi = (n + PAD).saturating_sub(k).min(n);
    (lo, hi, lo + k - PAD)
}

/// Rows `(c, ky, kx)`, columns `(h, w)`: the zero-padded patches of `x`.
pub fn im2col<T: NdFloat>(x: ArrayView3<T>) -> Array2<T> {
    let (c_in, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut col = Array2::zeros((c_in * TAPS, h * w));
    for c in 0..c_in {
        for ky in 0..KERNEL {
            let (ylo, yhi, sy0) = tap_span(ky, h);
            for kx in 0..KERNEL {
                let (xlo, xhi, sx0) = tap_span(kx, w);
                let mut row = col.row_mut(c * TAPS + ky * KERNEL + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for (y, sy) in (ylo..yhi).zip(sy0..) {
                    let s = (c * h + sy) * w + sx0;
                    row[y * w + xlo..y * w + xhi].copy_from_slice(&src[s..s + xhi - xlo]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im<T: NdFloat>(col: &Array2<T>, c_in: usize, h: usize, w: usize) -> Array3<T> {
    let mut x = Array3::zeros((c_in, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    for c in 0..c_in {
        for ky in 0..KERNEL {
            let (ylo, yhi, sy0) = tap_span(ky, h);
            for kx in 0..KERNEL {
                let (xlo, xhi, sx0) = tap_span(kx, w);
                let row = col.row(c * TAPS + ky * KERNEL + kx);
                let row = row.as_slice().expect("standard layout");
                for (y, sy) in (ylo..yhi).zip(sy0..) {
                    let d = (c * h + sy) * w + sx0;
                    for (o, &v) in dst[d..d + xhi - xlo].iter_mut().zip(&row[y * w + xlo..y * w + xhi]) {
                        *o += v;
                    }
                }
            }
        }
    }
    x
}

impl<T: NdFloat> ConvLayer<T> {
    pub fn zeros(c_in: usize, c_out: usize, relu: bool) -> Self {
        Self { weight: Array4::zeros((c_out, c_in, KERNEL, KERNEL)), bias: Array1::zeros(c_out), relu }
    }

    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init<R: Rng>(c_in: usize, c_out: usize, relu: bool, rng: &mut R) -> Self {
        let bound = (6.0 / (c_in * TAPS) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((c_out, c_in, KERNEL, KERNEL), || {
            T::from(rng.random_range(-bound..bound)).expect("cast")
        });
        Self { weight, bias: Array1::zeros(c_out), relu }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn weight_matrix(&self) -> Array2<T> {
        let (o, i, _, _) = self.weight.dim();
        self.weight.as_standard_layout().into_owned().into_shape_with_order((o, i * TAPS)).expect("contiguous")
    }

    fn check_input(&self, x: &ArrayView3<T>) -> Result<()> {
        if x.dim().0 != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.dim().0
            )));
        }
        Ok(())
    }

    /// Cross-correlation plus bias, then ReLU if enabled.
    pub fn forward(&self, x: ArrayView3<T>) -> Result<Array3<T>> {
        self.check_input(&x)?;
        let (_, h, w) = x.dim();
        let col = im2col(x);
        let mut y = Array2::zeros((self.out_channels(), h * w));
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &self.weight_matrix(), &col, T::one(), &mut y);
        if self.relu {
            y.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        Ok(y.into_shape_with_order((self.out_channels(), h, w)).expect("contiguous"))
    }

    /// Gradients given the layer input `x`, its output `y` and `dy = ∂L/∂y`.
    /// Returns `(∂L/∂x, parameter gradients)`.
    pub fn backward(&self, x: ArrayView3<T>, y: ArrayView3<T>, dy: ArrayView3<T>) -> Result<(Array3<T>, ConvGrads<T>)> {
        self.check_input(&x)?;
        let (c_in, h, w) = x.dim();
        if y.dim() != dy.dim() || y.dim() != (self.out_channels(), h, w) {
            return Err(Error::Shape("conv backward shapes disagree".into()));
        }
        let mut dz = dy.to_owned();
        if self.relu {
            dz.zip_mut_with(&y, |g, &out| {
                if out <= T::zero() {
                    *g = T::zero()
                }
            });
        }
        let dz = dz.into_shape_with_order((self.out_channels(), h * w)).expect("contiguous");
        let col = im2col(x);
        let mut dw = Array2::zeros((self.out_channels(), c_in * TAPS));
        general_mat_mul(T::one(), &dz, &col.t(), T::zero(), &mut dw);
        let bias = dz.sum_axis(Axis(1));
        let mut dcol = Array2::zeros((c_in * TAPS, h * w));
        general_mat_mul(T::one(), &self.weight_matrix().t(), &dz, T::zero(), &mut dcol);
        let dx = col2im(&dcol, c_in, h, w);
        let weight = dw.into_shape_with_order(self.weight.dim()).expect("contiguous");
        Ok((dx, ConvGrads { weight, bias }))
    }

    pub fn cast<U: NdFloat>(&self) -> ConvLayer<U> {
        let c = |v: &T| U::from(*v).expect("cast");
        ConvLayer { weight: self.weight.map(c), bias: self.bias.map(c), relu: self.relu }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn direct_conv(layer: &ConvLayer<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = layer.out_channels();
        let mut y = Array3::zeros((c_out, h, w));
        for o in 0..c_out {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = layer.bias[o];
                    for c in 0..c_in {
                        for ky in 0..5isize {
                            for kx in 0..5isize {
                                let sy = yy + ky - 2;
                                let sx = xx + kx - 2;
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    acc += layer.weight[[o, c, ky as usize, kx as usize]] * x[[c, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    y[[o, yy as usize, xx as usize]] = if layer.relu { acc.max(0.0) } else { acc };
                }
            }
        }
        y
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for relu in [false, true] {
            let layer = ConvLayer::<f64>::init(3, 4, relu, &mut rng);
            let x = Array3::from_shape_simple_fn((3, 6, 7), || rng.random::<f64>() - 0.5);
            let fast = layer.forward(x.view()).unwrap();
            let slow = direct_conv(&layer, &x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centre_tap_kernel_sums_channels() {
        let mut layer = ConvLayer::<f64>::zeros(2, 1, false);
        layer.weight[[0, 0, 2, 2]] = 1.0;
        layer.weight[[0, 1, 2, 2]] = 1.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Array3::from_shape_simple_fn((2, 6, 6), || rng.random::<f64>());
        let y = layer.forward(x.view()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((y[[0, i, j]] - x[[0, i, j]] - x[[1, i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let mut layer = ConvLayer::<f32>::zeros(1, 1, false);
        layer.weight.fill(1.0);
        let y = layer.forward(Array3::ones((1, 8, 8)).view()).unwrap();
        assert_eq!(y[[0, 4, 4]], 25.0);
        assert_eq!(y[[0, 0, 0]], 9.0);
        assert_eq!(y[[0, 0, 4]], 15.0);
    }

    #[test]
    fn relu_clamps_negative_bias() {
        let mut layer = ConvLayer::<f32>::zeros(1, 2, true);
        layer.bias.fill(-10.0);
        let y = layer.forward(Array3::zeros((1, 4, 4)).view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let layer = ConvLayer::<f32>::zeros(3, 2, false);
        assert!(layer.forward(Array3::zeros((2, 4, 4)).view()).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_simple_fn((2, 5, 4), || rng.random::<f64>());
        let c = Array2::from_shape_simple_fn((50, 20), || rng.random::<f64>());
        let lhs: f64 = (&im2col(x.view()) * &c).sum();
        let rhs: f64 = (&x * &col2im(&c, 2, 5, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs());
    }
}

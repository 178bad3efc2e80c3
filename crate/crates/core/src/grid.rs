//! Kernel sampling grids and convolution kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Kernel size and dilation of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    kernel_size: usize,
    dilation: usize,
}

impl GridSpec {
    pub fn new(kernel_size: usize, dilation: usize) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return config_err(format!("kernel size must be odd and positive, got {kernel_size}"));
        }
        if dilation < 1 {
            return config_err("dilation must be at least 1");
        }
        Ok(GridSpec { kernel_size, dilation })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn radius(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    /// Half-width of the receptive window in pixels, `radius · dilation`.
    pub fn reach(&self) -> usize {
        self.radius() * self.dilation
    }

    /// Tap offsets `(i·Ds, j·Ds)` for `i, j ∈ [-r, r]`, row-major.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius() as isize;
        let d = self.dilation as isize;
        (-r..=r).flat_map(|i| (-r..=r).map(move |j| (i * d, j * d))).collect()
    }
}

/// Offsets of the sampling grid for `(kernel_size, dilation)`.
pub fn make_grid(kernel_size: usize, dilation: usize) -> Result<Vec<(isize, isize)>> {
    Ok(GridSpec::new(kernel_size, dilation)?.offsets())
}

/// Weights `Ks × Ks × Cin × Cout` and a `Cout` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T: Scalar> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [kh, kw, _, cout] = weights.shape().0;
        if kh != kw || kh % 2 == 0 {
            return config_err(format!("kernel weights must be square with odd size, got {}", weights.shape()));
        }
        if bias.numel() != cout {
            return config_err(format!("bias has {} values for {cout} output channels", bias.numel()));
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn zeros(kernel_size: usize, cin: usize, cout: usize) -> Self {
        ConvKernel {
            weights: Tensor::zeros(Shape::new(kernel_size, kernel_size, cin, cout)),
            bias: Tensor::zeros(Shape::matrix(1, cout)),
        }
    }

    /// Uniform weights in `±sqrt(1/fan_in)` and a zero bias.
    pub fn init<R: Rng + ?Sized>(kernel_size: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::init_with_gain(kernel_size, cin, cout, 1.0, rng)
    }

    /// Uniform weights in `±sqrt(gain/fan_in)` and a zero bias.
    pub fn init_with_gain<R: Rng + ?Sized>(kernel_size: usize, cin: usize, cout: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / (kernel_size * kernel_size * cin) as f64).sqrt();
        ConvKernel {
            weights: Tensor::uniform(Shape::new(kernel_size, kernel_size, cin, cout), bound, rng),
            bias: Tensor::zeros(Shape::matrix(1, cout)),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape().0[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weights.shape().0[2]
    }
    pub fn out_channels(&self) -> usize {
        self.weights.shape().0[3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_by_three_unit_dilation() {
        let g = make_grid(3, 1).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (-1, -1));
        assert_eq!(g[1], (-1, 0));
        assert_eq!(g[8], (1, 1));
    }

    #[test]
    fn dilated_grid_spans_five_by_five() {
        let g = make_grid(3, 2).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (-2, -2));
        assert_eq!(g[1], (-2, 0));
        assert_eq!(g[3], (0, -2));
        assert_eq!(g[8], (2, 2));
    }

    #[test]
    fn unit_kernel_collapses() {
        assert_eq!(make_grid(1, 5).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn rejects_even_size_and_zero_dilation() {
        assert!(make_grid(4, 1).is_err());
        assert!(make_grid(3, 0).is_err());
        assert!(make_grid(0, 1).is_err());
    }

    #[test]
    fn grid_size_and_multiples() {
        for ks in [1, 3, 5, 7, 9] {
            for ds in 1..5 {
                let g = make_grid(ks, ds).unwrap();
                assert_eq!(g.len(), ks * ks);
                let r = ((ks - 1) / 2 * ds) as isize;
                for (i, j) in g {
                    assert_eq!(i % ds as isize, 0);
                    assert_eq!(j % ds as isize, 0);
                    assert!(i.abs() <= r && j.abs() <= r);
                }
            }
        }
    }
}

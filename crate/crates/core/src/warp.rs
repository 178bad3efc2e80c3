//! Sub-pixel bilinear sampling and channel-shared feature-map warping.
//!
//! Query coordinates are clamped to the image rectangle before
//! interpolation. A displacement field stores `(row, column)` offsets in
//! pixels, one 2-vector per spatial position, applied to every channel.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Per-pixel `(row, column)` offsets, `B × H × W × 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T: Scalar>(Tensor<T>);

impl<T: Scalar> DisplacementField<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().channels() != 2 {
            return shape_err(format!("displacement field needs 2 components, got {}", values.shape()));
        }
        Ok(DisplacementField(values))
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        DisplacementField(Tensor::zeros(Shape::new(batch, height, width, 2)))
    }

    /// Same offset at every pixel.
    pub fn constant(batch: usize, height: usize, width: usize, row: f64, col: f64) -> Self {
        DisplacementField(Tensor::from_fn(Shape::new(batch, height, width, 2), |_, _, _, c| {
            T::of(if c == 0 { row } else { col })
        }))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }
}

/// Interpolation footprint of one query point.
#[derive(Debug, Clone, Copy)]
struct Footprint<T> {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: T,
    fc: T,
    row_clamped: bool,
    col_clamped: bool,
}

#[inline]
fn axis<T: Scalar>(coord: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::of((n - 1) as f64);
    let clamped = coord < T::zero() || coord > hi;
    let q = coord.max(T::zero()).min(hi);
    let i0 = q.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, q - T::of(i0 as f64), clamped)
}

#[inline]
fn footprint<T: Scalar>(row: T, col: T, h: usize, w: usize) -> Footprint<T> {
    let (r0, r1, fr, row_clamped) = axis(row, h);
    let (c0, c1, fc, col_clamped) = axis(col, w);
    Footprint { r0, r1, c0, c1, fr, fc, row_clamped, col_clamped }
}

/// Bilinear value of channel `c` at real coordinate `(row, col)` of batch item `b`.
pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, b: usize, row: T, col: T, c: usize) -> T {
    let s = x.shape();
    let f = footprint(row, col, s.height(), s.width());
    let one = T::one();
    (one - f.fr) * (one - f.fc) * x.at(b, f.r0, f.c0, c)
        + (one - f.fr) * f.fc * x.at(b, f.r0, f.c1, c)
        + f.fr * (one - f.fc) * x.at(b, f.r1, f.c0, c)
        + f.fr * f.fc * x.at(b, f.r1, f.c1, c)
}

fn check<T: Scalar>(x: &Tensor<T>, field: &DisplacementField<T>) -> Result<()> {
    let (xs, fs) = (x.shape(), field.shape());
    if xs.0[..3] != fs.0[..3] {
        return shape_err(format!("field {fs} does not cover tensor {xs}"));
    }
    Ok(())
}

/// `x̃(p) = x(p + Δp(p))`, sharing one offset across all channels of a pixel.
pub fn warp<T: Scalar>(x: &Tensor<T>, field: &DisplacementField<T>) -> Result<Tensor<T>> {
    check(x, field)?;
    let s = x.shape();
    let [nb, nh, nw, nc] = s.0;
    let src = x.data();
    let fv = field.values().data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    let one = T::one();
    for b in 0..nb {
        for i in 0..nh {
            for j in 0..nw {
                let p = (b * nh + i) * nw + j;
                let row = T::of(i as f64) + fv[2 * p];
                let col = T::of(j as f64) + fv[2 * p + 1];
                let f = footprint(row, col, nh, nw);
                let w00 = (one - f.fr) * (one - f.fc);
                let w01 = (one - f.fr) * f.fc;
                let w10 = f.fr * (one - f.fc);
                let w11 = f.fr * f.fc;
                let k00 = s.index(b, f.r0, f.c0, 0);
                let k01 = s.index(b, f.r0, f.c1, 0);
                let k10 = s.index(b, f.r1, f.c0, 0);
                let k11 = s.index(b, f.r1, f.c1, 0);
                let o = p * nc;
                for c in 0..nc {
                    dst[o + c] = w00 * src[k00 + c] + w01 * src[k01 + c] + w10 * src[k10 + c] + w11 * src[k11 + c];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp`] with respect to the feature map and the field.
/// Clamped coordinate components receive zero field gradient.
pub fn warp_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    field: &DisplacementField<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check(x, field)?;
    if upstream.shape() != x.shape() {
        return shape_err(format!("upstream gradient {} does not match {}", upstream.shape(), x.shape()));
    }
    let s = x.shape();
    let [nb, nh, nw, nc] = s.0;
    let src = x.data();
    let g = upstream.data();
    let fv = field.values().data();
    let mut gx = Tensor::zeros(s);
    let mut gf = Tensor::zeros(field.shape());
    let one = T::one();
    {
        let gxd = gx.data_mut();
        let gfd = gf.data_mut();
        for b in 0..nb {
            for i in 0..nh {
                for j in 0..nw {
                    let p = (b * nh + i) * nw + j;
                    let row = T::of(i as f64) + fv[2 * p];
                    let col = T::of(j as f64) + fv[2 * p + 1];
                    let f = footprint(row, col, nh, nw);
                    let w00 = (one - f.fr) * (one - f.fc);
                    let w01 = (one - f.fr) * f.fc;
                    let w10 = f.fr * (one - f.fc);
                    let w11 = f.fr * f.fc;
                    let k00 = s.index(b, f.r0, f.c0, 0);
                    let k01 = s.index(b, f.r0, f.c1, 0);
                    let k10 = s.index(b, f.r1, f.c0, 0);
                    let k11 = s.index(b, f.r1, f.c1, 0);
                    let o = p * nc;
                    let (mut dr, mut dc) = (T::zero(), T::zero());
                    for c in 0..nc {
                        let gv = g[o + c];
                        gxd[k00 + c] += w00 * gv;
                        gxd[k01 + c] += w01 * gv;
                        gxd[k10 + c] += w10 * gv;
                        gxd[k11 + c] += w11 * gv;
                        let (x00, x01, x10, x11) = (src[k00 + c], src[k01 + c], src[k10 + c], src[k11 + c]);
                        dr += gv * ((one - f.fc) * (x10 - x00) + f.fc * (x11 - x01));
                        dc += gv * ((one - f.fr) * (x01 - x00) + f.fr * (x11 - x10));
                    }
                    if !f.row_clamped {
                        gfd[2 * p] = dr;
                    }
                    if !f.col_clamped {
                        gfd[2 * p + 1] = dc;
                    }
                }
            }
        }
    }
    Ok((gx, gf))
}

//! Forward and backward numerical kernels behind the differentiable ops.
//!
//! These functions are pure: they take finished tensors and return new ones.
//! The tape in [`crate::autodiff`] stitches them into a graph.

use crate::error::{shape_err, Result};
use crate::grid::GridSpec;
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::{Shape, Tensor};

fn check_matrix<T: Scalar>(w: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let [a, b, k, n] = w.shape().0;
    if a != 1 || b != 1 {
        return shape_err(format!("{what} must be a matrix, got {}", w.shape()));
    }
    Ok((k, n))
}

/// `x` viewed as `(B·H·W) × k` times a `k × n` matrix.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, n) = check_matrix(w, "right operand")?;
    let xs = x.shape();
    if xs.channels() != k {
        return shape_err(format!("matmul inner extents differ: {} vs {}", xs, w.shape()));
    }
    let m = xs.rows();
    let mut out = Tensor::zeros(xs.with_channels(n));
    gemm(T::one(), MatRef::new(x.data(), m, k), MatRef::new(w.data(), k, n), T::zero(), MatMut::new(out.data_mut(), m, n));
    Ok(out)
}

pub fn matmul_backward<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (k, n) = (xs.channels(), g.shape().channels());
    let m = xs.rows();
    let mut gx = Tensor::zeros(xs);
    gemm(T::one(), MatRef::new(g.data(), m, n), MatRef::new(w.data(), k, n).t(), T::zero(), MatMut::new(gx.data_mut(), m, k));
    let mut gw = Tensor::zeros(w.shape());
    gemm(T::one(), MatRef::new(x.data(), m, k).t(), MatRef::new(g.data(), m, n), T::zero(), MatMut::new(gw.data_mut(), k, n));
    (gx, gw)
}

/// Adds a length-C bias to every row of the `(B·H·W) × C` view.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().channels();
    if bias.numel() != c {
        return shape_err(format!("bias of {} values for {c} channels", bias.numel()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

pub fn bias_backward<T: Scalar>(g: &Tensor<T>, bias_shape: Shape) -> Tensor<T> {
    let c = g.shape().channels();
    let mut gb = Tensor::zeros(bias_shape);
    for row in g.data().chunks_exact(c.max(1)) {
        for (acc, v) in gb.data_mut().iter_mut().zip(row) {
            *acc += *v;
        }
    }
    gb
}

/// Unfolds every `Ks × Ks` dilated window into a row, zero outside the image.
fn im2col<T: Scalar>(x: &Tensor<T>, spec: GridSpec) -> Vec<T> {
    let [nb, nh, nw, nc] = x.shape().0;
    let offsets = spec.offsets();
    let kcols = offsets.len() * nc;
    let mut col = vec![T::zero(); nb * nh * nw * kcols];
    let src = x.data();
    let mut row = 0;
    for b in 0..nb {
        for i in 0..nh {
            for j in 0..nw {
                let dst = &mut col[row * kcols..(row + 1) * kcols];
                for (t, &(di, dj)) in offsets.iter().enumerate() {
                    let si = i as isize + di;
                    let sj = j as isize + dj;
                    if si < 0 || sj < 0 || si >= nh as isize || sj >= nw as isize {
                        continue;
                    }
                    let s = ((b * nh + si as usize) * nw + sj as usize) * nc;
                    dst[t * nc..(t + 1) * nc].copy_from_slice(&src[s..s + nc]);
                }
                row += 1;
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], shape: Shape, spec: GridSpec) -> Tensor<T> {
    let [nb, nh, nw, nc] = shape.0;
    let offsets = spec.offsets();
    let kcols = offsets.len() * nc;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let mut row = 0;
    for b in 0..nb {
        for i in 0..nh {
            for j in 0..nw {
                let src = &col[row * kcols..(row + 1) * kcols];
                for (t, &(di, dj)) in offsets.iter().enumerate() {
                    let si = i as isize + di;
                    let sj = j as isize + dj;
                    if si < 0 || sj < 0 || si >= nh as isize || sj >= nw as isize {
                        continue;
                    }
                    let d = ((b * nh + si as usize) * nw + sj as usize) * nc;
                    for (acc, v) in dst[d..d + nc].iter_mut().zip(&src[t * nc..(t + 1) * nc]) {
                        *acc += *v;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn check_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: GridSpec) -> Result<(usize, usize)> {
    let [kh, kw, cin, cout] = w.shape().0;
    if kh != spec.kernel_size() || kw != spec.kernel_size() {
        return shape_err(format!("kernel {} does not match grid size {}", w.shape(), spec.kernel_size()));
    }
    if x.shape().channels() != cin {
        return shape_err(format!("input has {} channels, kernel expects {cin}", x.shape().channels()));
    }
    Ok((cin, cout))
}

/// Same-padded, stride-1, dilated convolution with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: GridSpec) -> Result<Tensor<T>> {
    let (cin, cout) = check_conv(x, w, spec)?;
    let m = x.shape().rows();
    let kcols = spec.kernel_size() * spec.kernel_size() * cin;
    let mut out = Tensor::zeros(x.shape().with_channels(cout));
    if spec.kernel_size() == 1 {
        gemm(T::one(), MatRef::new(x.data(), m, kcols), MatRef::new(w.data(), kcols, cout), T::zero(), MatMut::new(out.data_mut(), m, cout));
    } else {
        let col = im2col(x, spec);
        gemm(T::one(), MatRef::new(&col, m, kcols), MatRef::new(w.data(), kcols, cout), T::zero(), MatMut::new(out.data_mut(), m, cout));
    }
    match bias {
        Some(b) => add_bias(&out, b),
        None => Ok(out),
    }
}

/// Returns gradients with respect to input and weights.
pub fn conv2d_backward<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>, spec: GridSpec) -> (Tensor<T>, Tensor<T>) {
    let [_, _, cin, cout] = w.shape().0;
    let m = x.shape().rows();
    let kcols = spec.kernel_size() * spec.kernel_size() * cin;
    let mut gw = Tensor::zeros(w.shape());
    if spec.kernel_size() == 1 {
        let mut gx = Tensor::zeros(x.shape());
        gemm(T::one(), MatRef::new(g.data(), m, cout), MatRef::new(w.data(), kcols, cout).t(), T::zero(), MatMut::new(gx.data_mut(), m, kcols));
        gemm(T::one(), MatRef::new(x.data(), m, kcols).t(), MatRef::new(g.data(), m, cout), T::zero(), MatMut::new(gw.data_mut(), kcols, cout));
        return (gx, gw);
    }
    let col = im2col(x, spec);
    gemm(T::one(), MatRef::new(&col, m, kcols).t(), MatRef::new(g.data(), m, cout), T::zero(), MatMut::new(gw.data_mut(), kcols, cout));
    let mut gcol = col;
    gemm(T::one(), MatRef::new(g.data(), m, cout), MatRef::new(w.data(), kcols, cout).t(), T::zero(), MatMut::new(&mut gcol, m, kcols));
    (col2im(&gcol, x.shape(), spec), gw)
}

/// 2×2 max pooling; also returns the flat source index of each maximum.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [nb, nh, nw, nc] = x.shape().0;
    if nh % 2 != 0 || nw % 2 != 0 {
        return shape_err(format!("max pooling needs even extents, got {}", x.shape()));
    }
    let os = Shape::new(nb, nh / 2, nw / 2, nc);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let s = x.shape();
    let src = x.data();
    let mut o = 0;
    for b in 0..nb {
        for i in 0..nh / 2 {
            for j in 0..nw / 2 {
                for c in 0..nc {
                    let mut best = s.index(b, 2 * i, 2 * j, c);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = s.index(b, 2 * i + di, 2 * j + dj, c);
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    out.data_mut()[o] = src[best];
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(g: &Tensor<T>, argmax: &[usize], input_shape: Shape) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    for (v, &k) in g.data().iter().zip(argmax) {
        gx.data_mut()[k] += *v;
    }
    gx
}

/// Source index pair and weight of the upper neighbour for corner-aligned ×2 upsampling.
fn upsample_axis(n: usize) -> Vec<(usize, usize, f64)> {
    let out = 2 * n;
    (0..out)
        .map(|o| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (n - 1) as f64 / (out - 1) as f64;
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Doubles height and width with corner-aligned bilinear weights: output
/// pixel `o` reads source coordinate `o·(n−1)/(2n−1)`, so the four corners
/// coincide exactly.
pub fn upsample_bilinear2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [nb, nh, nw, nc] = x.shape().0;
    let rows = upsample_axis(nh);
    let cols = upsample_axis(nw);
    let os = Shape::new(nb, 2 * nh, 2 * nw, nc);
    let s = x.shape();
    let src = x.data();
    let mut out = Tensor::zeros(os);
    let dst = out.data_mut();
    let mut o = 0;
    for b in 0..nb {
        for &(r0, r1, fr) in &rows {
            let fr = T::of(fr);
            for &(c0, c1, fc) in &cols {
                let fc = T::of(fc);
                let w00 = (T::one() - fr) * (T::one() - fc);
                let w01 = (T::one() - fr) * fc;
                let w10 = fr * (T::one() - fc);
                let w11 = fr * fc;
                let (k00, k01, k10, k11) = (s.index(b, r0, c0, 0), s.index(b, r0, c1, 0), s.index(b, r1, c0, 0), s.index(b, r1, c1, 0));
                for c in 0..nc {
                    dst[o] = w00 * src[k00 + c] + w01 * src[k01 + c] + w10 * src[k10 + c] + w11 * src[k11 + c];
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward<T: Scalar>(g: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let [nb, nh, nw, nc] = input_shape.0;
    let rows = upsample_axis(nh);
    let cols = upsample_axis(nw);
    let mut gx = Tensor::zeros(input_shape);
    let dst = gx.data_mut();
    let src = g.data();
    let mut o = 0;
    for b in 0..nb {
        for &(r0, r1, fr) in &rows {
            let fr = T::of(fr);
            for &(c0, c1, fc) in &cols {
                let fc = T::of(fc);
                let w00 = (T::one() - fr) * (T::one() - fc);
                let w01 = (T::one() - fr) * fc;
                let w10 = fr * (T::one() - fc);
                let w11 = fr * fc;
                let (k00, k01, k10, k11) = (
                    input_shape.index(b, r0, c0, 0),
                    input_shape.index(b, r0, c1, 0),
                    input_shape.index(b, r1, c0, 0),
                    input_shape.index(b, r1, c1, 0),
                );
                for c in 0..nc {
                    let v = src[o];
                    dst[k00 + c] += w00 * v;
                    dst[k01 + c] += w01 * v;
                    dst[k10 + c] += w10 * v;
                    dst[k11 + c] += w11 * v;
                    o += 1;
                }
            }
        }
    }
    gx
}

fn row_max<T: Scalar>(row: &[T]) -> T {
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (m, &v) in lanes.iter_mut().zip(c) {
            if v > *m {
                *m = v;
            }
        }
    }
    chunks.remainder().iter().chain(&lanes).copied().fold(T::neg_infinity(), T::max)
}

/// In-place max-shifted softmax over consecutive rows of length `n`.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_exact_mut(n.max(1)) {
        let max = row_max(row);
        let total = T::exp_shifted_sum(row, max);
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax over the channel axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    softmax_rows_inplace(out.data_mut(), x.shape().channels());
    out
}

/// Gradient through a row softmax given its output `y`.
pub fn softmax_rows_backward_inplace<T: Scalar>(g: &mut [T], y: &[T], n: usize) {
    for (gr, yr) in g.chunks_exact_mut(n.max(1)).zip(y.chunks_exact(n.max(1))) {
        let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
        for (gv, yv) in gr.iter_mut().zip(yr) {
            *gv = *yv * (*gv - dot);
        }
    }
}

pub fn softmax_lastdim_backward<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut gx = g.clone();
    softmax_rows_backward_inplace(gx.data_mut(), y.data(), y.shape().channels());
    gx
}

fn check_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err(format!("query/key/value shapes differ: {} {} {}", q.shape(), k.shape(), v.shape()));
    }
    if heads == 0 || q.shape().channels() % heads != 0 {
        return shape_err(format!("width {} is not divisible into {heads} heads", q.shape().channels()));
    }
    Ok(())
}

/// Multi-head scaled dot-product self-attention over the `H·W` tokens of
/// each batch item. Returns the concatenated head outputs and the
/// attention probabilities laid out as `[B][head][N][N]`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, Vec<T>)> {
    check_attention(q, k, v, heads)?;
    let s = q.shape();
    let (nb, n, d) = (s.batch(), s.height() * s.width(), s.channels());
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(s);
    let mut probs = vec![T::zero(); nb * heads * n * n];
    for b in 0..nb {
        let base = b * n * d;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            let qh = MatRef::strided(&q.data()[off..], n, dh, d, 1);
            let kh = MatRef::strided(&k.data()[off..], n, dh, d, 1);
            gemm(scale, qh, kh.t(), T::zero(), MatMut::new(p, n, n));
            softmax_rows_inplace(p, n);
            let vh = MatRef::strided(&v.data()[off..], n, dh, d, 1);
            gemm(T::one(), MatRef::new(p, n, n), vh, T::zero(), MatMut::strided(&mut out.data_mut()[off..], n, dh, d, 1));
        }
    }
    Ok((out, probs))
}

pub fn attention_backward<T: Scalar>(
    g: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = q.shape();
    let (nb, n, d) = (s.batch(), s.height() * s.width(), s.channels());
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut gq = Tensor::zeros(s);
    let mut gk = Tensor::zeros(s);
    let mut gv = Tensor::zeros(s);
    let mut dp = vec![T::zero(); n * n];
    for b in 0..nb {
        let base = b * n * d;
        for h in 0..heads {
            let off = base + h * dh;
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            let gh = MatRef::strided(&g.data()[off..], n, dh, d, 1);
            let vh = MatRef::strided(&v.data()[off..], n, dh, d, 1);
            gemm(T::one(), MatRef::new(p, n, n).t(), gh, T::zero(), MatMut::strided(&mut gv.data_mut()[off..], n, dh, d, 1));
            gemm(T::one(), gh, vh.t(), T::zero(), MatMut::new(&mut dp, n, n));
            softmax_rows_backward_inplace(&mut dp, p, n);
            let qh = MatRef::strided(&q.data()[off..], n, dh, d, 1);
            let kh = MatRef::strided(&k.data()[off..], n, dh, d, 1);
            gemm(scale, MatRef::new(&dp, n, n), kh, T::zero(), MatMut::strided(&mut gq.data_mut()[off..], n, dh, d, 1));
            gemm(scale, MatRef::new(&dp, n, n).t(), qh, T::zero(), MatMut::strided(&mut gk.data_mut()[off..], n, dh, d, 1));
        }
    }
    (gq, gk, gv)
}

/// `SoftMax(Q Kᵀ / √d_h)` for single-head `N × d_h` matrices.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, dh) = check_matrix(q, "query")?;
    let (nk, dk) = check_matrix(k, "key")?;
    if dh != dk || n != nk {
        return shape_err(format!("query {} and key {} differ", q.shape(), k.shape()));
    }
    let mut p = Tensor::zeros(Shape::matrix(n, n));
    let scale = T::one() / T::of(dh as f64).sqrt();
    gemm(scale, MatRef::new(q.data(), n, dh), MatRef::new(k.data(), n, dh).t(), T::zero(), MatMut::new(p.data_mut(), n, n));
    softmax_rows_inplace(p.data_mut(), n);
    Ok(p)
}

/// Averages consecutive channel pairs `(2m, 2m+1)` into one 2-vector per pixel.
pub fn channel_pair_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().channels();
    if c == 0 || c % 2 != 0 {
        return shape_err(format!("channel count {c} is not even"));
    }
    let pairs = c / 2;
    let inv = T::one() / T::of(pairs as f64);
    let mut out = Tensor::zeros(x.shape().with_channels(2));
    for (row, o) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(2)) {
        let (mut a, mut b) = (T::zero(), T::zero());
        for pair in row.chunks_exact(2) {
            a += pair[0];
            b += pair[1];
        }
        o[0] = a * inv;
        o[1] = b * inv;
    }
    Ok(out)
}

pub fn channel_pair_mean_backward<T: Scalar>(g: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let c = input_shape.channels();
    let inv = T::one() / T::of((c / 2) as f64);
    let mut gx = Tensor::zeros(input_shape);
    for (row, gr) in gx.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(2)) {
        for pair in row.chunks_exact_mut(2) {
            pair[0] = gr[0] * inv;
            pair[1] = gr[1] * inv;
        }
    }
    gx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

const GELU_C: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_derivative<T: Scalar>(v: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let u = k * (v + c * v * v * v);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * v * v);
    half * (T::one() + t) + half * v * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_expansion_and_identity() {
        let a = t64(Shape::matrix(2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(Shape::matrix(2, 2), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let id = t64(Shape::matrix(2, 2), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &id).unwrap(), a);
        let z = Tensor::<f64>::zeros(Shape::matrix(2, 2));
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &Tensor::zeros(Shape::matrix(3, 2))).is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let spec = GridSpec::new(3, 1).unwrap();
        let x = Tensor::<f64>::from_fn(Shape::new(2, 5, 4, 1), |b, i, j, _| (b * 100 + i * 10 + j) as f64 * 0.37);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        w.set(1, 1, 0, 0, 1.0);
        let y = conv2d(&x, &w, None, spec).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn all_ones_kernel_counts_taps() {
        let spec = GridSpec::new(3, 1).unwrap();
        let x = Tensor::<f64>::full(Shape::new(1, 5, 5, 1), 1.0);
        let w = Tensor::full(Shape::new(3, 3, 1, 1), 1.0);
        let y = conv2d(&x, &w, None, spec).unwrap();
        assert_eq!(y.at(0, 2, 2, 0), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 0), 6.0);
    }

    #[test]
    fn dilated_kernel_center_reads_full_window() {
        let spec = GridSpec::new(3, 2).unwrap();
        let x = Tensor::<f64>::full(Shape::new(1, 7, 7, 1), 1.0);
        let w = Tensor::full(Shape::new(3, 3, 1, 1), 1.0);
        let y = conv2d(&x, &w, None, spec).unwrap();
        // direct summation: taps at ±2 all land inside a 7×7 image from the center
        assert_eq!(y.at(0, 3, 3, 0), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 1, 1, 0), 4.0);
        assert_eq!(y.at(0, 2, 2, 0), 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = GridSpec::new(3, 1).unwrap();
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 4, 2));
        let w = Tensor::zeros(Shape::new(3, 3, 3, 1));
        assert!(matches!(conv2d(&x, &w, None, spec), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn pooling_and_upsampling_preserve_constants() {
        let x = Tensor::<f64>::full(Shape::new(1, 4, 6, 2), 3.5);
        let (p, _) = maxpool2(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 3.5));
        let u = upsample_bilinear2(&x);
        assert_eq!(u.shape(), Shape::new(1, 8, 12, 2));
        assert!(u.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn maxpool_two_by_two() {
        let x = t64(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]);
        let (p, arg) = maxpool2(&x).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        assert!(maxpool2(&Tensor::<f64>::zeros(Shape::new(1, 3, 2, 1))).is_err());
    }

    #[test]
    fn upsample_hits_original_grid_at_corners() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 4, 1), |_, i, j, _| (i * 7 + j * 3) as f64);
        let u = upsample_bilinear2(&x);
        // corner-aligned: output o reads source o·(n-1)/(2n-1)
        assert_eq!(u.at(0, 0, 0, 0), x.at(0, 0, 0, 0));
        assert_eq!(u.at(0, 5, 7, 0), x.at(0, 2, 3, 0));
        assert_eq!(u.at(0, 0, 7, 0), x.at(0, 0, 3, 0));
        assert_eq!(u.at(0, 5, 0, 0), x.at(0, 2, 0, 0));
        // interior sample against direct bilinear weights
        let src_r = 2.0 * 2.0 / 5.0;
        let src_c = 3.0 * 3.0 / 7.0;
        let expect = src_r * 7.0 + src_c * 3.0; // x is affine, so bilinear is exact
        assert!((u.at(0, 2, 3, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = t64(Shape::matrix(1, 2), &[0.0, 3f64.ln()]);
        let y = softmax_lastdim(&x);
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        let u = softmax_lastdim(&Tensor::<f64>::full(Shape::matrix(2, 5), 1.3));
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn attention_weights_closed_forms() {
        let q = t64(Shape::matrix(2, 1), &[1.0, 1.0]);
        let k = t64(Shape::matrix(2, 1), &[0.0, 9f64.ln()]);
        let p = attention_weights(&q, &k).unwrap();
        for r in 0..2 {
            assert!((p.data()[r * 2] - 0.1).abs() < 1e-12);
            assert!((p.data()[r * 2 + 1] - 0.9).abs() < 1e-12);
        }
        let one = attention_weights(&t64(Shape::matrix(1, 3), &[0.3, -1.0, 2.0]), &t64(Shape::matrix(1, 3), &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let zq = Tensor::<f64>::zeros(Shape::matrix(4, 2));
        let rk = Tensor::<f64>::from_fn(Shape::matrix(4, 2), |_, _, i, j| (i * 2 + j) as f64);
        let p = attention_weights(&zq, &rk).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn channel_pair_mean_pairs_consecutive_channels() {
        let x = t64(Shape::new(1, 1, 1, 4), &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(channel_pair_mean(&x).unwrap().data(), &[2.0, 4.0]);
        assert!(channel_pair_mean(&Tensor::<f64>::zeros(Shape::new(1, 1, 1, 3))).is_err());
    }
}

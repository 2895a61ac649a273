//! Minimal dense-tensor machinery for the distance regressors: named
//! parameter storage, GEMM, im2col convolution, pooling, ELU, dropout.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::hash::Hasher;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating-point element type of a network.
pub trait Real: Float + Default + Debug + Send + Sync + core::iter::Sum + core::ops::AddAssign + core::ops::MulAssign + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha · A · B + beta · C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) = op(A) · op(B) + beta · C`, where `op(A)` is `m×k`
/// and `op(B)` is `k×n`. With `trans_a`, `a` is stored as `k×m`; with
/// `trans_b`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, n: usize, k: usize, a: &[T], trans_a: bool, b: &[T], trans_b: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "matmul operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe the documented layouts.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in &mut self.entries {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    #[inline]
    pub fn data(&self, index: usize) -> &[T] {
        &self.entries[index].1.data
    }

    #[inline]
    pub fn data_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.entries[index].1.data
    }

    /// Adds `other` element-wise; both sets must share a layout.
    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    /// Hash of names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        for (name, t) in &self.entries {
            h.write(name.as_bytes());
            for &d in &t.shape {
                h.write_u64(d as u64);
            }
            for v in &t.data {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        Tensor {
                            shape: t.shape.clone(),
                            data: t.data.iter().map(|v| U::of(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Truncated normal (±2σ) initialization scaled by fan-in.
pub fn init_weights<T: Real>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<T> {
    use rand_distr::{Distribution, StandardNormal};
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    (0..len)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

/// Geometry of one same-padded, stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Unfolds a `(C, H, W)` input into `(C·k·k, H·W)` columns.
    pub fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.padding);
        let hw = h * w;
        for c in 0..self.in_channels {
            let plane = &input[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    // Valid output x range for this kernel column.
                    let x_lo = p.saturating_sub(kx);
                    let x_hi = (w + p).saturating_sub(kx).min(w);
                    for y in 0..h {
                        let out_row = &mut dst[y * w..(y + 1) * w];
                        let sy = y + ky;
                        if sy < p || sy - p >= h || x_lo >= x_hi {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[(sy - p) * w..(sy - p + 1) * w];
                        out_row[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                        let sx0 = x_lo + kx - p;
                        out_row[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into a
    /// `(C, H, W)` gradient.
    pub fn col2im<T: Real>(&self, cols: &[T], out: &mut [T]) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.padding);
        let hw = h * w;
        out.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.in_channels {
            let plane = &mut out[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let x_lo = p.saturating_sub(kx);
                    let x_hi = (w + p).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let dst = &mut plane[(sy - p) * w..(sy - p + 1) * w];
                        let sx0 = x_lo + kx - p;
                        for (d, s) in dst[sx0..sx0 + (x_hi - x_lo)].iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// ELU derivative expressed through its output.
#[inline]
pub fn elu_grad_from_output<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

/// 2×2 stride-2 max pooling with floor on odd sizes. Returns the pooled
/// planes and the flat input index of each maximum.
pub fn max_pool2<T: Real>(input: &[T], channels: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if input[k] > input[best] {
                        best = k;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn check_finite<T: Real>(values: &[T], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(String::from(layer)))
    }
}

/// Deterministic sub-seed derivation (SplitMix64 finalizer over a mix of
/// the inputs).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (h, w, k, p) = (g.height as isize, g.width as isize, g.kernel as isize, g.padding as isize);
        let mut out = vec![0.0; g.out_channels * g.pixels()];
        for o in 0..g.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - p, x + kx - p);
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let wi = ((o * g.in_channels + c) * g.kernel + ky as usize) * g.kernel + kx as usize;
                                acc += weight[wi] * input[(c * g.height + sy as usize) * g.width + sx as usize];
                            }
                        }
                    }
                    out[(o * g.height + y as usize) * g.width + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom {
            in_channels: 3,
            out_channels: 4,
            height: 7,
            width: 9,
            kernel: 5,
            padding: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<f64> = (0..3 * 63).map(|_| rng.random::<f64>() - 0.5).collect();
        let weight: Vec<f64> = (0..4 * g.patch_len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut cols = vec![0.0; g.patch_len() * g.pixels()];
        g.im2col(&input, &mut cols);
        let mut out = vec![0.0; 4 * g.pixels()];
        matmul(4, g.pixels(), g.patch_len(), &weight, false, &cols, false, 0.0, &mut out);
        let expected = naive_conv(&g, &input, &weight);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 1,
            height: 5,
            width: 6,
            kernel: 3,
            padding: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..g.patch_len() * 30).map(|_| rng.random()).collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; 60];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matmul_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn pooling_floors_odd_sizes() {
        let input: Vec<f64> = (0..15).map(f64::from).collect();
        let (out, idx) = max_pool2(&input, 1, 3, 5);
        assert_eq!(out, [6.0, 8.0]);
        assert_eq!(idx, [6, 8]);
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(2.0f64), 2.0);
        assert!((elu(-1.0f64) - (libm::exp(-1.0) - 1.0)).abs() < 1e-15);
        assert_eq!(elu_grad_from_output(elu(-1.0f64)), libm::exp(-1.0));
    }
}

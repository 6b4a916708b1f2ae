//! Raw compute kernels, generic over the two supported precisions.
//!
//! Every reduction accumulates in ascending index order over the contiguous
//! axis so that results are bit-stable run to run.

use super::{Buffer, DType, TensorError};

/// Scalar element of a tensor buffer. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn exp_m1(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, o: Self) -> Self;
    /// Exponential for throughput-bound inner loops: a ~1-ulp polynomial in
    /// 32-bit mode, the exact library call in 64-bit (verification) mode.
    fn exp_fast(self) -> Self;
    /// Elementwise `dst[i] = exp_fast(src[i])`; the 32-bit version runs the
    /// 8-wide SIMD form of the same polynomial (bit-identical lanes).
    fn exp_fill(src: &[Self], dst: &mut [Self]);
    fn slice(buf: &Buffer) -> &[Self];
    fn slice_mut(buf: &mut Buffer) -> &mut [Self];
    fn buffer(v: Vec<Self>) -> Buffer;
}

/// Range-reduced degree-6 polynomial exponential. Deterministic, branchless
/// (vectorizable), accurate to about one ulp; the argument is clamped to
/// [-87, 88], so extreme inputs saturate near zero / 1.65e38 instead of
/// under/overflowing.
#[inline]
pub fn exp_poly_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let k = (x * LOG2E).round_ties_even();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits((((k as i32) + 127) << 23) as u32);
    scale * p
}

macro_rules! impl_element {
    ($t:ty, $dt:expr, $var:ident, $exp_fast:expr, $exp_fill:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dt;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn exp_m1(self) -> Self {
                self.exp_m1()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maxv(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline]
            fn exp_fast(self) -> Self {
                $exp_fast(self)
            }
            #[inline]
            fn exp_fill(src: &[Self], dst: &mut [Self]) {
                $exp_fill(src, dst)
            }
            fn slice(buf: &Buffer) -> &[Self] {
                match buf {
                    Buffer::$var(v) => v,
                    _ => unreachable!("graph dtype invariant violated"),
                }
            }
            fn slice_mut(buf: &mut Buffer) -> &mut [Self] {
                match buf {
                    Buffer::$var(v) => v,
                    _ => unreachable!("graph dtype invariant violated"),
                }
            }
            fn buffer(v: Vec<Self>) -> Buffer {
                Buffer::$var(v)
            }
        }
    };
}

impl_element!(f32, DType::F32, F32, exp_poly_f32, exp_fill_f32);
impl_element!(f64, DType::F64, F64, f64::exp, exp_fill_f64);

fn exp_fill_f64(src: &[f64], dst: &mut [f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s.exp();
    }
}

/// 8-wide form of [`exp_poly_f32`]; lane arithmetic is mul+add in the same
/// order as the scalar polynomial, so vector and scalar results agree
/// bitwise.
fn exp_fill_f32(src: &[f32], dst: &mut [f32]) {
    assert_eq!(src.len(), dst.len());
    #[cfg(all(target_arch = "x86_64", target_feature = "avx2"))]
    {
        // SAFETY: avx2 is a compile-time target feature here.
        unsafe {
            use std::arch::x86_64::*;
            let log2e = _mm256_set1_ps(std::f32::consts::LOG2_E);
            let ln2_hi = _mm256_set1_ps(0.693_359_4);
            let ln2_lo = _mm256_set1_ps(-2.121_944_4e-4);
            let lo = _mm256_set1_ps(-87.0);
            let hi = _mm256_set1_ps(88.0);
            let one = _mm256_set1_ps(1.0);
            let c2 = _mm256_set1_ps(0.5);
            let c3 = _mm256_set1_ps(1.0 / 6.0);
            let c4 = _mm256_set1_ps(1.0 / 24.0);
            let c5 = _mm256_set1_ps(1.0 / 120.0);
            let c6 = _mm256_set1_ps(1.0 / 720.0);
            let bias = _mm256_set1_epi32(127);
            let mut i = 0;
            while i + 8 <= src.len() {
                let x = _mm256_loadu_ps(src.as_ptr().add(i));
                let x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
                let k = _mm256_round_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
                    _mm256_mul_ps(x, log2e),
                );
                let r = _mm256_sub_ps(
                    _mm256_sub_ps(x, _mm256_mul_ps(k, ln2_hi)),
                    _mm256_mul_ps(k, ln2_lo),
                );
                // Horner with separate mul/add, matching the scalar path
                let mut p = _mm256_add_ps(c5, _mm256_mul_ps(r, c6));
                p = _mm256_add_ps(c4, _mm256_mul_ps(r, p));
                p = _mm256_add_ps(c3, _mm256_mul_ps(r, p));
                p = _mm256_add_ps(c2, _mm256_mul_ps(r, p));
                p = _mm256_add_ps(one, _mm256_mul_ps(r, p));
                p = _mm256_add_ps(one, _mm256_mul_ps(r, p));
                let ki = _mm256_cvtps_epi32(k);
                let scale = _mm256_castsi256_ps(_mm256_slli_epi32::<23>(_mm256_add_epi32(ki, bias)));
                _mm256_storeu_ps(dst.as_mut_ptr().add(i), _mm256_mul_ps(scale, p));
                i += 8;
            }
            for q in i..src.len() {
                dst[q] = exp_poly_f32(src[q]);
            }
        }
        return;
    }
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx2")))]
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = exp_poly_f32(s);
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels. All three accumulate into `out`; the caller zero-fills.
// Per output element the reduction index ascends, fixing the summation order.
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] @ b[k,n]
pub fn mm_nn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T
pub fn mm_nt<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn mm_tn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction kernels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
}

/// Branchless sigmoid over a slice: `e = exp(-|x|)` (vectorized), then
/// `select(x >= 0, 1, e) / (1 + e)`, which is stable on both tails.
fn sigmoid_fill<T: Element>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = -v.abs();
    }
    let mut e = vec![T::ZERO; x.len()];
    T::exp_fill(out, &mut e);
    for i in 0..x.len() {
        let num = if x[i] >= T::ZERO { T::ONE } else { e[i] };
        out[i] = num / (T::ONE + e[i]);
    }
}

pub fn unary_forward<T: Element>(
    kind: UnaryKind,
    x: &[T],
) -> Result<Vec<T>, TensorError> {
    let mut out = vec![T::ZERO; x.len()];
    match kind {
        UnaryKind::Neg => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        }
        UnaryKind::Exp => {
            for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
                let r = v.exp();
                if !r.is_finite() {
                    return Err(TensorError::NumericDomain {
                        op: "exp",
                        index: i,
                        value: v.to_f64(),
                    });
                }
                *o = r;
            }
        }
        UnaryKind::Log => {
            for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
                if v <= T::ZERO {
                    return Err(TensorError::NumericDomain {
                        op: "log",
                        index: i,
                        value: v.to_f64(),
                    });
                }
                *o = v.ln();
            }
        }
        UnaryKind::Sigmoid => sigmoid_fill(x, &mut out),
        UnaryKind::Silu => {
            sigmoid_fill(x, &mut out);
            for (o, &v) in out.iter_mut().zip(x) {
                *o = *o * v;
            }
        }
        UnaryKind::Softplus => {
            // max(x, 0) + ln(1 + exp(-|x|))
            for (o, &v) in out.iter_mut().zip(x) {
                *o = -v.abs();
            }
            let mut e = vec![T::ZERO; x.len()];
            T::exp_fill(&out, &mut e);
            for i in 0..x.len() {
                out[i] = x[i].maxv(T::ZERO) + (T::ONE + e[i]).ln();
            }
        }
    }
    Ok(out)
}

/// d(out)/d(x) evaluated elementwise; `y` is the forward output.
pub fn unary_backward<T: Element>(kind: UnaryKind, x: &[T], y: &[T], gy: &[T], gx: &mut [T]) {
    match kind {
        UnaryKind::Neg => {
            for i in 0..x.len() {
                gx[i] += -gy[i];
            }
        }
        UnaryKind::Exp => {
            for i in 0..x.len() {
                gx[i] += gy[i] * y[i];
            }
        }
        UnaryKind::Log => {
            for i in 0..x.len() {
                gx[i] += gy[i] / x[i];
            }
        }
        UnaryKind::Sigmoid => {
            for i in 0..x.len() {
                gx[i] += gy[i] * y[i] * (T::ONE - y[i]);
            }
        }
        UnaryKind::Silu => {
            let mut s = vec![T::ZERO; x.len()];
            sigmoid_fill(x, &mut s);
            for i in 0..x.len() {
                gx[i] += gy[i] * (s[i] + x[i] * s[i] * (T::ONE - s[i]));
            }
        }
        UnaryKind::Softplus => {
            let mut s = vec![T::ZERO; x.len()];
            sigmoid_fill(x, &mut s);
            for i in 0..x.len() {
                gx[i] += gy[i] * s[i];
            }
        }
    }
}

pub fn sum_all<T: Element>(x: &[T]) -> T {
    let mut acc = T::ZERO;
    for &v in x {
        acc += v;
    }
    acc
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis, with affine parameters.
// ---------------------------------------------------------------------------

pub struct LayerNormSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, LayerNormSaved<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::ZERO; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let epst = T::from_f64(eps);
    let inv_d = T::ONE / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mu = T::ZERO;
        for &v in row {
            mu += v;
        }
        mu = mu * inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var = var * inv_d;
        let rs = T::ONE / (var + epst).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, LayerNormSaved { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    saved: &LayerNormSaved<T>,
    gy: &[T],
    d: usize,
    gx: &mut [T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let rows = x.len() / d;
    let inv_d = T::ONE / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &gy[r * d..(r + 1) * d];
        let mu = saved.mean[r];
        let rs = saved.rstd[r];
        let mut s1 = T::ZERO; // sum gy*gamma*xhat
        let mut s2 = T::ZERO; // sum gy*gamma
        for j in 0..d {
            let xh = (row[j] - mu) * rs;
            s1 += grow[j] * gamma[j] * xh;
            s2 += grow[j] * gamma[j];
        }
        let gxrow = &mut gx[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mu) * rs;
            gxrow[j] += rs * (grow[j] * gamma[j] - s2 * inv_d - xh * s1 * inv_d);
            ggamma[j] += grow[j] * xh;
            gbeta[j] += grow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, max-subtracted.
// ---------------------------------------------------------------------------

pub fn softmax_last_forward<T: Element>(x: &[T], n: usize) -> Vec<T> {
    let rows = x.len() / n;
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut mx = row[0];
        for &v in row {
            mx = mx.maxv(v);
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut sum = T::ZERO;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for v in orow.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub fn softmax_last_backward<T: Element>(y: &[T], gy: &[T], n: usize, gx: &mut [T]) {
    let rows = y.len() / n;
    for r in 0..rows {
        let yrow = &y[r * n..(r + 1) * n];
        let grow = &gy[r * n..(r + 1) * n];
        let mut dot = T::ZERO;
        for j in 0..n {
            dot += yrow[j] * grow[j];
        }
        let gxrow = &mut gx[r * n..(r + 1) * n];
        for j in 0..n {
            gxrow[j] += yrow[j] * (grow[j] - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise causal 1-d convolution over the token axis.
// Layout: x[(t, c)] row-major with channels fastest; weight[(c, k)]; the last
// tap (k-1) multiplies the current token, earlier taps look back in time.
// ---------------------------------------------------------------------------

pub fn dw_conv1d_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: &[T],
    j: usize,
    c: usize,
    k: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for t in 0..j {
        let orow = &mut out[t * c..(t + 1) * c];
        for ch in 0..c {
            let mut acc = b[ch];
            let wrow = &w[ch * k..(ch + 1) * k];
            for tap in 0..k {
                let src = t as isize - (k as isize - 1) + tap as isize;
                if src >= 0 {
                    acc += wrow[tap] * x[src as usize * c + ch];
                }
            }
            orow[ch] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dw_conv1d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    j: usize,
    c: usize,
    k: usize,
    gx: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) {
    for t in 0..j {
        let grow = &gy[t * c..(t + 1) * c];
        for ch in 0..c {
            let g = grow[ch];
            gb[ch] += g;
            let wrow = &w[ch * k..(ch + 1) * k];
            for tap in 0..k {
                let src = t as isize - (k as isize - 1) + tap as isize;
                if src >= 0 {
                    let idx = src as usize * c + ch;
                    gx[idx] += wrow[tap] * g;
                    gw[ch * k + tap] += x[idx] * g;
                }
            }
        }
    }
}

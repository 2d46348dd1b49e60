//! Slice-level kernels shared by the forward and backward passes.
//!
//! Parallel kernels split work into fixed-size blocks that do not depend on
//! the worker count, so results are bit-identical for any thread pool size.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Rows per parallel matmul block.
const GEMM_BLOCK_ROWS: usize = 512;
/// Elements per parallel elementwise block.
const MAP_BLOCK: usize = 1 << 15;

#[derive(Clone, Copy)]
struct SendPtr<T>(*const T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(self) -> *const T {
        self.0
    }
}

/// `c[m,n] (+)= op(a) @ op(b)`.
///
/// `op(a)` is `m x k`, stored row-major as `[m,k]`, or as `[k,m]` when `ta`.
/// `op(b)` is `k x n`, stored as `[k,n]`, or as `[n,k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n, "matmul: output length");
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
    let beta = if accumulate { T::one() } else { T::zero() };
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    let run = |rows: &mut [T], row0: usize| {
        let mr = rows.len() / n;
        let a_off = if ta { row0 } else { row0 * k };
        // SAFETY: the block addresses rows row0..row0+mr of op(a), which lie
        // inside `a` by the length assertions above; `rows` is disjoint from
        // `a` and `b` because it is a mutable borrow.
        unsafe {
            T::gemm_raw(
                mr,
                k,
                n,
                T::one(),
                a_ptr.get().add(a_off),
                rsa,
                csa,
                b_ptr.get(),
                rsb,
                csb,
                beta,
                rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m > GEMM_BLOCK_ROWS && m * k * n > 1 << 20 {
        c.par_chunks_mut(GEMM_BLOCK_ROWS * n)
            .enumerate()
            .for_each(|(i, rows)| run(rows, i * GEMM_BLOCK_ROWS));
    } else {
        run(c, 0);
    }
}

#[inline(always)]
fn map_block<T: Scalar>(o: &mut [T], x: &[T], f: &impl Fn(T) -> T) {
    o.iter_mut().zip(x).for_each(|(o, &v)| *o = f(v));
}

#[inline(always)]
fn zip_block<T: Scalar>(o: &mut [T], x: &[T], g: &[T], f: &impl Fn(T, T) -> T) {
    for ((o, &a), &b) in o.iter_mut().zip(x).zip(g) {
        *o = f(a, b);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn map_block_avx2<T: Scalar>(o: &mut [T], x: &[T], f: &impl Fn(T) -> T) {
    map_block(o, x, f)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn zip_block_avx2<T: Scalar>(o: &mut [T], x: &[T], g: &[T], f: &impl Fn(T, T) -> T) {
    zip_block(o, x, g, f)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Elementwise block, compiled for AVX2 when the CPU has it. Results are
/// unchanged: only the vector width differs.
fn map_wide<T: Scalar>(o: &mut [T], x: &[T], f: &impl Fn(T) -> T) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { map_block_avx2(o, x, f) };
    }
    map_block(o, x, f)
}

fn zip_wide<T: Scalar>(o: &mut [T], x: &[T], g: &[T], f: &impl Fn(T, T) -> T) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { zip_block_avx2(o, x, g, f) };
    }
    zip_block(o, x, g, f)
}

/// Applies `f` elementwise, in parallel blocks for large inputs.
pub fn map_into<T: Scalar>(out: &mut [T], x: &[T], f: impl Fn(T) -> T + Sync) {
    debug_assert_eq!(out.len(), x.len());
    if x.len() > MAP_BLOCK {
        out.par_chunks_mut(MAP_BLOCK)
            .zip(x.par_chunks(MAP_BLOCK))
            .for_each(|(o, i)| map_wide(o, i, &f));
    } else {
        map_wide(out, x, &f);
    }
}

/// `out[i] = f(x[i], g[i])`, in parallel blocks for large inputs.
pub fn zip_map_into<T: Scalar>(out: &mut [T], x: &[T], g: &[T], f: impl Fn(T, T) -> T + Sync) {
    debug_assert_eq!(out.len(), x.len());
    debug_assert_eq!(g.len(), x.len());
    if x.len() > MAP_BLOCK {
        out.par_chunks_mut(MAP_BLOCK)
            .zip(x.par_chunks(MAP_BLOCK))
            .zip(g.par_chunks(MAP_BLOCK))
            .for_each(|((o, xs), gs)| zip_wide(o, xs, gs, &f));
    } else {
        zip_wide(out, x, g, &f);
    }
}

#[inline(always)]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf())
}

#[inline(always)]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let inv_sqrt_2pi = T::FRAC_2_SQRT_PI() * T::FRAC_1_SQRT_2() * half;
    let pdf = (-(x * x) * half).kernel_exp() * inv_sqrt_2pi;
    cdf + x * pdf
}

/// Pointwise non-linearities with dedicated kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Gelu,
    Sin,
}

/// `out = f(x)`.
pub fn pointwise<T: Scalar>(kind: Pointwise, out: &mut [T], x: &[T]) {
    if let (Some(o), Some(x)) = (as_f32_mut(out), as_f32(x)) {
        return f32_path::forward(kind, o, x);
    }
    match kind {
        Pointwise::Gelu => map_into(out, x, gelu),
        Pointwise::Sin => map_into(out, x, |v| v.kernel_sin()),
    }
}

/// `out = f'(x) * g`.
pub fn pointwise_grad<T: Scalar>(kind: Pointwise, out: &mut [T], x: &[T], g: &[T]) {
    if let (Some(o), Some(x), Some(g)) = (as_f32_mut(out), as_f32(x), as_f32(g)) {
        return f32_path::backward(kind, o, x, g);
    }
    match kind {
        Pointwise::Gelu => zip_map_into(out, x, g, |x, g| gelu_grad(x) * g),
        Pointwise::Sin => zip_map_into(out, x, g, |x, g| x.kernel_cos() * g),
    }
}

fn as_f32<T: Scalar>(x: &[T]) -> Option<&[f32]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts(x.as_ptr().cast::<f32>(), x.len()) })
}

fn as_f32_mut<T: Scalar>(x: &mut [T]) -> Option<&mut [f32]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr().cast::<f32>(), x.len()) })
}

/// Monomorphic f32 loops, evaluated in f64 and compiled twice: baseline
/// and AVX2. Both produce identical bits.
mod f32_path {
    use super::{has_avx2, Pointwise, MAP_BLOCK};
    use crate::numerics::fastmath;
    use rayon::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI};

    #[inline(always)]
    fn gelu(v: f32) -> f32 {
        let v = f64::from(v);
        (0.5 * v * (1.0 + fastmath::erf(v * FRAC_1_SQRT_2))) as f32
    }

    #[inline(always)]
    fn gelu_grad(v: f32, g: f32) -> f32 {
        let v = f64::from(v);
        let cdf = 0.5 * (1.0 + fastmath::erf(v * FRAC_1_SQRT_2));
        let pdf = fastmath::exp(-0.5 * v * v) * (0.5 * FRAC_2_SQRT_PI * FRAC_1_SQRT_2);
        ((cdf + v * pdf) * f64::from(g)) as f32
    }

    #[inline(always)]
    fn sin(v: f32) -> f32 {
        fastmath::sin(f64::from(v)) as f32
    }

    #[inline(always)]
    fn cos_grad(v: f32, g: f32) -> f32 {
        (fastmath::cos(f64::from(v)) * f64::from(g)) as f32
    }

    macro_rules! loops {
        ($plain:ident, $wide:ident, $f:ident) => {
            fn $plain(o: &mut [f32], x: &[f32]) {
                o.iter_mut().zip(x).for_each(|(o, &v)| *o = $f(v));
            }
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn $wide(o: &mut [f32], x: &[f32]) {
                o.iter_mut().zip(x).for_each(|(o, &v)| *o = $f(v));
            }
        };
        ($plain:ident, $wide:ident, $f:ident, grad) => {
            fn $plain(o: &mut [f32], x: &[f32], g: &[f32]) {
                for ((o, &v), &g) in o.iter_mut().zip(x).zip(g) {
                    *o = $f(v, g);
                }
            }
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn $wide(o: &mut [f32], x: &[f32], g: &[f32]) {
                for ((o, &v), &g) in o.iter_mut().zip(x).zip(g) {
                    *o = $f(v, g);
                }
            }
        };
    }

    loops!(gelu_plain, gelu_wide, gelu);
    loops!(sin_plain, sin_wide, sin);
    loops!(gelu_grad_plain, gelu_grad_wide, gelu_grad, grad);
    loops!(cos_grad_plain, cos_grad_wide, cos_grad, grad);

    fn block(kind: Pointwise, o: &mut [f32], x: &[f32]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the feature was detected at runtime.
            unsafe {
                match kind {
                    Pointwise::Gelu => gelu_wide(o, x),
                    Pointwise::Sin => sin_wide(o, x),
                }
            }
            return;
        }
        match kind {
            Pointwise::Gelu => gelu_plain(o, x),
            Pointwise::Sin => sin_plain(o, x),
        }
    }

    fn grad_block(kind: Pointwise, o: &mut [f32], x: &[f32], g: &[f32]) {
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the feature was detected at runtime.
            unsafe {
                match kind {
                    Pointwise::Gelu => gelu_grad_wide(o, x, g),
                    Pointwise::Sin => cos_grad_wide(o, x, g),
                }
            }
            return;
        }
        match kind {
            Pointwise::Gelu => gelu_grad_plain(o, x, g),
            Pointwise::Sin => cos_grad_plain(o, x, g),
        }
    }

    pub(super) fn forward(kind: Pointwise, o: &mut [f32], x: &[f32]) {
        o.par_chunks_mut(MAP_BLOCK)
            .zip(x.par_chunks(MAP_BLOCK))
            .for_each(|(o, x)| block(kind, o, x));
    }

    pub(super) fn backward(kind: Pointwise, o: &mut [f32], x: &[f32], g: &[f32]) {
        o.par_chunks_mut(MAP_BLOCK)
            .zip(x.par_chunks(MAP_BLOCK))
            .zip(g.par_chunks(MAP_BLOCK))
            .for_each(|((o, x), g)| grad_block(kind, o, x, g));
    }
}

/// Adds each row of `x` (`rows x cols`) into `acc` (`cols`).
pub fn column_sums<T: Scalar>(acc: &mut [T], x: &[T], cols: usize) {
    for row in x.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Row-wise softmax; masked entries (`false`) get probability zero.
/// Row `r` uses mask row `r % mask_rows`.
pub fn softmax_rows<T: Scalar>(out: &mut [T], x: &[T], cols: usize, mask: Option<(&[bool], usize)>) {
    for (r, (o, xs)) in out.chunks_exact_mut(cols).zip(x.chunks_exact(cols)).enumerate() {
        let m = mask.map(|(m, rows)| &m[(r % rows) * cols..(r % rows + 1) * cols]);
        let allowed = |j: usize| m.is_none_or(|m| m[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in xs.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, (o, &v)) in o.iter_mut().zip(xs).enumerate() {
            *o = if allowed(j) { (v - max).kernel_exp() } else { T::zero() };
            sum += *o;
        }
        let inv = T::one() / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Square-window geometry of a 2D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn image_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// Source offset within one image for output pixel `(oy, ox)` and
    /// kernel tap `(ky, kx)`, or `None` when the tap lands in the padding.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy * self.in_w + ix) * self.in_c)
    }

    /// Unfolds one image into `[out_h*out_w, kernel*kernel*in_c]`.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (oh, ow, k, c) = (self.out_h(), self.out_w(), self.kernel, self.in_c);
        let plen = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        match self.tap(oy, ox, ky, kx) {
                            Some(src) => dst.copy_from_slice(&image[src..src + c]),
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns into an image.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (oh, ow, k, c) = (self.out_h(), self.out_w(), self.kernel, self.in_c);
        let plen = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(dst) = self.tap(oy, ox, ky, kx) {
                            let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                            for (d, &s) in image[dst..dst + c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Images per im2col chunk, bounding the scratch buffer size.
    fn chunk_images(&self) -> usize {
        let per = (self.out_h() * self.out_w() * self.patch_len()).max(1);
        ((1 << 20) / per).clamp(1, self.batch.max(1))
    }

    /// Forward convolution: `out = conv(x, w) + b`, weights `[k,k,in_c,out_c]`.
    pub fn forward<T: Scalar>(&self, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
        let rows_per = self.out_h() * self.out_w();
        let plen = self.patch_len();
        let chunk = self.chunk_images();
        out.par_chunks_mut(chunk * rows_per * self.out_c)
            .zip(x.par_chunks(chunk * self.image_len()))
            .for_each(|(o, xs)| {
                let imgs = xs.len() / self.image_len();
                let mut cols = vec![T::zero(); imgs * rows_per * plen];
                for i in 0..imgs {
                    self.im2col(
                        &xs[i * self.image_len()..(i + 1) * self.image_len()],
                        &mut cols[i * rows_per * plen..(i + 1) * rows_per * plen],
                    );
                }
                matmul(o, &cols, w, imgs * rows_per, plen, self.out_c, false, false, false);
                for row in o.chunks_exact_mut(self.out_c) {
                    row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
                }
            });
    }

    /// Gradient w.r.t. the input, accumulated into `dx`.
    pub fn backward_input<T: Scalar>(&self, g: &[T], w: &[T], dx: &mut [T]) {
        let rows_per = self.out_h() * self.out_w();
        let plen = self.patch_len();
        let chunk = self.chunk_images();
        dx.par_chunks_mut(chunk * self.image_len())
            .zip(g.par_chunks(chunk * rows_per * self.out_c))
            .for_each(|(dxs, gs)| {
                let imgs = dxs.len() / self.image_len();
                let mut cols = vec![T::zero(); imgs * rows_per * plen];
                matmul(&mut cols, gs, w, imgs * rows_per, self.out_c, plen, false, true, false);
                for i in 0..imgs {
                    self.col2im(
                        &cols[i * rows_per * plen..(i + 1) * rows_per * plen],
                        &mut dxs[i * self.image_len()..(i + 1) * self.image_len()],
                    );
                }
            });
    }

    /// Gradient w.r.t. the weights, accumulated into `dw`.
    pub fn backward_weight<T: Scalar>(&self, x: &[T], g: &[T], dw: &mut [T]) {
        let rows_per = self.out_h() * self.out_w();
        let plen = self.patch_len();
        let chunk = self.chunk_images();
        let mut cols = vec![T::zero(); chunk * rows_per * plen];
        for (xs, gs) in x
            .chunks(chunk * self.image_len())
            .zip(g.chunks(chunk * rows_per * self.out_c))
        {
            let imgs = xs.len() / self.image_len();
            let cols = &mut cols[..imgs * rows_per * plen];
            for i in 0..imgs {
                self.im2col(
                    &xs[i * self.image_len()..(i + 1) * self.image_len()],
                    &mut cols[i * rows_per * plen..(i + 1) * rows_per * plen],
                );
            }
            matmul(dw, cols, gs, plen, imgs * rows_per, self.out_c, true, false, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_all_transpose_flags() {
        let (m, k, n) = (5, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        for ta in [false, true] {
            for tb in [false, true] {
                let aa = if ta { transpose(&a, m, k) } else { a.clone() };
                let bb = if tb { transpose(&b, k, n) } else { b.clone() };
                let mut c = vec![0.0; m * n];
                matmul(&mut c, &aa, &bb, m, k, n, ta, tb, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
                }
            }
        }
    }

    #[test]
    fn blocked_matmul_matches_single_block() {
        let (m, k, n) = (1500, 40, 30);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) * 0.25).collect();
        let mut c = vec![0.0; m * n];
        matmul(&mut c, &a, &b, m, k, n, false, false, false);
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // x * Phi(x) at x = 1
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = [1.0f64, 2.0, 3.0];
        let mask = [true, false, true];
        let mut out = [0.0; 3];
        softmax_rows(&mut out, &x, 3, Some((&mask, 1)));
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            batch: 1,
            in_h: 5,
            in_w: 4,
            in_c: 2,
            out_c: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let rows = g.out_h() * g.out_w() * g.patch_len();
        let y: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; rows];
        g.im2col(&x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

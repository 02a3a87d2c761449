//! Dense kernels behind the tape operators.
//!
//! Every batched kernel splits work per sample. Per-sample partial results for
//! shared parameters (conv weight and bias gradients) are reduced in sample
//! order on the calling thread, so sequential and parallel execution produce
//! bit-identical output.

use super::tensor::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batched kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    /// Parallel when the feature is on and the pool has more than one thread.
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            if rayon::current_num_threads() > 1 {
                Exec::Parallel
            } else {
                Exec::Sequential
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Runs `f(scratch, index, chunk)` over consecutive `chunk`-sized pieces of
/// `data`, with one reusable scratch value per worker.
pub fn for_each_chunk_with<T, S, I, F>(exec: Exec, data: &mut [T], chunk: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [T]) + Sync + Send,
{
    match exec {
        Exec::Sequential => {
            let mut s = init();
            data.chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(&mut s, i, c))
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each_init(init, |s, (i, c)| f(s, i, c)),
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indices<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Like [`map_indices`], but each worker gets a scratch value from `init`
/// that is reused across the indices it processes.
pub fn map_indices_with<S, R, I, F>(exec: Exec, n: usize, init: I, f: F) -> Vec<R>
where
    R: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => {
            let mut s = init();
            (0..n).map(|i| f(&mut s, i)).collect()
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n)
            .into_par_iter()
            .map_init(init, |s, i| f(s, i))
            .collect(),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a` of shape `m×k` and `b` of shape `m×n`.
pub fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes;
/// the summation order is fixed, so results are deterministic.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + a[l] * b[l];
        }
    }
    let mut acc = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        acc = acc + a * b;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    acc + (pairs[0] + pairs[2]) + (pairs[1] + pairs[3])
}

/// `c[m×k] += a · bᵀ` with `a` of shape `m×n` and `b` of shape `k×n`.
pub fn gemm_nt_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] = c[i * k + p] + dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Geometry of a 3×3, zero-padding-1 convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * 9
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kx`: those whose input
/// column `ox·stride + kx − 1` lands inside `0..w`.
fn valid_span(kx: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    // one past the largest ox with ox·stride + kx − 1 ≤ w − 1
    let hi = if w >= kx {
        ((w - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                let (lo, hi) = valid_span(kx, g.stride, g.w, ow);
                for oy in 0..oh {
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - 1;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, s) in out[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                let (lo, hi) = valid_span(kx, g.stride, g.w, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    let first = lo * g.stride + kx - 1;
                    let dst = &mut dxc[iy as usize * g.w + first..(iy as usize + 1) * g.w];
                    for (d, &v) in dst.iter_mut().step_by(g.stride).zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Batched 3×3 convolution. `x` is `n×c_in×h×w`, `weight` is `c_out×c_in×3×3`.
pub fn conv2d_forward<T: Real>(
    exec: Exec,
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); n * out_len];
    let scratch = || vec![T::zero(); g.patch() * plane];
    for_each_chunk_with(exec, &mut out, out_len, scratch, |cols, s, o| {
        im2col(g, &x[s * in_len..(s + 1) * in_len], cols);
        for (co, row) in o.chunks_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        gemm_acc(g.c_out, g.patch(), plane, weight, cols, o);
    });
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    exec: Exec,
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let w_len = g.c_out * g.patch();

    let scratch = || {
        (
            vec![T::zero(); g.patch() * plane],
            vec![T::zero(); g.patch() * plane],
        )
    };
    let per_sample = map_indices_with(exec, n, scratch, |(cols, dcols), s| {
        let go = &grad_out[s * out_len..(s + 1) * out_len];
        im2col(g, &x[s * in_len..(s + 1) * in_len], cols);
        let mut dw = vec![T::zero(); w_len];
        gemm_nt_acc(g.c_out, g.patch(), plane, go, cols, &mut dw);
        let db: Vec<T> = go.chunks(plane).map(|r| r.iter().copied().sum()).collect();
        dcols.fill(T::zero());
        gemm_tn_acc(g.c_out, g.patch(), plane, weight, go, dcols);
        let mut dx = vec![T::zero(); in_len];
        col2im(g, dcols, &mut dx);
        (dx, dw, db)
    });

    let mut dx = Vec::with_capacity(n * in_len);
    let mut dw = vec![T::zero(); w_len];
    let mut db = vec![T::zero(); g.c_out];
    for (sdx, sdw, sdb) in per_sample {
        dx.extend_from_slice(&sdx);
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a = *a + b);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * g.stride + ky) as isize - 1;
                                let ix = (ox * g.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((co * g.c_in + ci) * 3 + ky) * 3 + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_variants_agree_with_definition() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], e);
            }
        }
        // aᵀ·c recovers a 3x4 product
        let mut t = vec![0.0; 12];
        gemm_tn_acc(2, 3, 4, &a, &c, &mut t);
        for p in 0..3 {
            for j in 0..4 {
                let e: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert_eq!(t[p * 4 + j], e);
            }
        }
        let mut u = vec![0.0; 6];
        gemm_nt_acc(2, 3, 4, &c, &b, &mut u);
        for i in 0..2 {
            for p in 0..3 {
                let e: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((u[i * 3 + p] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        for stride in [1, 2] {
            let g = ConvGeom {
                c_in: 2,
                c_out: 3,
                h: 5,
                w: 6,
                stride,
            };
            let x: Vec<f64> = (0..2 * 30).map(|v| ((v * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 18)
                .map(|v| ((v * 13 % 7) as f64) * 0.1 - 0.3)
                .collect();
            let b = vec![0.1, -0.2, 0.3];
            let out = conv2d_forward(Exec::Sequential, &g, 1, &x, &w, &b);
            let naive = naive_conv(&g, &x, &w, &b);
            assert_eq!(out.len(), naive.len());
            for (a, e) in out.iter().zip(&naive) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_conv_is_bit_identical() {
        let g = ConvGeom {
            c_in: 3,
            c_out: 4,
            h: 8,
            w: 8,
            stride: 2,
        };
        let n = 5;
        let x: Vec<f32> = (0..n * 3 * 64)
            .map(|v| ((v * 31 % 17) as f32) * 0.1 - 0.8)
            .collect();
        let w: Vec<f32> = (0..4 * 27)
            .map(|v| ((v * 7 % 5) as f32) * 0.2 - 0.4)
            .collect();
        let b = vec![0.0f32; 4];
        let s = conv2d_forward(Exec::Sequential, &g, n, &x, &w, &b);
        let p = conv2d_forward(Exec::Parallel, &g, n, &x, &w, &b);
        assert_eq!(s, p);
        let go: Vec<f32> = (0..s.len()).map(|v| ((v * 3 % 13) as f32) * 0.05).collect();
        let bs = conv2d_backward(Exec::Sequential, &g, n, &x, &w, &go);
        let bp = conv2d_backward(Exec::Parallel, &g, n, &x, &w, &go);
        assert_eq!(bs, bp);
    }
}

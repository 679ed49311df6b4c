//! Raw numeric kernels behind the autodiff ops.
//!
//! Matrix products go through `matrixmultiply::dgemm`. When more than one
//! worker thread is configured, large products are split by output rows;
//! the reduction order along the inner dimension does not depend on the
//! split, so results are bit-identical for any thread count.

use std::cell::Cell;
use std::sync::OnceLock;

use rayon::prelude::*;

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` multiply-accumulates to the calling thread's counter.
pub(crate) fn count_macs(n: u64) {
    MAC_COUNTER.with(|c| c.set(c.get() + n));
}

/// Multiply-accumulates recorded by forward matmul/conv ops on this thread.
pub fn mac_counter() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_mac_counter() {
    MAC_COUNTER.with(|c| c.set(0));
}

const PARALLEL_MIN_WORK: usize = 1 << 18;

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = worker_threads();
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

/// Runs `f` inside the configured worker pool, or inline when single-threaded.
pub(crate) fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match pool() {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Worker count from `ITERVM_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("ITERVM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta`, `a` is stored row-major as `k×m`; with `tb`, `b` is stored as
/// `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };

    let work = m * k * n;
    if let Some(pool) = pool().filter(|_| work >= PARALLEL_MIN_WORK && m >= 8) {
        let chunk_rows = m.div_ceil(pool.current_num_threads());
        pool.install(|| {
            c.par_chunks_mut(chunk_rows * n)
                .enumerate()
                .for_each(|(ci, cchunk)| {
                    let r0 = ci * chunk_rows;
                    let rows = cchunk.len() / n;
                    let a_off = if ta { r0 } else { r0 * k };
                    // SAFETY: strides describe in-bounds views of `a`, `b`, and
                    // the disjoint output chunk.
                    unsafe {
                        matrixmultiply::dgemm(
                            rows,
                            k,
                            n,
                            1.0,
                            a.as_ptr().add(a_off),
                            rsa,
                            csa,
                            b.as_ptr(),
                            rsb,
                            csb,
                            beta,
                            cchunk.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                });
        });
        return;
    }
    // SAFETY: slice lengths were checked against the logical dimensions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution over a single `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output extent along one axis, or `None` when it would be < 1.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch() * npix];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npix = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over `len` strided elements starting at `base`.
pub(crate) fn softmax_strided(x: &[f64], out: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        max = max.max(x[base + i * stride]);
    }
    let mut sum = 0.0;
    for i in 0..len {
        let e = (x[base + i * stride] - max).exp();
        out[base + i * stride] = e;
        sum += e;
    }
    for i in 0..len {
        out[base + i * stride] /= sum;
    }
}

/// Nearest-neighbour upsampling of a `C×H×W` buffer.
pub(crate) fn upsample_nearest(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &dy[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            let dst = &mut dx[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            for (ox, v) in src.iter().enumerate() {
                dst[ox / f] += v;
            }
        }
    }
    dx
}

//! Dense compute kernels behind the tensor ops.
//!
//! Every kernel has a `_seq` variant that is always compiled; the unsuffixed
//! entry point dispatches to a rayon implementation when the `parallel`
//! feature is on and the problem is large enough to amortize the fork cost.
//! The criterion bench suite compares both paths directly.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output-row multiply-accumulates the parallel dispatch
/// stays sequential.
const PAR_THRESHOLD: usize = 64 * 1024;

pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for v in row.iter_mut() {
            *v = T::ZERO;
        }
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (v, &bv) in row.iter_mut().zip(brow) {
                *v += av * bv;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(a: &[T], b: &[T], _m: usize, k: usize, n: usize, out: &mut [T]) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for v in row.iter_mut() {
            *v = T::ZERO;
        }
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (v, &bv) in row.iter_mut().zip(brow) {
                *v += av * bv;
            }
        }
    });
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            matmul_par(a, b, m, k, n, out);
            return;
        }
    }
    matmul_seq(a, b, m, k, n, out);
}

/// Shape bundle for a 2D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub p_h: usize,
    pub p_w: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.p_h - self.k_h) / self.s_h + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.p_w - self.k_w) / self.s_w + 1
    }
}

fn conv2d_one_out_channel<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims, co: usize, out: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let ksz = d.c_in * d.k_h * d.k_w;
    let kbase = co * ksz;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = T::ZERO;
            for ci in 0..d.c_in {
                for ky in 0..d.k_h {
                    let iy = (oy * d.s_h + ky) as isize - d.p_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k_w {
                        let ix = (ox * d.s_w + kx) as isize - d.p_w as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xi = ci * d.h * d.w + iy as usize * d.w + ix as usize;
                        let ki = kbase + ci * d.k_h * d.k_w + ky * d.k_w + kx;
                        acc += x[xi] * kernel[ki];
                    }
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
}

pub fn conv2d_seq<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims, out: &mut [T]) {
    let plane = d.out_h() * d.out_w();
    for co in 0..d.c_out {
        conv2d_one_out_channel(x, kernel, d, co, &mut out[co * plane..(co + 1) * plane]);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_par<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims, out: &mut [T]) {
    let plane = d.out_h() * d.out_w();
    out.par_chunks_mut(plane).enumerate().for_each(|(co, o)| {
        conv2d_one_out_channel(x, kernel, d, co, o);
    });
}

pub fn conv2d<T: Scalar>(x: &[T], kernel: &[T], d: &ConvDims, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        let work = d.c_out * d.out_h() * d.out_w() * d.c_in * d.k_h * d.k_w;
        if work >= PAR_THRESHOLD && d.c_out > 1 {
            conv2d_par(x, kernel, d, out);
            return;
        }
    }
    conv2d_seq(x, kernel, d, out);
}

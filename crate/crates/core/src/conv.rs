//! Matrix-free zero-padded "same" convolution (unit stride, no kernel flip)
//! and its adjoint.
//!
//! `Y_{r,s,c} = Σ_d Σ_q Σ_p X_{r−m+p, s−m+q, d} · K_{p,q,d,c}` with
//! `m = ⌈k/2⌉` and `X` taken as zero outside `1..=N`. Out-of-range taps are
//! skipped rather than read from a padded copy, and accumulation runs
//! `d`, then `q`, then `p`, so results are reproducible bit for bit.

use crate::par::*;
use crate::tensor::{InputTensor, KernelTensor, OutputTensor, ProblemDims};
use crate::{Error, Result};

/// Single-channel convolution; `K` must be `k×k×1×1` and `X` must be `N×N×1`.
pub fn conv_single(kernel: &KernelTensor, x: &InputTensor) -> Result<OutputTensor> {
    if kernel.g() != 1 || kernel.h() != 1 {
        return Err(Error::InvalidDims(format!(
            "single-channel convolution needs g = h = 1, kernel has g = {}, h = {}",
            kernel.g(),
            kernel.h()
        )));
    }
    conv_multi(kernel, x)
}

pub fn conv_multi(kernel: &KernelTensor, x: &InputTensor) -> Result<OutputTensor> {
    if x.g() != kernel.g() {
        return Err(Error::ChannelMismatch {
            kernel: kernel.g(),
            input: x.g(),
        });
    }
    let dims = ProblemDims::for_kernel(kernel, x.n())?;
    let mut out = vec![0.0; dims.n_out()];
    forward(kernel, &dims, x.values(), &mut out);
    OutputTensor::new(dims.n, dims.h, out)
}

/// `M·v` without forming `M`; `v` has length `g·N²`.
pub fn apply_operator(kernel: &KernelTensor, n: usize, v: &[f64]) -> Result<Vec<f64>> {
    let dims = ProblemDims::for_kernel(kernel, n)?;
    if v.len() != dims.n_in() {
        return Err(Error::LengthMismatch {
            expected: dims.n_in(),
            actual: v.len(),
        });
    }
    let mut out = vec![0.0; dims.n_out()];
    forward(kernel, &dims, v, &mut out);
    Ok(out)
}

/// `Mᵀ·w` without forming `M`; `w` has length `h·N²`.
pub fn apply_adjoint(kernel: &KernelTensor, n: usize, w: &[f64]) -> Result<Vec<f64>> {
    let dims = ProblemDims::for_kernel(kernel, n)?;
    if w.len() != dims.n_out() {
        return Err(Error::LengthMismatch {
            expected: dims.n_out(),
            actual: w.len(),
        });
    }
    let mut out = vec![0.0; dims.n_in()];
    adjoint(kernel, &dims, w, &mut out);
    Ok(out)
}

/// Index range of output positions `r` for which `r + offset` lands in `1..=n`,
/// as 0-based `[lo, hi)`.
#[inline]
pub(crate) fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

pub(crate) fn forward(kernel: &KernelTensor, dims: &ProblemDims, x: &[f64], out: &mut [f64]) {
    let n = dims.n;
    let plane = dims.plane();
    let (k, g) = (dims.k, dims.g);
    let m = dims.center() as isize;
    let kv = kernel.values();
    out.par_chunks_mut(plane).enumerate().for_each(|(c, y_plane)| {
        for s in 0..n {
            for r in 0..n {
                let mut acc = 0.0;
                for d in 0..g {
                    let x_plane = &x[d * plane..(d + 1) * plane];
                    let k_slab = &kv[(d + g * c) * k * k..(d + g * c + 1) * k * k];
                    for q in 0..k {
                        let j = s as isize + q as isize + 1 - m;
                        if j < 0 || j >= n as isize {
                            continue;
                        }
                        let x_col = &x_plane[j as usize * n..(j as usize + 1) * n];
                        for p in 0..k {
                            let i = r as isize + p as isize + 1 - m;
                            if i < 0 || i >= n as isize {
                                continue;
                            }
                            acc += x_col[i as usize] * k_slab[q * k + p];
                        }
                    }
                }
                y_plane[s * n + r] = acc;
            }
        }
    });
}

pub(crate) fn adjoint(kernel: &KernelTensor, dims: &ProblemDims, w: &[f64], out: &mut [f64]) {
    let n = dims.n;
    let plane = dims.plane();
    let (k, g, h) = (dims.k, dims.g, dims.h);
    let m = dims.center() as isize;
    let kv = kernel.values();
    out.par_chunks_mut(plane).enumerate().for_each(|(d, x_plane)| {
        for j in 0..n {
            for i in 0..n {
                let mut acc = 0.0;
                for c in 0..h {
                    let w_plane = &w[c * plane..(c + 1) * plane];
                    let k_slab = &kv[(d + g * c) * k * k..(d + g * c + 1) * k * k];
                    for q in 0..k {
                        // j = s + q + 1 − m  ⇒  s = j − q − 1 + m
                        let s = j as isize - q as isize - 1 + m;
                        if s < 0 || s >= n as isize {
                            continue;
                        }
                        let w_col = &w_plane[s as usize * n..(s as usize + 1) * n];
                        for p in 0..k {
                            let r = i as isize - p as isize - 1 + m;
                            if r < 0 || r >= n as isize {
                                continue;
                            }
                            acc += w_col[r as usize] * k_slab[q * k + p];
                        }
                    }
                }
                x_plane[j * n + i] = acc;
            }
        }
    });
}

//! Extreme singular triples of `M` with residual certification.
//!
//! `σ_min` always means the `min(n_rows, n_cols)`-th singular value, so it
//! can be zero for structurally rank-deficient operators. Every pair handed
//! out satisfies `max(‖Mv − σu‖, ‖Mᵀu − σv‖) ≤ residual`, and `residual` is
//! checked against a bound before the pair leaves this module.
//!
//! Two backends are provided. The dense one takes a thin SVD of the
//! explicit matrix and knows the whole spectrum, so gaps are exact. The
//! iterative one runs two-vector subspace iteration on the matrix-free
//! normal operator (shifted for `σ_min`), and its gaps are Ritz estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{apply_adjoint, apply_operator};
use crate::structured::{build_multi, StructuredMatrix};
use crate::tensor::{KernelTensor, ProblemDims};
use crate::{Error, Result};

/// Default relative certification tolerance for singular pairs.
pub const DEFAULT_CERT_TOL: f64 = 1e-8;
/// Default relative gap below which a singular value counts as repeated.
pub const DEFAULT_GAP_THRESHOLD: f64 = 1e-8;

const START_SEED: u64 = 0x5eed_c0de;

/// Singular triple `(σ, u, v)` with `Mv = σu`, `Mᵀu = σv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    pub sigma: f64,
    /// Unit left singular vector, length `n_rows`.
    pub u: Vec<f64>,
    /// Unit right singular vector, length `n_cols`.
    pub v: Vec<f64>,
    /// `max(‖Mv − σu‖, ‖Mᵀu − σv‖)`.
    pub residual: f64,
    /// Distance to the nearest other singular value (`∞` if there is none).
    pub gap: f64,
    /// `σ_max(M)`, the scale used for relative thresholds.
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplicityStatus {
    Simple,
    Degenerate,
}

/// Degenerate iff `gap < threshold·max(σ_max, 1)` or `σ < threshold`.
pub fn simplicity_check(pair: &SpectralPair, threshold: f64) -> SimplicityStatus {
    if pair.gap < threshold * pair.norm.max(1.0) || pair.sigma < threshold {
        SimplicityStatus::Degenerate
    } else {
        SimplicityStatus::Simple
    }
}

/// Largest and smallest singular triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremePairs {
    pub max: SpectralPair,
    pub min: SpectralPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SvdBackend {
    /// Thin SVD of the explicit matrix.
    Dense,
    /// Subspace iteration on the matrix-free normal operator.
    Iterative { tol: f64, max_iter: usize },
}

impl SvdBackend {
    pub fn iterative() -> Self {
        SvdBackend::Iterative {
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

/// How spectral quantities are computed and certified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSolver {
    pub backend: SvdBackend,
    /// Pairs with residual above `cert_tol·σ_max` are rejected.
    pub cert_tol: f64,
    /// Threshold passed to [`simplicity_check`] before using `σ_min`'s gradient.
    pub gap_threshold: f64,
}

impl Default for SpectralSolver {
    fn default() -> Self {
        Self {
            backend: SvdBackend::Dense,
            cert_tol: DEFAULT_CERT_TOL,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
        }
    }
}

impl SpectralSolver {
    pub fn extreme_pairs(&self, kernel: &KernelTensor, n: usize) -> Result<ExtremePairs> {
        match self.backend {
            SvdBackend::Dense => {
                let matrix = build_multi(kernel, n)?;
                extreme_pairs_with_tol(&matrix, self.cert_tol)
            }
            SvdBackend::Iterative { tol, max_iter } => {
                let max = sigma_max_iterative(kernel, n, tol, max_iter)?;
                let min = sigma_min_iterative(kernel, n, tol, max_iter, Some(max.sigma))?;
                let bound = self.cert_tol * max.sigma;
                for pair in [&max, &min] {
                    if pair.residual > bound {
                        return Err(Error::Uncertified {
                            residual: pair.residual,
                            bound,
                        });
                    }
                }
                Ok(ExtremePairs { max, min })
            }
        }
    }

    pub fn simplicity(&self, pair: &SpectralPair) -> SimplicityStatus {
        simplicity_check(pair, self.gap_threshold)
    }
}

/// Singular values of `M` in nonincreasing order (dense path).
pub fn singular_values(matrix: &StructuredMatrix) -> Result<Vec<f64>> {
    matrix
        .to_dense()
        .singular_values()
        .map_err(|_| Error::SvdNoConvergence)
}

/// Dense-path extreme pairs with the default certification tolerance.
pub fn extreme_singular_pairs(matrix: &StructuredMatrix) -> Result<ExtremePairs> {
    extreme_pairs_with_tol(matrix, DEFAULT_CERT_TOL)
}

pub fn extreme_pairs_with_tol(matrix: &StructuredMatrix, cert_tol: f64) -> Result<ExtremePairs> {
    let dense = matrix.to_dense();
    let svd = dense.thin_svd().map_err(|_| Error::SvdNoConvergence)?;
    let s: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let r = s.len();
    let (u_all, v_all) = (svd.U(), svd.V());
    let column = |mat: faer::MatRef<'_, f64>, j: usize| -> Vec<f64> { mat.col(j).iter().copied().collect() };

    let norm = s[0];
    let gap_at = |j: usize| {
        let left = if j > 0 { s[j - 1] - s[j] } else { f64::INFINITY };
        let right = if j + 1 < r { s[j] - s[j + 1] } else { f64::INFINITY };
        left.min(right)
    };
    let make = |j: usize| -> Result<SpectralPair> {
        let (u, v) = sign_normalize(column(u_all, j), column(v_all, j));
        let mut pair = SpectralPair {
            sigma: s[j].max(0.0),
            u,
            v,
            residual: 0.0,
            gap: gap_at(j),
            norm,
        };
        pair.residual = pair_residual(matrix, &pair)?;
        let bound = cert_tol * norm;
        if pair.residual > bound {
            return Err(Error::Uncertified {
                residual: pair.residual,
                bound,
            });
        }
        Ok(pair)
    };
    Ok(ExtremePairs {
        max: make(0)?,
        min: make(r - 1)?,
    })
}

/// `max(‖Mv − σu‖, ‖Mᵀu − σv‖)` by explicit multiplication.
pub fn pair_residual(matrix: &StructuredMatrix, pair: &SpectralPair) -> Result<f64> {
    let mv = matrix.matvec(&pair.v)?;
    let mtu = matrix.matvec_transpose(&pair.u)?;
    Ok(dist(&mv, &pair.u, pair.sigma).max(dist(&mtu, &pair.v, pair.sigma)))
}

/// `‖a − σb‖₂`
fn dist(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - sigma * y).powi(2)).sum::<f64>().sqrt()
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flip `(u, v)` so the largest-magnitude entry of `v` is positive. Products
/// `u(i)v(j)` are unchanged.
fn sign_normalize(mut u: Vec<f64>, mut v: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (u, v)
}

/// Which side the Gram operator acts on: the smaller of `MᵀM` and `MMᵀ`.
#[derive(Clone, Copy)]
enum GramSide {
    /// `MᵀM`, vectors of length `n_cols`.
    Right,
    /// `MMᵀ`, vectors of length `n_rows`.
    Left,
}

struct Gram<'a> {
    kernel: &'a KernelTensor,
    n: usize,
    side: GramSide,
    dim: usize,
}

impl<'a> Gram<'a> {
    fn new(kernel: &'a KernelTensor, n: usize) -> Result<Self> {
        let dims = ProblemDims::for_kernel(kernel, n)?;
        let (side, dim) = if dims.n_in() <= dims.n_out() {
            (GramSide::Right, dims.n_in())
        } else {
            (GramSide::Left, dims.n_out())
        };
        Ok(Self { kernel, n, side, dim })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        // Lengths are guaranteed by construction.
        match self.side {
            GramSide::Right => {
                let mx = apply_operator(self.kernel, self.n, x).expect("length checked");
                apply_adjoint(self.kernel, self.n, &mx).expect("length checked")
            }
            GramSide::Left => {
                let mtx = apply_adjoint(self.kernel, self.n, x).expect("length checked");
                apply_operator(self.kernel, self.n, &mtx).expect("length checked")
            }
        }
    }

    /// Completes an eigenvector `x` of the Gram operator to a singular
    /// triple of `M` and measures its residual.
    fn to_pair(&self, x: &[f64], gap: f64, norm: f64) -> SpectralPair {
        let (u, v) = match self.side {
            GramSide::Right => {
                let mv = apply_operator(self.kernel, self.n, x).expect("length checked");
                (mv, x.to_vec())
            }
            GramSide::Left => {
                let mtu = apply_adjoint(self.kernel, self.n, x).expect("length checked");
                (x.to_vec(), mtu)
            }
        };
        let (image, fixed, is_right) = match self.side {
            GramSide::Right => (u, v, true),
            GramSide::Left => (v, u, false),
        };
        let sigma = norm2(&image);
        let image = if sigma > 0.0 {
            image.iter().map(|x| x / sigma).collect()
        } else {
            // σ = 0: any unit vector completes the pair; pick e_1.
            let mut e = vec![0.0; image.len()];
            e[0] = 1.0;
            e
        };
        let (u, v) = if is_right { (image, fixed) } else { (fixed, image) };
        let (u, v) = sign_normalize(u, v);
        let mv = apply_operator(self.kernel, self.n, &v).expect("length checked");
        let mtu = apply_adjoint(self.kernel, self.n, &u).expect("length checked");
        let residual = dist(&mv, &u, sigma).max(dist(&mtu, &v, sigma));
        SpectralPair {
            sigma,
            u,
            v,
            residual,
            gap,
            norm,
        }
    }
}

fn start_block(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let width = dim.min(2);
    (0..width)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Orthonormalizes the block in place (modified Gram–Schmidt, applied twice).
fn orthonormalize(block: &mut [Vec<f64>]) {
    for pass in 0..2 {
        for j in 0..block.len() {
            for i in 0..j {
                let (head, tail) = block.split_at_mut(j);
                let proj = dot(&head[i], &tail[0]);
                tail[0].iter_mut().zip(&head[i]).for_each(|(x, y)| *x -= proj * y);
            }
            let nrm = norm2(&block[j]);
            if nrm > 0.0 {
                block[j].iter_mut().for_each(|x| *x /= nrm);
            } else if pass == 0 {
                // Collapsed direction; reseed with a coordinate vector.
                let len = block[j].len();
                block[j] = (0..len).map(|t| if t == j % len { 1.0 } else { 0.0 }).collect();
            }
        }
    }
}

/// Eigen-decomposition of a symmetric 2×2 `[[a, b], [b, c]]`, eigenvalues
/// descending, rotation columns as eigenvectors.
fn sym2_eig(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    if b == 0.0 {
        return if a >= c {
            ([a, c], [[1.0, 0.0], [0.0, 1.0]])
        } else {
            ([c, a], [[0.0, 1.0], [1.0, 0.0]])
        };
    }
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (sn, cs) = theta.sin_cos();
    let l1 = a * cs * cs + 2.0 * b * sn * cs + c * sn * sn;
    let l2 = a * sn * sn - 2.0 * b * sn * cs + c * cs * cs;
    if l1 >= l2 {
        ([l1, l2], [[cs, -sn], [sn, cs]])
    } else {
        ([l2, l1], [[-sn, cs], [cs, sn]])
    }
}

/// Two-vector subspace iteration with Rayleigh–Ritz for the dominant
/// eigenpair of a symmetric operator. `accept` sees the Ritz vector and
/// values each sweep and decides whether to stop. Returns the Ritz vector,
/// `λ₁` and an estimate of `λ₂` (`None` when the space is one-dimensional).
fn dominant_pair(
    dim: usize,
    op: impl Fn(&[f64]) -> Vec<f64>,
    max_iter: usize,
    mut accept: impl FnMut(&[f64], f64) -> bool,
) -> Option<(Vec<f64>, f64, Option<f64>)> {
    let mut q = start_block(dim);
    orthonormalize(&mut q);
    for _ in 0..max_iter.max(1) {
        let z: Vec<Vec<f64>> = q.iter().map(|x| op(x)).collect();
        let (lambdas, ritz_q, ritz_z) = if q.len() == 2 {
            let (a, b, c) = (dot(&q[0], &z[0]), 0.5 * (dot(&q[0], &z[1]) + dot(&q[1], &z[0])), dot(&q[1], &z[1]));
            let (lam, rot) = sym2_eig(a, b, c);
            let combine = |block: &[Vec<f64>], col: usize| -> Vec<f64> {
                block[0]
                    .iter()
                    .zip(&block[1])
                    .map(|(x, y)| rot[0][col] * x + rot[1][col] * y)
                    .collect()
            };
            (
                vec![lam[0], lam[1]],
                vec![combine(&q, 0), combine(&q, 1)],
                vec![combine(&z, 0), combine(&z, 1)],
            )
        } else {
            (vec![dot(&q[0], &z[0])], q.clone(), z)
        };
        if accept(&ritz_q[0], lambdas[0]) {
            return Some((ritz_q[0].clone(), lambdas[0], lambdas.get(1).copied()));
        }
        q = ritz_z;
        orthonormalize(&mut q);
    }
    None
}

/// `σ_max` by power (subspace) iteration on the matrix-free normal operator.
/// The returned pair satisfies `residual ≤ tol·σ`.
pub fn sigma_max_iterative(kernel: &KernelTensor, n: usize, tol: f64, max_iter: usize) -> Result<SpectralPair> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let gram = Gram::new(kernel, n)?;
    let mut last_residual = f64::INFINITY;
    let found = dominant_pair(gram.dim, |x| gram.apply(x), max_iter, |x, _| {
        let pair = gram.to_pair(x, 0.0, 0.0);
        last_residual = pair.residual;
        pair.residual <= tol * pair.sigma || pair.sigma == 0.0
    });
    let (x, _, second) = found.ok_or(Error::IterationLimit {
        tol,
        max_iter,
        residual: last_residual,
    })?;
    let mut pair = gram.to_pair(&x, 0.0, 0.0);
    pair.norm = pair.sigma;
    pair.gap = match second {
        Some(l2) => pair.sigma - l2.max(0.0).sqrt(),
        None => f64::INFINITY,
    };
    Ok(pair)
}

/// `σ_min` by subspace iteration on `s·I − G`, where `G` is the smaller Gram
/// operator and `s` exceeds `σ_max²`. Certified against `tol·σ_max`.
/// `sigma_max` may be supplied to skip the extra power iteration.
pub fn sigma_min_iterative(
    kernel: &KernelTensor,
    n: usize,
    tol: f64,
    max_iter: usize,
    sigma_max: Option<f64>,
) -> Result<SpectralPair> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let sigma_max = match sigma_max {
        Some(s) => s,
        None => sigma_max_iterative(kernel, n, tol, max_iter)?.sigma,
    };
    let gram = Gram::new(kernel, n)?;
    let shift = sigma_max * sigma_max * 1.01 + f64::MIN_POSITIVE;
    let mut last_residual = f64::INFINITY;
    let found = dominant_pair(
        gram.dim,
        |x| {
            let gx = gram.apply(x);
            x.iter().zip(gx).map(|(a, b)| shift * a - b).collect()
        },
        max_iter,
        |x, _| {
            let pair = gram.to_pair(x, 0.0, sigma_max);
            last_residual = pair.residual;
            pair.residual <= tol * sigma_max
        },
    );
    let (x, _, second) = found.ok_or(Error::IterationLimit {
        tol,
        max_iter,
        residual: last_residual,
    })?;
    let mut pair = gram.to_pair(&x, 0.0, sigma_max);
    pair.gap = match second {
        Some(l2) => (shift - l2).max(0.0).sqrt() - pair.sigma,
        None => f64::INFINITY,
    };
    Ok(pair)
}

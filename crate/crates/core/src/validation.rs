//! Independent oracles for the operator, Ω sets and gradients, plus the
//! grid suite behind `convreg verify`.
//!
//! None of these reuse the code path they check: finite differences go
//! through the public penalty functions, Ω is recovered by scanning a
//! one-hot build, and the explicit matrix is checked against the
//! matrix-free convolution.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{apply_adjoint, conv_multi};
use crate::par::*;
use crate::regularizers::{
    combined_gradient, frob_gradient, frob_penalty, penalty_value, sigma_min_gradient, GradientTensor, PenaltyKind,
};
use crate::spectral::{singular_values, SpectralSolver};
use crate::structured::{build_multi, omega, omega_count, OmegaIndexSet};
use crate::tensor::{vec_input, vec_output, InputTensor, KernelTensor, ProblemDims};
use crate::Result;

/// Finite-difference step used by the gradient checks.
pub const FD_EPS: f64 = 1e-6;
/// Relative tolerance for the Frobenius gradient check.
pub const FROB_RTOL: f64 = 1e-7;
/// Relative tolerance for the `σ_min` and combined gradient checks.
pub const SIGMA_RTOL: f64 = 1e-5;
/// Absolute floor of the gradient checks, per unit of penalty magnitude.
pub const FD_ABS_FLOOR: f64 = 1e-9;
/// Spectra with a `σ_min` gap below this are left out of gradient checks.
pub const MIN_CHECK_GAP: f64 = 1e-6;
/// Matrix-free vs explicit matvec tolerance (relative, 2-norm).
pub const MATVEC_RTOL: f64 = 1e-12;

/// Central differences `(R(K + ε·e) − R(K − ε·e)) / 2ε` for every entry.
pub fn fd_gradient<F>(penalty: F, kernel: &KernelTensor, eps: f64) -> Result<GradientTensor>
where
    F: Fn(&KernelTensor) -> Result<f64> + Sync,
{
    if !(eps > 0.0) {
        return Err(crate::Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let values = (0..kernel.len())
        .into_par_iter()
        .map(|idx| {
            let plus = penalty(&kernel.perturbed(idx, eps)?)?;
            let minus = penalty(&kernel.perturbed(idx, -eps)?)?;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    GradientTensor::new(kernel.k(), kernel.g(), kernel.h(), values)
}

/// Result of comparing an analytic gradient to a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientComparison {
    /// Largest `|a − b| / max(|b|, atol / rtol)` over entries, i.e. the
    /// relative error until the absolute floor takes over.
    pub worst_rel: f64,
    /// Largest `|a − b|`.
    pub worst_abs: f64,
    /// Every entry satisfies `|a − b| ≤ rtol·|b| + atol`.
    pub pass: bool,
}

pub fn compare_gradients(analytic: &GradientTensor, reference: &GradientTensor, rtol: f64, atol: f64) -> GradientComparison {
    let mut out = GradientComparison {
        worst_rel: 0.0,
        worst_abs: 0.0,
        pass: analytic.shape() == reference.shape(),
    };
    for (a, b) in analytic.values().iter().zip(reference.values()) {
        let diff = (a - b).abs();
        out.worst_abs = out.worst_abs.max(diff);
        out.worst_rel = out.worst_rel.max(diff / b.abs().max(if rtol > 0.0 { atol / rtol } else { atol }).max(f64::MIN_POSITIVE));
        if !(diff <= rtol * b.abs() + atol) {
            out.pass = false;
        }
    }
    out
}

/// FD absolute floor for a penalty of magnitude `value`: the rounding noise
/// of a central difference grows with `|R|/ε`.
pub fn fd_abs_floor(value: f64) -> f64 {
    FD_ABS_FLOOR * value.abs().max(1.0)
}

/// Ω by brute force: the nonzero positions of `M` built from the one-hot
/// kernel at `(p, q, z, y)`.
pub fn omega_scan(dims: &ProblemDims, p: usize, q: usize, z: usize, y: usize) -> Result<OmegaIndexSet> {
    let hot = KernelTensor::one_hot(dims.k, dims.g, dims.h, p, q, z, y)?;
    let matrix = build_multi(&hot, dims.n)?;
    let positions = matrix
        .entries()
        .iter()
        .filter(|e| e.value != 0.0)
        .map(|e| (e.row, e.col))
        .collect();
    Ok(OmegaIndexSet {
        index: (p, q, z, y),
        positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatvecReport {
    pub trials: usize,
    /// Largest `‖M·vec(X) − vec(K∗X)‖ / ‖vec(K∗X)‖` (absolute when the
    /// convolution is exactly zero).
    pub max_rel: f64,
    pub pass: bool,
}

/// Explicit `M·vec(X)` against matrix-free `vec(K ∗ X)` on `trials` random
/// inputs plus one corner impulse per channel and corner.
pub fn matvec_equivalence_report(kernel: &KernelTensor, n: usize, trials: usize, seed: u64) -> Result<MatvecReport> {
    matvec_report_between(kernel, kernel, n, trials, seed)
}

fn matvec_report_between(built: &KernelTensor, kernel: &KernelTensor, n: usize, trials: usize, seed: u64) -> Result<MatvecReport> {
    let dims = ProblemDims::for_kernel(kernel, n)?;
    let matrix = build_multi(built, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<InputTensor> = (0..trials.max(1))
        .map(|_| InputTensor::from_fn(n, dims.g, |_, _, _| rng.random_range(-1.0..1.0)))
        .collect::<Result<_>>()?;
    for d in 1..=dims.g {
        for (ci, cj) in [(1, 1), (1, n), (n, 1), (n, n)] {
            inputs.push(InputTensor::from_fn(n, dims.g, |i, j, c| {
                if (i, j, c) == (ci, cj, d) {
                    1.0
                } else {
                    0.0
                }
            })?);
        }
    }
    let mut max_rel = 0.0f64;
    for x in &inputs {
        let want = vec_output(&conv_multi(kernel, x)?);
        let got = matrix.matvec(&vec_input(x))?;
        let err = l2_dist(&got, &want);
        let norm = l2(&want);
        max_rel = max_rel.max(if norm > 0.0 { err / norm } else { err });
    }
    Ok(MatvecReport {
        trials: inputs.len(),
        max_rel,
        pass: max_rel <= MATVEC_RTOL,
    })
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Worst-case discrepancy in the check's own measure.
    pub worst: f64,
    pub cases: usize,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} cases={:<6} worst={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Largest spatial size in the operator/Ω grid (grid is `3..=grid_max_n`).
    pub grid_max_n: usize,
    /// Random inputs per grid point for the matvec check.
    pub trials: usize,
    /// Random kernels per shape for the gradient checks.
    pub kernels_per_shape: usize,
    pub seed: u64,
    /// Deliberately corrupt the analytic results; the suite must then fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grid_max_n: 8,
            trials: 20,
            kernels_per_shape: 20,
            seed: 2024,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for check in &self.checks {
            writeln!(f, "{check}")?;
        }
        Ok(())
    }
}

/// The `(k, N, g, h)` grid used by the operator and Ω checks.
pub fn operator_grid(max_n: usize) -> Vec<ProblemDims> {
    let mut grid = Vec::new();
    for k in [1, 3, 5] {
        for n in 3..=max_n.max(3) {
            for g in 1..=3 {
                for h in 1..=3 {
                    grid.push(ProblemDims { n, k, g, h });
                }
            }
        }
    }
    grid
}

fn grid_seed(base: u64, dims: &ProblemDims) -> u64 {
    base ^ ((dims.n as u64) << 48 | (dims.k as u64) << 32 | (dims.g as u64) << 16 | dims.h as u64)
}

pub fn random_kernel(dims: &ProblemDims, seed: u64, lo: f64, hi: f64) -> Result<KernelTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KernelTensor::from_fn(dims.k, dims.g, dims.h, |_, _, _, _| rng.random_range(lo..hi))
}

/// Matvec equivalence over the grid.
pub fn check_matvec(opts: &VerifyOptions) -> Result<CheckResult> {
    let grid = operator_grid(opts.grid_max_n);
    let reports = grid
        .par_iter()
        .map(|dims| {
            let kernel = random_kernel(dims, grid_seed(opts.seed, dims), -1.0, 1.0)?;
            // With a fault the explicit matrix is built from a slightly different kernel.
            let built = if opts.inject_fault { kernel.perturbed(0, 1e-9)? } else { kernel.clone() };
            matvec_report_between(&built, &kernel, dims.n, opts.trials, grid_seed(opts.seed, dims) ^ 0xabcd)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult {
        name: "matvec-equivalence".into(),
        pass: reports.iter().all(|r| r.pass),
        worst: reports.iter().map(|r| r.max_rel).fold(0.0, f64::max),
        cases: reports.iter().map(|r| r.trials).sum(),
    })
}

/// `⟨Mv, w⟩ = ⟨v, Mᵀw⟩` for the matrix-free pair over the grid.
pub fn check_adjoint(opts: &VerifyOptions) -> Result<CheckResult> {
    let grid = operator_grid(opts.grid_max_n);
    let worst = grid
        .par_iter()
        .map(|dims| {
            let seed = grid_seed(opts.seed, dims) ^ 0x5151;
            let kernel = random_kernel(dims, seed, -1.0, 1.0)?;
            let matrix = build_multi(&kernel, dims.n)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = 0.0f64;
            for _ in 0..opts.trials.max(1) {
                let v: Vec<f64> = (0..dims.n_in()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..dims.n_out()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mv = matrix.matvec(&v)?;
                let mut mtw = apply_adjoint(&kernel, dims.n, &w)?;
                if opts.inject_fault {
                    mtw[0] += 1e-6;
                }
                let lhs: f64 = mv.iter().zip(&w).map(|(a, b)| a * b).sum();
                let rhs: f64 = v.iter().zip(&mtw).map(|(a, b)| a * b).sum();
                let scale: f64 = mv.iter().zip(&w).map(|(a, b)| (a * b).abs()).sum::<f64>().max(f64::MIN_POSITIVE);
                worst = worst.max((lhs - rhs).abs() / scale);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = worst.into_iter().fold(0.0, f64::max);
    Ok(CheckResult {
        name: "adjoint-identity".into(),
        pass: worst <= MATVEC_RTOL,
        worst,
        cases: grid.len() * opts.trials.max(1),
    })
}

/// Analytic Ω against the one-hot scan, plus the cardinality formula, for
/// every kernel entry over the grid. `worst` counts mismatching sets.
pub fn check_omega(opts: &VerifyOptions) -> Result<CheckResult> {
    let grid = operator_grid(opts.grid_max_n);
    let results = grid
        .par_iter()
        .map(|dims| {
            let m = dims.center();
            let mut bad = 0usize;
            let mut cases = 0usize;
            let mut covered = BTreeSet::new();
            let mut total = 0usize;
            for y in 1..=dims.h {
                for z in 1..=dims.g {
                    for q in 1..=dims.k {
                        for p in 1..=dims.k {
                            cases += 1;
                            let mut fast = omega(dims, p, q, z, y)?;
                            if opts.inject_fault && p == 1 && q == 1 {
                                fast.positions.pop();
                            }
                            let scan = omega_scan(dims, p, q, z, y)?;
                            let want = dims.n.saturating_sub(p.abs_diff(m)) * dims.n.saturating_sub(q.abs_diff(m));
                            let fast_set: BTreeSet<_> = fast.positions.iter().copied().collect();
                            let scan_set: BTreeSet<_> = scan.positions.iter().copied().collect();
                            if fast_set != scan_set || scan.len() != want || omega_count(dims, p, q) != want {
                                bad += 1;
                            }
                            total += scan.len();
                            covered.extend(scan_set);
                        }
                    }
                }
            }
            // Ω sets are disjoint and cover every position of a dense kernel.
            let all_ones = KernelTensor::from_fn(dims.k, dims.g, dims.h, |_, _, _, _| 1.0)?;
            if covered.len() != total || build_multi(&all_ones, dims.n)?.nnz() != total {
                bad += 1;
            }
            Ok((bad, cases))
        })
        .collect::<Result<Vec<_>>>()?;
    let bad: usize = results.iter().map(|r| r.0).sum();
    Ok(CheckResult {
        name: "omega-exactness".into(),
        pass: bad == 0,
        worst: bad as f64,
        cases: results.iter().map(|r| r.1).sum(),
    })
}

/// Shapes and sizes used by the gradient checks.
pub fn gradient_shapes() -> Vec<ProblemDims> {
    [(5, 3, 1, 1), (5, 3, 2, 1), (5, 3, 1, 2), (5, 3, 2, 2), (4, 3, 1, 3), (6, 5, 1, 1)]
        .into_iter()
        .map(|(n, k, g, h)| ProblemDims { n, k, g, h })
        .collect()
}

/// Outcome of checking one penalty's gradient on many kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSweep {
    pub kernels: usize,
    pub skipped_degenerate: usize,
    pub worst_rel: f64,
    pub pass: bool,
}

/// Analytic vs finite-difference gradients of `kind` on `count` random
/// kernels per shape. Kernels whose `σ_min` gap is below [`MIN_CHECK_GAP`]
/// are skipped for the `σ_min` penalties and replaced by fresh draws.
pub fn gradient_sweep(kind: PenaltyKind, shapes: &[ProblemDims], count: usize, seed: u64, inject_fault: bool) -> Result<GradientSweep> {
    let solver = SpectralSolver::default();
    let rtol = if kind == PenaltyKind::Frobenius { FROB_RTOL } else { SIGMA_RTOL };
    let check_one = |dims: &ProblemDims, kseed: u64| -> Result<Option<(f64, bool)>> {
        let n = dims.n;
        let kernel = random_kernel(dims, kseed, -1.0, 1.0)?;
        let analytic = match kind {
            PenaltyKind::Frobenius => frob_gradient(&kernel, n)?,
            _ => {
                let pairs = solver.extreme_pairs(&kernel, n)?;
                if pairs.min.gap < MIN_CHECK_GAP || pairs.min.sigma < MIN_CHECK_GAP {
                    return Ok(None);
                }
                if kind == PenaltyKind::NegSigmaMin {
                    sigma_min_gradient(&kernel, n, &pairs.min, solver.gap_threshold)?.scaled(-1.0)?
                } else {
                    combined_gradient(&kernel, n, &pairs.min, solver.gap_threshold)?
                }
            }
        };
        let analytic = if inject_fault { analytic.scaled(1.0 + 1e-3)? } else { analytic };
        let penalty = |k: &KernelTensor| match kind {
            PenaltyKind::Frobenius => frob_penalty(k, n),
            _ => penalty_value(k, n, kind, &solver),
        };
        let value = penalty(&kernel)?;
        let fd = fd_gradient(penalty, &kernel, FD_EPS)?;
        let cmp = compare_gradients(&analytic, &fd, rtol, fd_abs_floor(value));
        Ok(Some((cmp.worst_rel, cmp.pass)))
    };

    let mut sweep = GradientSweep {
        kernels: 0,
        skipped_degenerate: 0,
        worst_rel: 0.0,
        pass: true,
    };
    for dims in shapes {
        // Draw batches until `count` kernels with a usable spectrum have been checked.
        let mut checked = 0usize;
        let mut next = 0u64;
        while checked < count {
            if next > 50 * count as u64 {
                sweep.pass = false;
                break;
            }
            let batch = (count - checked) as u64;
            let results = (next..next + batch)
                .into_par_iter()
                .map(|i| check_one(dims, grid_seed(seed, dims).wrapping_add(i.wrapping_mul(7919))))
                .collect::<Result<Vec<_>>>()?;
            next += batch;
            for r in results {
                match r {
                    Some((worst, pass)) => {
                        checked += 1;
                        sweep.worst_rel = sweep.worst_rel.max(worst);
                        sweep.pass &= pass;
                    }
                    None => sweep.skipped_degenerate += 1,
                }
            }
        }
        sweep.kernels += checked;
    }
    Ok(sweep)
}

/// `½‖M‖²_F` via the Ω closed form against `½Σσᵢ²` from the dense SVD.
/// Returns the worst relative discrepancy.
pub fn frobenius_identity_worst(kernels: &[(KernelTensor, usize)]) -> Result<f64> {
    frobenius_identity_inner(kernels, 1.0)
}

fn frobenius_identity_inner(kernels: &[(KernelTensor, usize)], closed_scale: f64) -> Result<f64> {
    let errs = kernels
        .par_iter()
        .map(|(kernel, n)| {
            let closed = closed_scale * frob_penalty(kernel, *n)?;
            let spectral = 0.5 * singular_values(&build_multi(kernel, *n)?)?.iter().map(|s| s * s).sum::<f64>();
            Ok((closed - spectral).abs() / spectral.abs().max(f64::MIN_POSITIVE))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Runs every check and collects one line per check.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = vec![check_matvec(opts)?, check_adjoint(opts)?, check_omega(opts)?];
    let shapes: Vec<ProblemDims> = gradient_shapes()
        .into_iter()
        .filter(|d| d.n <= opts.grid_max_n.max(3))
        .collect();
    for kind in PenaltyKind::ALL {
        let sweep = gradient_sweep(kind, &shapes, opts.kernels_per_shape, opts.seed, opts.inject_fault)?;
        checks.push(CheckResult {
            name: format!("gradient-fd-{kind}"),
            pass: sweep.pass && sweep.kernels > 0,
            worst: sweep.worst_rel,
            cases: sweep.kernels,
        });
    }
    let frob_kernels = shapes
        .iter()
        .enumerate()
        .map(|(i, d)| Ok((random_kernel(d, opts.seed.wrapping_add(i as u64), 0.0, 1.0)?, d.n)))
        .collect::<Result<Vec<_>>>()?;
    let worst = frobenius_identity_inner(&frob_kernels, if opts.inject_fault { 1.0 + 1e-8 } else { 1.0 })?;
    checks.push(CheckResult {
        name: "frobenius-identity".into(),
        pass: worst <= 1e-10,
        worst,
        cases: frob_kernels.len(),
    });
    Ok(VerifyReport { checks })
}

//! Cross-module properties over randomly drawn shapes and kernels.

use proptest::prelude::*;

use convreg_core::conv::{apply_adjoint, apply_operator};
use convreg_core::regularizers::{frob_gradient, frob_penalty, sigma_min_gradient};
use convreg_core::spectral::{pair_residual, sigma_max_iterative, singular_values, SpectralPair};
use convreg_core::structured::{build_multi, frobenius_norm_sq, omega, omega_count};
use convreg_core::validation::random_kernel;
use convreg_core::{run, GdConfig, KernelTensor, PenaltyKind, ProblemDims, SpectralSolver};

fn dims_strategy() -> impl Strategy<Value = ProblemDims> {
    (prop::sample::select(vec![1usize, 2, 3, 4, 5]), 2usize..=6, 1usize..=3, 1usize..=3)
        .prop_map(|(k, n, g, h)| ProblemDims::new(n, k, g, h).unwrap())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn one_hot_builds_exactly_omega(dims in dims_strategy(), pick in any::<prop::sample::Index>()) {
        let idx = pick.index(dims.kernel_len());
        let probe = KernelTensor::zeros(dims.k, dims.g, dims.h).unwrap();
        let (p, q, z, y) = probe.unflatten(idx);
        let hot = KernelTensor::one_hot(dims.k, dims.g, dims.h, p, q, z, y).unwrap();
        let m = build_multi(&hot, dims.n).unwrap();
        prop_assert!(m.entries().iter().all(|e| e.value == 1.0));
        let built: Vec<(usize, usize)> = m.entries().iter().map(|e| (e.row, e.col)).collect();
        let mut expected = omega(&dims, p, q, z, y).unwrap().positions;
        expected.sort_unstable();
        prop_assert_eq!(built, expected);
        prop_assert_eq!(m.nnz(), omega_count(&dims, p, q));
    }

    #[test]
    fn omega_sets_tile_the_matrix(dims in dims_strategy(), seed in any::<u64>()) {
        // Entries in (0.5, 1.5) so no stored value is zero.
        let kernel = random_kernel(&dims, seed, 0.5, 1.5).unwrap();
        let m = build_multi(&kernel, dims.n).unwrap();
        let mut seen = vec![0u8; m.nnz()];
        for idx in 0..kernel.len() {
            let (p, q, z, y) = kernel.unflatten(idx);
            for (r, c) in omega(&dims, p, q, z, y).unwrap().positions {
                let at = m.entries().binary_search_by(|e| (e.row, e.col).cmp(&(r, c)));
                prop_assert!(at.is_ok(), "({r},{c}) not stored");
                let at = at.unwrap();
                prop_assert_eq!(m.entries()[at].value, kernel.values()[idx]);
                seen[at] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn entries_respect_the_band(dims in dims_strategy(), seed in any::<u64>()) {
        let kernel = random_kernel(&dims, seed, 0.5, 1.5).unwrap();
        let m = build_multi(&kernel, dims.n).unwrap();
        let (n, k, c) = (dims.n as isize, dims.k as isize, dims.center() as isize);
        for e in m.entries() {
            let (row, col) = (e.row as isize - 1, e.col as isize - 1);
            let (r, s) = (row % (n * n) % n, row % (n * n) / n);
            let (i, j) = (col % (n * n) % n, col % (n * n) / n);
            // Input index = output index - m + p with p in 1..=k.
            prop_assert!((1 - c..=k - c).contains(&(i - r)));
            prop_assert!((1 - c..=k - c).contains(&(j - s)));
        }
    }

    #[test]
    fn operator_adjoint_and_matrix_agree(dims in dims_strategy(), seed in any::<u64>()) {
        let kernel = random_kernel(&dims, seed, -1.0, 1.0).unwrap();
        let m = build_multi(&kernel, dims.n).unwrap();
        let v: Vec<f64> = (0..dims.n_in()).map(|i| ((i * 37 + 11) % 17) as f64 / 8.0 - 1.0).collect();
        let w: Vec<f64> = (0..dims.n_out()).map(|i| ((i * 23 + 5) % 13) as f64 / 6.0 - 1.0).collect();
        let mv = apply_operator(&kernel, dims.n, &v).unwrap();
        let mtw = apply_adjoint(&kernel, dims.n, &w).unwrap();
        let explicit = m.matvec(&v).unwrap();
        let explicit_t = m.matvec_transpose(&w).unwrap();
        let scale = norm(&mv).max(1e-300);
        prop_assert!(mv.iter().zip(&explicit).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= 1e-12 * scale);
        prop_assert!(mtw.iter().zip(&explicit_t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) <= 1e-12 * norm(&mtw).max(1.0));
        let (lhs, rhs) = (dot(&mv, &w), dot(&v, &mtw));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (norm(&mv) * norm(&w)).max(1e-300));
    }

    #[test]
    fn frobenius_closed_form_entries_and_spectrum(dims in dims_strategy(), seed in any::<u64>()) {
        let kernel = random_kernel(&dims, seed, -1.0, 1.0).unwrap();
        let m = build_multi(&kernel, dims.n).unwrap();
        let closed = 2.0 * frob_penalty(&kernel, dims.n).unwrap();
        let from_entries = frobenius_norm_sq(&m);
        let from_sigma: f64 = singular_values(&m).unwrap().iter().map(|s| s * s).sum();
        prop_assert!((closed - from_entries).abs() <= 1e-12 * closed.max(1e-300));
        prop_assert!((closed - from_sigma).abs() <= 1e-10 * closed.max(1e-300));

        let grad = frob_gradient(&kernel, dims.n).unwrap();
        for idx in 0..kernel.len() {
            let (p, q, _, _) = kernel.unflatten(idx);
            prop_assert_eq!(grad.values()[idx], omega_count(&dims, p, q) as f64 * kernel.values()[idx]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectral_pairs_satisfy_their_residuals(dims in dims_strategy(), seed in any::<u64>()) {
        let kernel = random_kernel(&dims, seed, -1.0, 1.0).unwrap();
        let m = build_multi(&kernel, dims.n).unwrap();
        let pairs = SpectralSolver::default().extreme_pairs(&kernel, dims.n).unwrap();
        for pair in [&pairs.max, &pairs.min] {
            let mv = m.matvec(&pair.v).unwrap();
            let mtu = m.matvec_transpose(&pair.u).unwrap();
            let r1 = norm(&mv.iter().zip(&pair.u).map(|(a, b)| a - pair.sigma * b).collect::<Vec<_>>());
            let r2 = norm(&mtu.iter().zip(&pair.v).map(|(a, b)| a - pair.sigma * b).collect::<Vec<_>>());
            prop_assert!(r1 <= pair.residual + 1e-15 && r2 <= pair.residual + 1e-15);
            prop_assert!((pair_residual(&m, pair).unwrap() - pair.residual).abs() <= 1e-14 * pairs.max.sigma.max(1.0));
            prop_assert!(pair.residual <= 1e-8 * pairs.max.sigma.max(1e-300));
        }
        prop_assert!(pairs.min.sigma <= pairs.max.sigma);
    }

    #[test]
    fn iterative_sigma_max_brackets_dense(dims in dims_strategy(), seed in any::<u64>()) {
        let kernel = random_kernel(&dims, seed, -1.0, 1.0).unwrap();
        let dense = singular_values(&build_multi(&kernel, dims.n).unwrap()).unwrap()[0];
        let iter = sigma_max_iterative(&kernel, dims.n, 1e-10, 200_000).unwrap();
        prop_assert!((iter.sigma - dense).abs() <= 1e-8 * dense.max(1.0), "{} vs {}", iter.sigma, dense);
    }

    #[test]
    fn sigma_min_gradient_is_sign_invariant_and_bounded(seed in any::<u64>(), n in 3usize..=6, g in 1usize..=2, h in 1usize..=2) {
        let dims = ProblemDims::new(n, 3, g, h).unwrap();
        let kernel = random_kernel(&dims, seed, -1.0, 1.0).unwrap();
        let pair = SpectralSolver::default().extreme_pairs(&kernel, n).unwrap().min;
        prop_assume!(pair.gap > 1e-6 && pair.sigma > 1e-6);
        let flipped = SpectralPair {
            u: pair.u.iter().map(|x| -x).collect(),
            v: pair.v.iter().map(|x| -x).collect(),
            ..pair.clone()
        };
        let a = sigma_min_gradient(&kernel, n, &pair, 1e-8).unwrap();
        let b = sigma_min_gradient(&kernel, n, &flipped, 1e-8).unwrap();
        prop_assert_eq!(a.values(), b.values());
        prop_assert!(a.values().iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn short_runs_keep_trace_invariants(seed in any::<u64>(), kind in prop::sample::select(PenaltyKind::ALL.to_vec())) {
        let dims = ProblemDims::new(5, 3, 2, 1).unwrap();
        let k0 = random_kernel(&dims, seed, 0.0, 1.0).unwrap();
        let out = run(&k0, 5, &GdConfig::new(kind, 1e-3, 8)).unwrap();
        for r in &out.trace.records {
            prop_assert!(r.grad_norm.is_finite());
            prop_assert!(r.sigma_min <= r.sigma_max);
        }
        if kind == PenaltyKind::Frobenius {
            // Step below 1/(2 max|Ω|) = 1/50.
            prop_assert!(out.trace.records.windows(2).all(|w| w[1].penalty <= w[0].penalty));
        }
    }
}

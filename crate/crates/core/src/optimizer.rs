//! Fixed-step gradient descent `K ← K − λ·G` on one of the three penalties,
//! with `σ_max`/`σ_min` tracing.
//!
//! A run evaluates the state `K_t` at `t = 0, 1, …, max_iters`. Records are
//! taken at `t = 0`, every `trace_every` steps, and at the final state. A
//! `σ_min`-dependent run that meets a repeated or zero `σ_min` stops with
//! [`RunStatus::DegenerateSigma`] and keeps the records gathered so far.
//!
//! For the Frobenius penalty the objective is the diagonal quadratic
//! `½ Σ |Ω_{p,q}|·K²`, so any `λ ≤ 1/(2·max|Ω|)` (at most `1/(2N²)`) shrinks
//! every entry toward zero without overshoot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::regularizers::{gradient, penalty_from_sigma, PenaltyKind};
use crate::spectral::{ExtremePairs, SpectralSolver};
use crate::tensor::KernelTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Run all `max_iters` steps.
    FixedIterations,
    /// Stop once `σ_max ≤ hi` and `σ_min ≥ lo`.
    SigmaBand { lo: f64, hi: f64 },
    /// Stop once `‖G‖_F ≤ threshold`.
    GradNorm(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    pub kind: PenaltyKind,
    /// Step size `λ`.
    pub lr: f64,
    pub max_iters: usize,
    pub stop: StopRule,
    pub trace_every: usize,
    /// Seed recorded with the run; initialization uses it via [`init_kernel`].
    pub seed: u64,
    pub solver: SpectralSolver,
}

impl GdConfig {
    pub fn new(kind: PenaltyKind, lr: f64, max_iters: usize) -> Self {
        Self {
            kind,
            lr,
            max_iters,
            stop: StopRule::FixedIterations,
            trace_every: 1,
            seed: 1,
            solver: SpectralSolver::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidConfig("trace_every must be at least 1".into()));
        }
        match self.stop {
            StopRule::SigmaBand { lo, hi } if !(lo < hi) => {
                Err(Error::InvalidConfig(format!("sigma band needs lo < hi, got [{lo}, {hi}]")))
            }
            StopRule::GradNorm(t) if !(t > 0.0) => {
                Err(Error::InvalidConfig(format!("gradient-norm threshold must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub penalty: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: &str = "iter,penalty,sigma_max,sigma_min,grad_norm,wall_ms";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// CSV text with [`TRACE_HEADER`]. With `include_wall = false` the
    /// `wall_ms` column is left empty, which makes the output reproducible.
    pub fn to_csv(&self, include_wall: bool) -> String {
        let mut out = String::with_capacity(96 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},",
                r.iter, r.penalty, r.sigma_max, r.sigma_min, r.grad_norm
            );
            if include_wall {
                let _ = write!(out, "{:.3}", r.wall_ms);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(true)).map_err(|e| Error::io(path, e))
    }

    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIters,
    DegenerateSigma,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIters => "max-iters",
            RunStatus::DegenerateSigma => "degenerate-sigma",
        }
    }
}

/// Penalty and extreme singular values of one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub penalty: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kernel: KernelTensor,
    pub trace: Trace,
    pub status: RunStatus,
    /// Number of updates applied.
    pub iters: usize,
    pub initial: Snapshot,
    pub last: Snapshot,
    /// Recorded iterations at which `σ_min` fell below the previous record
    /// during a `σ_min` ascent run (step too large or near-degenerate spectrum).
    pub sigma_min_drops: Vec<usize>,
}

/// Runs gradient descent from `k0` on `n × n` inputs.
pub fn run(k0: &KernelTensor, n: usize, cfg: &GdConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut kernel = k0.clone();
    let mut trace = Trace::default();
    let mut initial = None;
    let mut sigma_min_drops = Vec::new();

    for t in 0..=cfg.max_iters {
        let record_due = t % cfg.trace_every == 0 || t == cfg.max_iters;
        let need_now = cfg.kind.needs_spectrum() || matches!(cfg.stop, StopRule::SigmaBand { .. });
        let mut pairs: Option<ExtremePairs> = if need_now || record_due {
            Some(cfg.solver.extreme_pairs(&kernel, n)?)
        } else {
            None
        };

        let snapshot = |pairs: &ExtremePairs| -> Result<Snapshot> {
            Ok(Snapshot {
                penalty: penalty_from_sigma(&kernel, n, cfg.kind, pairs.min.sigma)?,
                sigma_max: pairs.max.sigma,
                sigma_min: pairs.min.sigma,
            })
        };
        if t == 0 {
            let p = pairs.as_ref().expect("t = 0 is always a record point");
            initial = Some(snapshot(p)?);
        }

        let grad = match gradient(
            &kernel,
            n,
            cfg.kind,
            pairs.as_ref().map(|p| &p.min),
            cfg.solver.gap_threshold,
        ) {
            Ok(g) => g,
            Err(Error::DegenerateSpectrum { .. }) => {
                let p = pairs.as_ref().expect("sigma_min penalties always compute pairs");
                let last = snapshot(p)?;
                return Ok(RunOutcome {
                    kernel,
                    trace,
                    status: RunStatus::DegenerateSigma,
                    iters: t,
                    initial: initial.unwrap_or(last),
                    last,
                    sigma_min_drops,
                });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.norm();

        let converged = match cfg.stop {
            StopRule::FixedIterations => false,
            StopRule::SigmaBand { lo, hi } => {
                let p = pairs.as_ref().expect("band rule computes pairs");
                p.max.sigma <= hi && p.min.sigma >= lo
            }
            StopRule::GradNorm(threshold) => grad_norm <= threshold,
        };
        let finished = converged || t == cfg.max_iters;

        if record_due || finished {
            if pairs.is_none() {
                pairs = Some(cfg.solver.extreme_pairs(&kernel, n)?);
            }
            let snap = snapshot(pairs.as_ref().expect("just computed"))?;
            if cfg.kind == PenaltyKind::NegSigmaMin && trace.last().is_some_and(|prev| snap.sigma_min < prev.sigma_min) {
                sigma_min_drops.push(t);
            }
            trace.records.push(TraceRecord {
                iter: t,
                penalty: snap.penalty,
                sigma_max: snap.sigma_max,
                sigma_min: snap.sigma_min,
                grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if finished {
                return Ok(RunOutcome {
                    kernel,
                    trace,
                    status: if converged { RunStatus::Converged } else { RunStatus::MaxIters },
                    iters: t,
                    initial: initial.expect("set at t = 0"),
                    last: snap,
                    sigma_min_drops,
                });
            }
        }

        kernel = grad.step(&kernel, cfg.lr)?;
    }
    unreachable!("loop returns at t = max_iters")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitScheme {
    /// i.i.d. uniform on `[0, 1)` from ChaCha8 seeded with `seed`.
    Uniform01,
    /// Kernel text file; its shape must match the requested one.
    File(PathBuf),
}

pub fn init_kernel(k: usize, g: usize, h: usize, seed: u64, scheme: &InitScheme) -> Result<KernelTensor> {
    match scheme {
        InitScheme::Uniform01 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..k * k * g * h).map(|_| rng.random::<f64>()).collect();
            KernelTensor::new(k, g, h, values)
        }
        InitScheme::File(path) => {
            let kernel = KernelTensor::read(path)?;
            kernel.check_same_shape(k, g, h)?;
            Ok(kernel)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_frobenius_step_from_identity() {
        let k0 = KernelTensor::identity_center(3, 1, 1).unwrap();
        let out = run(&k0, 20, &GdConfig::new(PenaltyKind::Frobenius, 1e-5, 1)).unwrap();
        assert!((out.kernel.get(2, 2, 1, 1).unwrap() - 0.996).abs() <= 1e-15);
        assert_eq!(out.iters, 1);
        assert_eq!(out.status, RunStatus::MaxIters);
        assert_eq!(out.trace.records.len(), 2);
    }

    #[test]
    fn zero_kernel_is_fixed_point() {
        let k0 = KernelTensor::zeros(3, 1, 1).unwrap();
        let mut cfg = GdConfig::new(PenaltyKind::Frobenius, 1e-3, 5);
        cfg.trace_every = 2;
        let out = run(&k0, 6, &cfg).unwrap();
        assert_eq!(out.kernel, k0);
        let iters: Vec<usize> = out.trace.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 2, 4, 5]);
        assert!(out.trace.records.iter().all(|r| r.penalty == 0.0 && r.grad_norm == 0.0));
    }

    #[test]
    fn identity_under_sigma_min_is_degenerate() {
        let k0 = KernelTensor::identity_center(3, 1, 1).unwrap();
        for kind in [PenaltyKind::NegSigmaMin, PenaltyKind::Combined] {
            let out = run(&k0, 8, &GdConfig::new(kind, 1e-4, 10)).unwrap();
            assert_eq!(out.status, RunStatus::DegenerateSigma);
            assert_eq!(out.iters, 0);
            assert!(out.trace.records.is_empty());
            assert!((out.initial.sigma_min - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GdConfig::new(PenaltyKind::Frobenius, 0.0, 1);
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-3;
        assert!(cfg.validate().is_ok());
        cfg.stop = StopRule::SigmaBand { lo: 2.0, hi: 1.0 };
        assert!(cfg.validate().is_err());
        cfg.stop = StopRule::GradNorm(-1.0);
        assert!(cfg.validate().is_err());
        cfg.stop = StopRule::FixedIterations;
        cfg.trace_every = 0;
        assert!(cfg.validate().is_err());
        cfg.trace_every = 1;
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sigma_band_stops_early() {
        let k0 = init_kernel(3, 1, 1, 7, &InitScheme::Uniform01).unwrap();
        let mut cfg = GdConfig::new(PenaltyKind::Frobenius, 1e-3, 10_000);
        cfg.trace_every = 1000;
        cfg.stop = StopRule::SigmaBand { lo: 0.0, hi: 1.0 };
        let out = run(&k0, 6, &cfg).unwrap();
        assert_eq!(out.status, RunStatus::Converged);
        assert!(out.iters < 10_000);
        let last = out.trace.last().unwrap();
        assert_eq!(last.iter, out.iters);
        assert!(last.sigma_max <= 1.0);
    }

    #[test]
    fn grad_norm_rule_stops() {
        let k0 = init_kernel(3, 1, 1, 8, &InitScheme::Uniform01).unwrap();
        let mut cfg = GdConfig::new(PenaltyKind::Frobenius, 1e-2, 10_000);
        cfg.stop = StopRule::GradNorm(1e-3);
        cfg.trace_every = 50;
        let out = run(&k0, 4, &cfg).unwrap();
        assert_eq!(out.status, RunStatus::Converged);
        assert!(out.trace.last().unwrap().grad_norm <= 1e-3);
    }

    #[test]
    fn frobenius_penalty_monotone_under_step_bound() {
        let k0 = init_kernel(3, 2, 2, 9, &InitScheme::Uniform01).unwrap();
        let n = 6;
        let lr = 1.0 / (2.0 * (n * n) as f64);
        let out = run(&k0, n, &GdConfig::new(PenaltyKind::Frobenius, lr, 30)).unwrap();
        for w in out.trace.records.windows(2) {
            assert!(w[1].penalty <= w[0].penalty);
        }
    }

    #[test]
    fn init_is_deterministic_and_in_unit_interval() {
        let a = init_kernel(3, 2, 3, 42, &InitScheme::Uniform01).unwrap();
        let b = init_kernel(3, 2, 3, 42, &InitScheme::Uniform01).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..1.0).contains(v)));
        assert_ne!(a, init_kernel(3, 2, 3, 43, &InitScheme::Uniform01).unwrap());
        let one = init_kernel(3, 1, 1, 1, &InitScheme::Uniform01).unwrap();
        let mean = one.values().iter().sum::<f64>() / 9.0;
        assert!((0.3..=0.7).contains(&mean), "mean {mean}");
    }

    #[test]
    fn init_from_file() {
        let dir = std::env::temp_dir().join(format!("convreg-init-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("k.txt");
        let kern = init_kernel(3, 1, 2, 5, &InitScheme::Uniform01).unwrap();
        kern.write(&path).unwrap();
        assert_eq!(init_kernel(3, 1, 2, 0, &InitScheme::File(path.clone())).unwrap(), kern);
        assert!(init_kernel(3, 2, 1, 0, &InitScheme::File(path.clone())).is_err());
        assert!(matches!(
            init_kernel(3, 1, 2, 0, &InitScheme::File(dir.join("missing.txt"))),
            Err(Error::Io { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_layout() {
        let trace = Trace {
            records: vec![TraceRecord {
                iter: 3,
                penalty: 1.5,
                sigma_max: 2.0,
                sigma_min: 0.25,
                grad_norm: 0.1,
                wall_ms: 12.3456,
            }],
        };
        let csv = trace.to_csv(true);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 6);
        assert_eq!(row[0], "3");
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(row[5], "12.346");
        assert!(trace.to_csv(false).lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn sigma_min_drops_are_logged_for_oversized_steps() {
        let k0 = init_kernel(3, 1, 1, 3, &InitScheme::Uniform01).unwrap();
        let gentle = run(&k0, 6, &GdConfig::new(PenaltyKind::NegSigmaMin, 1e-4, 20)).unwrap();
        assert!(gentle.sigma_min_drops.is_empty());
        assert!(gentle.last.sigma_min > gentle.initial.sigma_min);
        let wild = run(&k0, 6, &GdConfig::new(PenaltyKind::NegSigmaMin, 2.0, 20)).unwrap();
        assert!(!wild.sigma_min_drops.is_empty(), "{:?}", wild.trace.records);
    }
}

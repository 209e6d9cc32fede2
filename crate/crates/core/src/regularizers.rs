//! Penalties on the singular values of `M` and their exact gradients with
//! respect to the kernel.
//!
//! Every kernel entry `K_{p,q,z,y}` appears in `M` at the positions
//! `Ω_{p,q,z,y}`, so by the chain rule
//!
//! ```text
//! ∂f/∂K_{p,q,z,y} = Σ_{(i,j) ∈ Ω_{p,q,z,y}} ∂f/∂m_{ij}.
//! ```
//!
//! For `f = ½‖M‖²_F` the inner derivative is `m_{ij} = K_{p,q,z,y}`, giving
//! `|Ω_{p,q}|·K_{p,q,z,y}`. For a simple, positive `σ_min` with unit
//! singular vectors `u, v`, `∂σ_min/∂m_{ij} = u(i)·v(j)`.

use std::fmt;
use std::str::FromStr;

use crate::par::*;
use crate::spectral::{simplicity_check, SimplicityStatus, SpectralPair, SpectralSolver};
use crate::structured::{omega, omega_count};
use crate::tensor::{KernelTensor, ProblemDims};
use crate::{Error, Result};

/// Which penalty `R(K)` gradient descent minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyKind {
    /// `½‖M‖²_F`
    Frobenius,
    /// `−σ_min(M)`
    NegSigmaMin,
    /// `½‖M‖²_F − min(g,h)·N²·σ_min(M)`
    Combined,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 3] = [PenaltyKind::Frobenius, PenaltyKind::NegSigmaMin, PenaltyKind::Combined];

    pub fn needs_spectrum(self) -> bool {
        !matches!(self, PenaltyKind::Frobenius)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::Frobenius => "frob",
            PenaltyKind::NegSigmaMin => "sigma-min",
            PenaltyKind::Combined => "combined",
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frob" | "frobenius" => Ok(PenaltyKind::Frobenius),
            "sigma-min" | "sigma_min" => Ok(PenaltyKind::NegSigmaMin),
            "combined" => Ok(PenaltyKind::Combined),
            other => Err(Error::InvalidConfig(format!(
                "unknown penalty {other:?} (expected frob, sigma-min or combined)"
            ))),
        }
    }
}

/// Weight of `σ_min` in the combined penalty: `min(g,h)·N²`.
pub fn combined_scale(dims: &ProblemDims) -> f64 {
    dims.rank_bound() as f64
}

/// `∂R/∂K`, same shape and storage order as the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTensor {
    k: usize,
    g: usize,
    h: usize,
    values: Vec<f64>,
}

impl GradientTensor {
    pub fn new(k: usize, g: usize, h: usize, values: Vec<f64>) -> Result<Self> {
        // Reuse the kernel's shape and finiteness checks.
        let checked = KernelTensor::new(k, g, h, values)?;
        Ok(Self {
            k,
            g,
            h,
            values: checked.into_values(),
        })
    }

    pub fn zeros_like(kernel: &KernelTensor) -> Self {
        Self {
            k: kernel.k(),
            g: kernel.g(),
            h: kernel.h(),
            values: vec![0.0; kernel.len()],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.k, self.k, self.g, self.h)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: usize, q: usize, z: usize, y: usize) -> Result<f64> {
        let idx = KernelTensor::zeros(self.k, self.g, self.h)?.flat_index(p, q, z, y)?;
        Ok(self.values[idx])
    }

    /// Frobenius norm `‖G‖_F`.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(self.k, self.g, self.h, self.values.iter().map(|v| a * v).collect())
    }

    /// `a·self + b·other`.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidDims("gradient shapes differ".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.k, self.g, self.h, values)
    }

    /// The descent update `K − λ·G`.
    pub fn step(&self, kernel: &KernelTensor, lr: f64) -> Result<KernelTensor> {
        kernel.check_same_shape(self.k, self.g, self.h)?;
        let values = kernel.values().iter().zip(&self.values).map(|(k, g)| k - lr * g).collect();
        KernelTensor::new(self.k, self.g, self.h, values)
    }
}

fn kernel_dims(kernel: &KernelTensor, n: usize) -> Result<ProblemDims> {
    ProblemDims::for_kernel(kernel, n)
}

/// `½‖M‖²_F = ½ Σ |Ω_{p,q}|·K²_{p,q,z,y}`, without building `M`.
pub fn frob_penalty(kernel: &KernelTensor, n: usize) -> Result<f64> {
    let dims = kernel_dims(kernel, n)?;
    Ok(0.5
        * kernel
            .values()
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let (p, q, _, _) = kernel.unflatten(idx);
                omega_count(&dims, p, q) as f64 * v * v
            })
            .sum::<f64>())
}

/// `G_{p,q,z,y} = |Ω_{p,q}|·K_{p,q,z,y}`.
pub fn frob_gradient(kernel: &KernelTensor, n: usize) -> Result<GradientTensor> {
    let dims = kernel_dims(kernel, n)?;
    let values = kernel
        .values()
        .iter()
        .enumerate()
        .map(|(idx, v)| {
            let (p, q, _, _) = kernel.unflatten(idx);
            omega_count(&dims, p, q) as f64 * v
        })
        .collect();
    GradientTensor::new(kernel.k(), kernel.g(), kernel.h(), values)
}

/// `G_{p,q,z,y} = Σ_{(i,j)∈Ω} u(i)·v(j)` for the `σ_min` pair.
///
/// Refuses with [`Error::DegenerateSpectrum`] unless the pair passes
/// [`simplicity_check`] at `gap_threshold`. The result does not depend on
/// the sign of `(u, v)`.
pub fn sigma_min_gradient(
    kernel: &KernelTensor,
    n: usize,
    pair: &SpectralPair,
    gap_threshold: f64,
) -> Result<GradientTensor> {
    let dims = kernel_dims(kernel, n)?;
    if pair.u.len() != dims.n_out() {
        return Err(Error::LengthMismatch {
            expected: dims.n_out(),
            actual: pair.u.len(),
        });
    }
    if pair.v.len() != dims.n_in() {
        return Err(Error::LengthMismatch {
            expected: dims.n_in(),
            actual: pair.v.len(),
        });
    }
    if simplicity_check(pair, gap_threshold) == SimplicityStatus::Degenerate {
        return Err(Error::DegenerateSpectrum {
            sigma: pair.sigma,
            gap: pair.gap,
        });
    }
    let values = (0..kernel.len())
        .into_par_iter()
        .map(|idx| {
            let (p, q, z, y) = kernel.unflatten(idx);
            let set = omega(&dims, p, q, z, y).expect("index from unflatten is in range");
            set.positions.iter().map(|&(i, j)| pair.u[i - 1] * pair.v[j - 1]).sum()
        })
        .collect();
    GradientTensor::new(kernel.k(), kernel.g(), kernel.h(), values)
}

/// Gradient of `½‖M‖²_F − min(g,h)·N²·σ_min(M)`.
pub fn combined_gradient(
    kernel: &KernelTensor,
    n: usize,
    pair: &SpectralPair,
    gap_threshold: f64,
) -> Result<GradientTensor> {
    let dims = kernel_dims(kernel, n)?;
    let frob = frob_gradient(kernel, n)?;
    let sigma = sigma_min_gradient(kernel, n, pair, gap_threshold)?;
    frob.lin_comb(1.0, &sigma, -combined_scale(&dims))
}

/// Penalty value from an already computed `σ_min`.
pub fn penalty_from_sigma(kernel: &KernelTensor, n: usize, kind: PenaltyKind, sigma_min: f64) -> Result<f64> {
    let dims = kernel_dims(kernel, n)?;
    Ok(match kind {
        PenaltyKind::Frobenius => frob_penalty(kernel, n)?,
        PenaltyKind::NegSigmaMin => -sigma_min,
        PenaltyKind::Combined => frob_penalty(kernel, n)? - combined_scale(&dims) * sigma_min,
    })
}

/// `R(K)` for the selected kind; runs the spectral solver when `σ_min` is
/// involved.
pub fn penalty_value(kernel: &KernelTensor, n: usize, kind: PenaltyKind, solver: &SpectralSolver) -> Result<f64> {
    let sigma_min = if kind.needs_spectrum() {
        solver.extreme_pairs(kernel, n)?.min.sigma
    } else {
        0.0
    };
    penalty_from_sigma(kernel, n, kind, sigma_min)
}

/// Gradient of the selected penalty given the `σ_min` pair (ignored for
/// [`PenaltyKind::Frobenius`]).
pub fn gradient(
    kernel: &KernelTensor,
    n: usize,
    kind: PenaltyKind,
    min_pair: Option<&SpectralPair>,
    gap_threshold: f64,
) -> Result<GradientTensor> {
    let need_pair = || Error::InvalidConfig(format!("penalty {kind} needs the sigma_min pair"));
    match kind {
        PenaltyKind::Frobenius => frob_gradient(kernel, n),
        PenaltyKind::NegSigmaMin => {
            sigma_min_gradient(kernel, n, min_pair.ok_or_else(need_pair)?, gap_threshold)?.scaled(-1.0)
        }
        PenaltyKind::Combined => combined_gradient(kernel, n, min_pair.ok_or_else(need_pair)?, gap_threshold),
    }
}

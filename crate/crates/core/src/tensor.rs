//! Kernel, input and output tensors and the `vec` maps that tie them to the
//! columns and rows of the structured matrix.
//!
//! Storage order is the `vec` order: the first index varies fastest, then
//! the second, then the channel. For an input `X ∈ ℝ^{N×N×g}` the entry
//! `X_{i,j,d}` lives at flat position `(d−1)N² + (j−1)N + (i−1)`; kernels use
//! the same rule with `(p, q, z, y)`. All public accessors take 1-based
//! indices.
//!
//! The text format shared by kernels and inputs is a header line of
//! dimensions (`k k g h` for kernels, `N N g` for inputs) followed by the
//! values in storage order, written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Sizes of one convolution problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProblemDims {
    /// Spatial side length of input and output.
    pub n: usize,
    /// Filter side length.
    pub k: usize,
    /// Input channels.
    pub g: usize,
    /// Output channels.
    pub h: usize,
}

impl ProblemDims {
    pub fn new(n: usize, k: usize, g: usize, h: usize) -> Result<Self> {
        if n == 0 || k == 0 || g == 0 || h == 0 {
            return Err(Error::InvalidDims(format!(
                "N={n}, k={k}, g={g}, h={h}: all must be positive"
            )));
        }
        Ok(Self { n, k, g, h })
    }

    /// Dimensions for running `kernel` on `n × n` inputs.
    pub fn for_kernel(kernel: &KernelTensor, n: usize) -> Result<Self> {
        Self::new(n, kernel.k(), kernel.g(), kernel.h())
    }

    /// Center offset `m = ⌈k/2⌉`.
    pub fn center(&self) -> usize {
        self.k.div_ceil(2)
    }

    /// `N²`, the side of one channel block of `M`.
    pub fn plane(&self) -> usize {
        self.n * self.n
    }

    /// Columns of `M`: `g·N²`.
    pub fn n_in(&self) -> usize {
        self.g * self.plane()
    }

    /// Rows of `M`: `h·N²`.
    pub fn n_out(&self) -> usize {
        self.h * self.plane()
    }

    /// Number of kernel entries `k²gh`.
    pub fn kernel_len(&self) -> usize {
        self.k * self.k * self.g * self.h
    }

    /// `min(g, h)·N²`, the number of singular values of `M`.
    pub fn rank_bound(&self) -> usize {
        self.g.min(self.h) * self.plane()
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Convolution kernel `K ∈ ℝ^{k×k×g×h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    k: usize,
    g: usize,
    h: usize,
    values: Vec<f64>,
}

impl KernelTensor {
    pub fn new(k: usize, g: usize, h: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || g == 0 || h == 0 {
            return Err(Error::InvalidDims(format!(
                "kernel {k}x{k}x{g}x{h}: all sizes must be positive"
            )));
        }
        let expected = k * k * g * h;
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self { k, g, h, values })
    }

    pub fn zeros(k: usize, g: usize, h: usize) -> Result<Self> {
        Self::new(k, g, h, vec![0.0; k * k * g * h])
    }

    /// Builds a kernel from a function of the 1-based index `(p, q, z, y)`.
    pub fn from_fn(
        k: usize,
        g: usize,
        h: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(k * k * g * h);
        for y in 1..=h {
            for z in 1..=g {
                for q in 1..=k {
                    for p in 1..=k {
                        values.push(f(p, q, z, y));
                    }
                }
            }
        }
        Self::new(k, g, h, values)
    }

    /// Kernel with a 1 at the center tap of every `z == y` channel pair.
    /// For `g = h = 1` its structured matrix is the identity.
    pub fn identity_center(k: usize, g: usize, h: usize) -> Result<Self> {
        let m = k.div_ceil(2);
        Self::from_fn(k, g, h, |p, q, z, y| {
            if p == m && q == m && z == y {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Kernel with a single 1 at `(p, q, z, y)`.
    pub fn one_hot(k: usize, g: usize, h: usize, p: usize, q: usize, z: usize, y: usize) -> Result<Self> {
        let mut kernel = Self::zeros(k, g, h)?;
        let idx = kernel.flat_index(p, q, z, y)?;
        kernel.values[idx] = 1.0;
        Ok(kernel)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in storage order (`p` fastest, then `q`, `z`, `y`).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn flat_index(&self, p: usize, q: usize, z: usize, y: usize) -> Result<usize> {
        let (k, g, h) = (self.k, self.g, self.h);
        if !(1..=k).contains(&p) || !(1..=k).contains(&q) || !(1..=g).contains(&z) || !(1..=h).contains(&y) {
            return Err(Error::IndexOutOfRange { p, q, z, y, k, g, h });
        }
        Ok((p - 1) + k * ((q - 1) + k * ((z - 1) + g * (y - 1))))
    }

    /// Inverse of [`flat_index`](Self::flat_index); panics if `idx` is out of range.
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize, usize) {
        assert!(idx < self.values.len(), "flat index {idx} out of range");
        let k = self.k;
        let p = idx % k;
        let q = (idx / k) % k;
        let z = (idx / (k * k)) % self.g;
        let y = idx / (k * k * self.g);
        (p + 1, q + 1, z + 1, y + 1)
    }

    pub fn get(&self, p: usize, q: usize, z: usize, y: usize) -> Result<f64> {
        Ok(self.values[self.flat_index(p, q, z, y)?])
    }

    pub fn set(&mut self, p: usize, q: usize, z: usize, y: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(self.flat_index(p, q, z, y)?));
        }
        let idx = self.flat_index(p, q, z, y)?;
        self.values[idx] = value;
        Ok(())
    }

    /// Copy with `delta` added to the entry at flat index `idx`.
    pub fn perturbed(&self, idx: usize, delta: f64) -> Result<Self> {
        let mut values = self.values.clone();
        let slot = values.get_mut(idx).ok_or(Error::LengthMismatch {
            expected: self.values.len(),
            actual: idx + 1,
        })?;
        *slot += delta;
        Self::new(self.k, self.g, self.h, values)
    }

    /// `a·self`, entrywise.
    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(self.k, self.g, self.h, self.values.iter().map(|v| a * v).collect())
    }

    /// `a·self + b·other`, entrywise. Shapes must agree.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_same_shape(other.k, other.g, other.h)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.k, self.g, self.h, values)
    }

    /// Channel slice `K_{:,:,z,y}` as a single-channel kernel.
    pub fn slice(&self, z: usize, y: usize) -> Result<Self> {
        let start = self.flat_index(1, 1, z, y)?;
        let kk = self.k * self.k;
        Self::new(self.k, 1, 1, self.values[start..start + kk].to_vec())
    }

    pub(crate) fn check_same_shape(&self, k: usize, g: usize, h: usize) -> Result<()> {
        if (self.k, self.g, self.h) != (k, g, h) {
            return Err(Error::InvalidDims(format!(
                "shape {}x{}x{}x{} does not match {k}x{k}x{g}x{h}",
                self.k, self.k, self.g, self.h
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        write_text(&[self.k, self.k, self.g, self.h], &self.values)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, values) = parse_text(text, 4, "kernel")?;
        if header[0] != header[1] {
            return Err(Error::parse("kernel", "first two header fields must be equal (k k g h)"));
        }
        Self::new(header[0], header[2], header[3], values)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Input `X ∈ ℝ^{N×N×g}`, stored in `vec` order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    n: usize,
    g: usize,
    values: Vec<f64>,
}

/// Output `Y ∈ ℝ^{N×N×h}`, stored in `vec` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTensor {
    n: usize,
    h: usize,
    values: Vec<f64>,
}

macro_rules! spatial_tensor {
    ($ty:ident, $chan:ident, $what:literal) => {
        impl $ty {
            pub fn new(n: usize, $chan: usize, values: Vec<f64>) -> Result<Self> {
                if n == 0 || $chan == 0 {
                    return Err(Error::InvalidDims(format!(
                        concat!($what, " {}x{}x{}: all sizes must be positive"),
                        n, n, $chan
                    )));
                }
                let expected = n * n * $chan;
                if values.len() != expected {
                    return Err(Error::LengthMismatch {
                        expected,
                        actual: values.len(),
                    });
                }
                check_finite(&values)?;
                Ok(Self { n, $chan, values })
            }

            pub fn zeros(n: usize, $chan: usize) -> Result<Self> {
                Self::new(n, $chan, vec![0.0; n * n * $chan])
            }

            /// Builds the tensor from a function of the 1-based `(i, j, channel)`.
            pub fn from_fn(
                n: usize,
                $chan: usize,
                mut f: impl FnMut(usize, usize, usize) -> f64,
            ) -> Result<Self> {
                let mut values = Vec::with_capacity(n * n * $chan);
                for c in 1..=$chan {
                    for j in 1..=n {
                        for i in 1..=n {
                            values.push(f(i, j, c));
                        }
                    }
                }
                Self::new(n, $chan, values)
            }

            pub fn n(&self) -> usize {
                self.n
            }

            pub fn $chan(&self) -> usize {
                self.$chan
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            /// Entry at 1-based `(i, j, channel)`; `None` outside the tensor.
            pub fn get(&self, i: usize, j: usize, c: usize) -> Option<f64> {
                let n = self.n;
                if (1..=n).contains(&i) && (1..=n).contains(&j) && (1..=self.$chan).contains(&c) {
                    Some(self.values[(c - 1) * n * n + (j - 1) * n + (i - 1)])
                } else {
                    None
                }
            }

            pub fn to_text(&self) -> String {
                write_text(&[self.n, self.n, self.$chan], &self.values)
            }

            pub fn from_text(text: &str) -> Result<Self> {
                let (header, values) = parse_text(text, 3, $what)?;
                if header[0] != header[1] {
                    return Err(Error::parse($what, "first two header fields must be equal (N N c)"));
                }
                Self::new(header[0], header[2], values)
            }
        }
    };
}

spatial_tensor!(InputTensor, g, "input");
spatial_tensor!(OutputTensor, h, "output");

/// `vec(X)`: entry `(d−1)N² + (j−1)N + i` (1-based) holds `X_{i,j,d}`.
pub fn vec_input(x: &InputTensor) -> Vec<f64> {
    x.values.clone()
}

/// `vec(Y)`, same convention as [`vec_input`] with channel `c`.
pub fn vec_output(y: &OutputTensor) -> Vec<f64> {
    y.values.clone()
}

pub fn unvec_input(v: &[f64], dims: &ProblemDims) -> Result<InputTensor> {
    if v.len() != dims.n_in() {
        return Err(Error::LengthMismatch {
            expected: dims.n_in(),
            actual: v.len(),
        });
    }
    InputTensor::new(dims.n, dims.g, v.to_vec())
}

pub fn unvec_output(v: &[f64], dims: &ProblemDims) -> Result<OutputTensor> {
    if v.len() != dims.n_out() {
        return Err(Error::LengthMismatch {
            expected: dims.n_out(),
            actual: v.len(),
        });
    }
    OutputTensor::new(dims.n, dims.h, v.to_vec())
}

fn write_text(header: &[usize], values: &[f64]) -> String {
    let mut out = String::with_capacity(24 * (values.len() + 1));
    let header: Vec<String> = header.iter().map(|d| d.to_string()).collect();
    out.push_str(&header.join(" "));
    out.push('\n');
    for v in values {
        // {:.16e} prints 17 significant digits, enough to round-trip any f64.
        let _ = writeln!(out, "{v:.16e}");
    }
    out
}

fn parse_text(text: &str, header_len: usize, context: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(context, "empty file"))?;
    let header = header_line
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::parse(context, format!("bad header field {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if header.len() != header_len {
        return Err(Error::parse(
            context,
            format!("header has {} fields, expected {header_len}", header.len()),
        ));
    }
    let values = lines
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(context, format!("bad value {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let expected: usize = header[0] * header[1] * header[2..].iter().product::<usize>();
    if values.len() != expected {
        return Err(Error::parse(
            context,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok((header, values))
}

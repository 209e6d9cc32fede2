//! Explicit structured matrix `M` with `vec(K ∗ X) = M·vec(X)`.
//!
//! `M` is `hN² × gN²`; block `(c, d)` occupies rows `(c−1)N²+1 ..= cN²` and
//! columns `(d−1)N²+1 ..= dN²` and is the doubly block banded Toeplitz
//! matrix of the slice `K_{:,:,d,c}`. Within a block, row `(s−1)N + r` and
//! column `(j−1)N + i` hold `K_{p,q,d,c}` exactly when `i = r − m + p` and
//! `j = s − m + q`. For `k = 3` that gives the familiar layout: diagonal
//! blocks carry `k_{12}, k_{22}, k_{32}` on their sub-, main and
//! superdiagonal; the block sub- and superdiagonals repeat the pattern with
//! the first and third kernel columns.
//!
//! Positions here are 1-based `(row, col)`, the same convention Matrix
//! Market uses. Exact zeros of the kernel are not stored.

use std::fmt::Write as _;
use std::io::Write;

use crate::tensor::{KernelTensor, ProblemDims};
use crate::{Error, Result};

/// One stored entry of `M` (1-based position).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse `M`, entries sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMatrix {
    dims: ProblemDims,
    entries: Vec<Entry>,
}

/// Positions of `M` that hold kernel entry `(p, q, z, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmegaIndexSet {
    pub index: (usize, usize, usize, usize),
    /// 1-based `(row, col)` pairs sorted by row. Rows are distinct, and so
    /// are columns.
    pub positions: Vec<(usize, usize)>,
}

impl OmegaIndexSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Observed band widths of the channel blocks, in units of `N×N` blocks
/// (outer) and of scalar diagonals inside a block (inner).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Bandwidth {
    pub outer_lower: usize,
    pub outer_upper: usize,
    pub inner_lower: usize,
    pub inner_upper: usize,
}

impl StructuredMatrix {
    pub fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    pub fn n_rows(&self) -> usize {
        self.dims.n_out()
    }

    pub fn n_cols(&self) -> usize {
        self.dims.n_in()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Value at 1-based `(row, col)`; zero where nothing is stored.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.row, e.col).cmp(&(row, col)))
            .map(|i| self.entries[i].value)
            .unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols() {
            return Err(Error::LengthMismatch {
                expected: self.n_cols(),
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.n_rows()];
        for e in &self.entries {
            out[e.row - 1] += e.value * x[e.col - 1];
        }
        Ok(out)
    }

    pub fn matvec_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                expected: self.n_rows(),
                actual: w.len(),
            });
        }
        let mut out = vec![0.0; self.n_cols()];
        for e in &self.entries {
            out[e.col - 1] += e.value * w[e.row - 1];
        }
        Ok(out)
    }

    /// Dense copy, used by the SVD backend.
    pub fn to_dense(&self) -> faer::Mat<f64> {
        let mut dense = faer::Mat::<f64>::zeros(self.n_rows(), self.n_cols());
        for e in &self.entries {
            dense[(e.row - 1, e.col - 1)] = e.value;
        }
        dense
    }

    pub fn bandwidth(&self) -> Bandwidth {
        let n = self.dims.n;
        let plane = self.dims.plane();
        let mut bw = Bandwidth::default();
        for e in &self.entries {
            let (ri, ci) = ((e.row - 1) % plane, (e.col - 1) % plane);
            let (s, r) = (ri / n, ri % n);
            let (j, i) = (ci / n, ci % n);
            bw.outer_lower = bw.outer_lower.max(s.saturating_sub(j));
            bw.outer_upper = bw.outer_upper.max(j.saturating_sub(s));
            bw.inner_lower = bw.inner_lower.max(r.saturating_sub(i));
            bw.inner_upper = bw.inner_upper.max(i.saturating_sub(r));
        }
        bw
    }

    /// Writes `M` in Matrix Market coordinate format.
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        let d = &self.dims;
        writeln!(out, "% convolution operator: N={} k={} g={} h={}", d.n, d.k, d.g, d.h)?;
        writeln!(out, "{} {} {}", self.n_rows(), self.n_cols(), self.nnz())?;
        let mut line = String::with_capacity(48);
        for e in &self.entries {
            line.clear();
            let _ = writeln!(line, "{} {} {:.16e}", e.row, e.col, e.value);
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Sparse matrix read back from a Matrix Market coordinate file.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<Entry>,
}

/// Parses `%%MatrixMarket matrix coordinate real general` text.
pub fn read_matrix_market(text: &str) -> Result<CoordinateMatrix> {
    let ctx = "matrix market";
    let mut lines = text.lines();
    let banner = lines.next().ok_or_else(|| Error::parse(ctx, "empty input"))?;
    let banner_fields: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    if banner_fields != ["%%matrixmarket", "matrix", "coordinate", "real", "general"] {
        return Err(Error::parse(ctx, format!("unsupported banner {banner:?}")));
    }
    let mut body = lines.filter(|l| !l.starts_with('%') && !l.trim().is_empty());
    let size = body.next().ok_or_else(|| Error::parse(ctx, "missing size line"))?;
    let size: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(ctx, format!("bad size field {t:?}"))))
        .collect::<Result<_>>()?;
    let [n_rows, n_cols, nnz] = size[..] else {
        return Err(Error::parse(ctx, "size line needs three fields"));
    };
    let mut entries = Vec::with_capacity(nnz);
    for line in body {
        let mut it = line.split_whitespace();
        let mut field = |name: &str| {
            it.next()
                .ok_or_else(|| Error::parse(ctx, format!("missing {name} in {line:?}")))
        };
        let row: usize = field("row")?.parse().map_err(|_| Error::parse(ctx, format!("bad row in {line:?}")))?;
        let col: usize = field("col")?.parse().map_err(|_| Error::parse(ctx, format!("bad col in {line:?}")))?;
        let value: f64 = field("value")?.parse().map_err(|_| Error::parse(ctx, format!("bad value in {line:?}")))?;
        if row == 0 || row > n_rows || col == 0 || col > n_cols {
            return Err(Error::parse(ctx, format!("entry ({row}, {col}) outside {n_rows}x{n_cols}")));
        }
        entries.push(Entry { row, col, value });
    }
    if entries.len() != nnz {
        return Err(Error::parse(ctx, format!("expected {nnz} entries, found {}", entries.len())));
    }
    Ok(CoordinateMatrix { n_rows, n_cols, entries })
}

/// `M` for a single-channel kernel.
pub fn build_single(kernel: &KernelTensor, n: usize) -> Result<StructuredMatrix> {
    if kernel.g() != 1 || kernel.h() != 1 {
        return Err(Error::InvalidDims(format!(
            "build_single needs g = h = 1, kernel has g = {}, h = {}",
            kernel.g(),
            kernel.h()
        )));
    }
    build_multi(kernel, n)
}

/// `M` for a multi-channel kernel: an `h × g` grid of doubly block banded
/// Toeplitz blocks.
pub fn build_multi(kernel: &KernelTensor, n: usize) -> Result<StructuredMatrix> {
    let dims = ProblemDims::for_kernel(kernel, n)?;
    let (k, g, plane) = (dims.k, dims.g, dims.plane());
    let m = dims.center() as isize;
    let kv = kernel.values();
    let mut entries = Vec::with_capacity(dims.n_out() * k * k * g);
    // Rows ascend with (c, s, r); within a row columns ascend with (d, q, p),
    // so the triples come out sorted.
    for c in 0..dims.h {
        for s in 0..n {
            for r in 0..n {
                let row = c * plane + s * n + r + 1;
                for d in 0..g {
                    let slab = &kv[(d + g * c) * k * k..(d + g * c + 1) * k * k];
                    for q in 0..k {
                        let j = s as isize + q as isize + 1 - m;
                        if j < 0 || j >= n as isize {
                            continue;
                        }
                        for p in 0..k {
                            let i = r as isize + p as isize + 1 - m;
                            if i < 0 || i >= n as isize {
                                continue;
                            }
                            let value = slab[q * k + p];
                            if value != 0.0 {
                                let col = d * plane + j as usize * n + i as usize + 1;
                                entries.push(Entry { row, col, value });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(StructuredMatrix { dims, entries })
}

fn check_index(dims: &ProblemDims, p: usize, q: usize, z: usize, y: usize) -> Result<()> {
    let ProblemDims { k, g, h, .. } = *dims;
    if !(1..=k).contains(&p) || !(1..=k).contains(&q) || !(1..=g).contains(&z) || !(1..=h).contains(&y) {
        return Err(Error::IndexOutOfRange { p, q, z, y, k, g, h });
    }
    Ok(())
}

/// `|Ω_{p,q}| = (N − |p−m|)·(N − |q−m|)`, clamped at zero. Independent of
/// the channel pair.
pub fn omega_count(dims: &ProblemDims, p: usize, q: usize) -> usize {
    let m = dims.center();
    dims.n.saturating_sub(p.abs_diff(m)) * dims.n.saturating_sub(q.abs_diff(m))
}

/// Ω for kernel entry `(p, q, z, y)`, by offset arithmetic.
pub fn omega(dims: &ProblemDims, p: usize, q: usize, z: usize, y: usize) -> Result<OmegaIndexSet> {
    check_index(dims, p, q, z, y)?;
    let (n, plane) = (dims.n, dims.plane());
    let m = dims.center() as isize;
    let (dp, dq) = (p as isize - m, q as isize - m);
    let (r_lo, r_hi) = crate::conv::valid_range(n, dp);
    let (s_lo, s_hi) = crate::conv::valid_range(n, dq);
    let row0 = (y - 1) * plane;
    let col0 = (z - 1) * plane;
    let mut positions = Vec::with_capacity((r_hi - r_lo) * (s_hi - s_lo));
    for s in s_lo..s_hi {
        let j = (s as isize + dq) as usize;
        for r in r_lo..r_hi {
            let i = (r as isize + dp) as usize;
            positions.push((row0 + s * n + r + 1, col0 + j * n + i + 1));
        }
    }
    Ok(OmegaIndexSet {
        index: (p, q, z, y),
        positions,
    })
}

/// `‖M‖²_F` from the stored entries.
pub fn frobenius_norm_sq(matrix: &StructuredMatrix) -> f64 {
    matrix.entries.iter().map(|e| e.value * e.value).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv_multi;
    use crate::tensor::{vec_input, vec_output, InputTensor};

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    /// Kernel whose entries are distinct and recognisable: k_{pq} = 10p + q.
    fn labelled_3x3() -> KernelTensor {
        KernelTensor::from_fn(3, 1, 1, |p, q, _, _| (10 * p + q) as f64).unwrap()
    }

    #[test]
    fn three_by_three_layout() {
        let kern = labelled_3x3();
        let mat = build_single(&kern, 3).unwrap();
        assert_eq!((mat.n_rows(), mat.n_cols()), (9, 9));
        assert_eq!(mat.get(1, 1), 22.0);
        assert_eq!(mat.get(1, 2), 32.0);
        assert_eq!(mat.get(2, 1), 12.0);
        assert_eq!(mat.get(1, 4), 23.0);
        assert_eq!(mat.get(4, 1), 21.0);
        assert_eq!(mat.get(1, 5), 33.0);
    }

    #[test]
    fn three_by_three_blocks_are_banded_toeplitz() {
        let n = 5;
        let kern = labelled_3x3();
        let mat = build_single(&kern, n).unwrap();
        let block = |bi: usize, bj: usize, i: usize, j: usize| mat.get(bi * n + i, bj * n + j);
        // The block diagonal, sub- and superdiagonal use kernel columns 2, 1, 3.
        for (db, col) in [(0isize, 2usize), (1, 1), (-1, 3)] {
            for bi in 0..n {
                let bj = bi as isize - db;
                if bj < 0 || bj >= n as isize {
                    continue;
                }
                for i in 1..=n {
                    for j in 1..=n {
                        let want = match i as isize - j as isize {
                            0 => (20 + col) as f64,
                            1 => (10 + col) as f64,
                            -1 => (30 + col) as f64,
                            _ => 0.0,
                        };
                        assert_eq!(block(bi, bj as usize, i, j), want);
                    }
                }
            }
        }
        // Blocks two away from the diagonal are empty.
        assert_eq!(block(0, 2, 1, 1), 0.0);
        assert_eq!(block(3, 0, 1, 1), 0.0);
    }

    #[test]
    fn identity_center_builds_identity() {
        let kern = KernelTensor::identity_center(3, 1, 1).unwrap();
        let mat = build_single(&kern, 6).unwrap();
        assert_eq!(mat.nnz(), 36);
        assert!(mat.entries().iter().all(|e| e.row == e.col && e.value == 1.0));
    }

    #[test]
    fn zero_input_slice_gives_zero_columns() {
        let mut rnd = lcg(11);
        let kern = KernelTensor::from_fn(3, 2, 1, |_, _, z, _| if z == 2 { 0.0 } else { rnd() }).unwrap();
        let mat = build_multi(&kern, 4).unwrap();
        assert!(mat.entries().iter().all(|e| e.col <= 16));
    }

    #[test]
    fn rectangular_1200x400_shape() {
        let kern = KernelTensor::from_fn(3, 1, 3, |_, _, _, _| 1.0).unwrap();
        let mat = build_multi(&kern, 20).unwrap();
        assert_eq!((mat.n_rows(), mat.n_cols()), (1200, 400));
        assert!(build_single(&kern, 20).is_err());
    }

    #[test]
    fn entries_sorted_unique_and_bit_identical() {
        let mut rnd = lcg(12);
        let kern = KernelTensor::from_fn(3, 2, 3, |_, _, _, _| rnd()).unwrap();
        let mat = build_multi(&kern, 5).unwrap();
        for w in mat.entries().windows(2) {
            assert!((w[0].row, w[0].col) < (w[1].row, w[1].col));
        }
        for e in mat.entries() {
            assert!(kern.values().iter().any(|v| v.to_bits() == e.value.to_bits()));
        }
    }

    #[test]
    fn blocks_equal_single_channel_builds() {
        let mut rnd = lcg(13);
        let (n, g, h) = (4, 2, 3);
        let kern = KernelTensor::from_fn(3, g, h, |_, _, _, _| rnd()).unwrap();
        let mat = build_multi(&kern, n).unwrap();
        let plane = n * n;
        for c in 1..=h {
            for d in 1..=g {
                let single = build_single(&kern.slice(d, c).unwrap(), n).unwrap();
                for i in 1..=plane {
                    for j in 1..=plane {
                        assert_eq!(mat.get((c - 1) * plane + i, (d - 1) * plane + j), single.get(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn matvec_agrees_with_convolution() {
        let mut rnd = lcg(14);
        for k in [1, 2, 3, 5] {
            for (g, h) in [(1, 1), (2, 1), (1, 3), (3, 2)] {
                let n = 6;
                let kern = KernelTensor::from_fn(k, g, h, |_, _, _, _| rnd()).unwrap();
                let mat = build_multi(&kern, n).unwrap();
                let x = InputTensor::from_fn(n, g, |_, _, _| rnd()).unwrap();
                let want = vec_output(&conv_multi(&kern, &x).unwrap());
                let got = mat.matvec(&vec_input(&x)).unwrap();
                let err: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(err <= 1e-12 * norm, "k={k} g={g} h={h}");
            }
        }
    }

    #[test]
    fn omega_cardinalities_at_n20() {
        let dims = ProblemDims::new(20, 3, 1, 1).unwrap();
        assert_eq!(omega(&dims, 2, 2, 1, 1).unwrap().len(), 400);
        assert_eq!(omega(&dims, 1, 2, 1, 1).unwrap().len(), 380);
        assert_eq!(omega(&dims, 1, 1, 1, 1).unwrap().len(), 361);
        assert_eq!(omega_count(&dims, 3, 1), 361);
    }

    #[test]
    fn omega_rejects_bad_indices() {
        let dims = ProblemDims::new(4, 3, 2, 1).unwrap();
        assert!(omega(&dims, 0, 1, 1, 1).is_err());
        assert!(omega(&dims, 1, 4, 1, 1).is_err());
        assert!(omega(&dims, 1, 1, 3, 1).is_err());
        assert!(omega(&dims, 1, 1, 1, 2).is_err());
    }

    #[test]
    fn omega_positions_have_distinct_rows_and_cols() {
        let dims = ProblemDims::new(5, 5, 2, 2).unwrap();
        let set = omega(&dims, 1, 4, 2, 1).unwrap();
        let mut cols: Vec<usize> = set.positions.iter().map(|x| x.1).collect();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(cols.len(), set.len());
        assert!(set.positions.windows(2).all(|w| w[0].0 < w[1].0));
        // block (c = y = 1, d = z = 2)
        assert!(set.positions.iter().all(|&(r, c)| r <= 25 && c > 25));
    }

    #[test]
    fn frobenius_values() {
        let zero = build_multi(&KernelTensor::zeros(3, 1, 1).unwrap(), 5).unwrap();
        assert_eq!(frobenius_norm_sq(&zero), 0.0);
        let id = build_multi(&KernelTensor::identity_center(3, 1, 1).unwrap(), 20).unwrap();
        assert_eq!(frobenius_norm_sq(&id), 400.0);

        let mut rnd = lcg(15);
        let kern = KernelTensor::from_fn(3, 2, 3, |_, _, _, _| rnd()).unwrap();
        let dims = ProblemDims::for_kernel(&kern, 7).unwrap();
        let closed: f64 = (0..kern.len())
            .map(|idx| {
                let (p, q, _, _) = kern.unflatten(idx);
                omega_count(&dims, p, q) as f64 * kern.values()[idx].powi(2)
            })
            .sum();
        let direct = frobenius_norm_sq(&build_multi(&kern, 7).unwrap());
        assert!((closed - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn bandwidth_matches_center_offsets() {
        let mut rnd = lcg(16);
        for k in 1..=5 {
            let kern = KernelTensor::from_fn(k, 1, 2, |_, _, _, _| rnd() + 3.0).unwrap();
            let mat = build_multi(&kern, 7).unwrap();
            let m = k.div_ceil(2);
            let bw = mat.bandwidth();
            assert_eq!((bw.outer_lower, bw.outer_upper), (m - 1, k - m), "k={k}");
            assert_eq!((bw.inner_lower, bw.inner_upper), (m - 1, k - m), "k={k}");
        }
    }

    #[test]
    fn matrix_market_round_trip() {
        let mut rnd = lcg(17);
        let kern = KernelTensor::from_fn(3, 2, 1, |_, _, _, _| rnd()).unwrap();
        let mat = build_multi(&kern, 4).unwrap();
        let mut buf = Vec::new();
        mat.write_matrix_market(&mut buf).unwrap();
        let parsed = read_matrix_market(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!((parsed.n_rows, parsed.n_cols), (16, 32));
        assert_eq!(parsed.entries, mat.entries());
        assert!(read_matrix_market("%%MatrixMarket matrix array real general\n1 1\n0").is_err());
        assert!(read_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0").is_err());
        assert!(read_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0").is_err());
    }

    #[test]
    fn transpose_matvec_matches_dense() {
        let mut rnd = lcg(18);
        let kern = KernelTensor::from_fn(3, 1, 2, |_, _, _, _| rnd()).unwrap();
        let mat = build_multi(&kern, 3).unwrap();
        let dense = mat.to_dense();
        let w: Vec<f64> = (0..mat.n_rows()).map(|_| rnd()).collect();
        let got = mat.matvec_transpose(&w).unwrap();
        for j in 0..mat.n_cols() {
            let want: f64 = (0..mat.n_rows()).map(|i| dense[(i, j)] * w[i]).sum();
            assert!((got[j] - want).abs() < 1e-13);
        }
        assert!(mat.matvec(&[0.0]).is_err());
        assert!(mat.matvec_transpose(&[0.0]).is_err());
    }
}

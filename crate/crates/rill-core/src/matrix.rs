//! Dense row-major `f64` matrices sized for small-MLP workloads.
//!
//! The three product kernels (`A·B`, `Aᵀ·B`, `A·Bᵀ`) each exist in a
//! sequential and, behind the `parallel` feature, a rayon row-parallel
//! variant. Parallelism splits work across *output rows* only, and every
//! output element accumulates its terms in the same fixed order in both
//! variants, so results are bit-identical regardless of thread count. The
//! public entry points dispatch on problem size; tiny products stay
//! sequential to avoid fork-join overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many multiply-adds a parallel launch costs more than it saves.
const PAR_THRESHOLD: usize = 32 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let work = self.rows * self.cols * other.cols;
        if use_parallel(work) {
            #[cfg(feature = "parallel")]
            return Ok(matmul_par(self, other));
        }
        Ok(matmul_seq(self, other))
    }

    /// `selfᵀ · other`; both operands share their row count.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let work = self.rows * self.cols * other.cols;
        if use_parallel(work) {
            #[cfg(feature = "parallel")]
            return Ok(matmul_tn_par(self, other));
        }
        Ok(matmul_tn_seq(self, other))
    }

    /// `self · otherᵀ`; both operands share their column count.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let work = self.rows * self.cols * other.rows;
        if use_parallel(work) {
            #[cfg(feature = "parallel")]
            return Ok(matmul_nt_par(self, other));
        }
        Ok(matmul_nt_seq(self, other))
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape(format!(
                "add_row: {}x{} += {}x{}",
                self.rows, self.cols, row.rows, row.cols
            )));
        }
        for r in 0..self.rows {
            let base = r * self.cols;
            for c in 0..self.cols {
                self.data[base + c] += row.data[c];
            }
        }
        Ok(())
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            let base = r * self.cols;
            for c in 0..self.cols {
                out.data[c] += self.data[base + c];
            }
        }
        out
    }
}

#[inline]
fn use_parallel(work: usize) -> bool {
    cfg!(feature = "parallel") && work >= PAR_THRESHOLD
}

fn mul_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    // i-k-j order: accumulation over k is ascending for every output element,
    // matching the parallel variant term-for-term.
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        mul_row(a_row, b, out.row_mut(i));
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &Matrix, b: &Matrix) -> Matrix {
    use rayon::prelude::*;
    let mut out = Matrix::zeros(a.rows, b.cols);
    let cols = out.cols;
    out.data
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, out_row)| mul_row(a.row(i), b, out_row));
    out
}

fn tn_row(i: usize, a: &Matrix, b: &Matrix, out_row: &mut [f64]) {
    // out[i,j] = sum_k a[k,i] * b[k,j], k ascending.
    for k in 0..a.rows {
        let aki = a.data[k * a.cols + i];
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aki * bkj;
        }
    }
}

pub fn matmul_tn_seq(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        tn_row(i, a, b, out.row_mut(i));
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &Matrix, b: &Matrix) -> Matrix {
    use rayon::prelude::*;
    let mut out = Matrix::zeros(a.cols, b.cols);
    let cols = out.cols;
    out.data
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, out_row)| tn_row(i, a, b, out_row));
    out
}

fn nt_row(a_row: &[f64], b: &Matrix, out_row: &mut [f64]) {
    // out[i,j] = dot(a_row, b_row_j), k ascending.
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = b.row(j);
        let mut acc = 0.0;
        for k in 0..a_row.len() {
            acc += a_row[k] * b_row[k];
        }
        *o = acc;
    }
}

pub fn matmul_nt_seq(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        nt_row(a_row, b, out.row_mut(i));
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &Matrix, b: &Matrix) -> Matrix {
    use rayon::prelude::*;
    let mut out = Matrix::zeros(a.rows, b.rows);
    let cols = out.cols;
    out.data
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, out_row)| nt_row(a.row(i), b, out_row));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = crate::rng::named_stream(seed, "matrix-test");
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_small_known_values() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_variants_agree_with_explicit_transpose() {
        let a = seeded(5, 4, 1);
        let b = seeded(5, 3, 2);
        // aT . b via matmul on an explicitly transposed copy
        let mut at = Matrix::zeros(4, 5);
        for r in 0..5 {
            for c in 0..4 {
                at.set(c, r, a.get(r, c));
            }
        }
        let want = matmul_seq(&at, &b);
        let got = a.matmul_tn(&b).unwrap();
        assert_eq!(want.data(), got.data());

        let c = seeded(6, 4, 3);
        let mut ct = Matrix::zeros(4, 6);
        for r in 0..6 {
            for col in 0..4 {
                ct.set(col, r, c.get(r, col));
            }
        }
        let want = matmul_seq(&a, &ct);
        let got = a.matmul_nt(&c).unwrap();
        assert_eq!(want.data(), got.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert_eq!(a.matmul(&b).unwrap_err().kind(), "shape-error");
        assert_eq!(a.matmul_tn(&b).unwrap_err().kind(), "shape-error");
        assert_eq!(a.matmul_nt(&b).unwrap_err().kind(), "shape-error");
    }

    #[test]
    fn zero_dim_products_are_fine() {
        let a = Matrix::zeros(3, 0);
        let b = Matrix::zeros(0, 2);
        let c = a.matmul(&b).unwrap();
        assert_eq!((c.rows(), c.cols()), (3, 2));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_row_and_col_sums() {
        let mut m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bias = Matrix::from_vec(1, 2, vec![10.0, 20.0]).unwrap();
        m.add_row(&bias).unwrap();
        assert_eq!(m.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(m.col_sums().data(), &[24.0, 46.0]);
    }

    // The dispatch threshold must never change results: the parallel kernels
    // are bit-identical to the sequential ones because accumulation order per
    // output element is fixed.
    #[cfg(feature = "parallel")]
    mod parallel_equivalence {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn par_matches_seq_bitwise(
                m in 1usize..40,
                k in 1usize..40,
                n in 1usize..40,
                seed in 0u64..1000,
            ) {
                let a = seeded(m, k, seed);
                let b = seeded(k, n, seed.wrapping_add(1));
                let (s, p) = (matmul_seq(&a, &b), matmul_par(&a, &b));
                prop_assert_eq!(s.data(), p.data());

                let c = seeded(m, n, seed.wrapping_add(2));
                let (s, p) = (matmul_tn_seq(&a, &c), matmul_tn_par(&a, &c));
                prop_assert_eq!(s.data(), p.data());

                let d = seeded(n, k, seed.wrapping_add(3));
                let (s, p) = (matmul_nt_seq(&a, &d), matmul_nt_par(&a, &d));
                prop_assert_eq!(s.data(), p.data());
            }
        }

        #[test]
        fn par_matches_seq_above_dispatch_threshold() {
            let a = seeded(64, 80, 11);
            let b = seeded(80, 48, 12);
            assert!(64 * 80 * 48 >= super::super::PAR_THRESHOLD);
            assert_eq!(matmul_seq(&a, &b).data(), matmul_par(&a, &b).data());
            assert_eq!(a.matmul(&b).unwrap().data(), matmul_seq(&a, &b).data());
        }
    }
}

//! Packed storage for symmetric derivative data.
//!
//! A symmetric matrix keeps only its lower triangle (row-major), a
//! symmetric rank-3 tensor only entries with non-increasing indices.
//! Accessors sort their indices, so mixed partials are permutation
//! symmetric *exactly as stored* — there is no second copy that could
//! disagree.

use nalgebra::DMatrix;

/// Packed index of `(i, j)` with `i >= j`.
#[inline]
pub(crate) fn tri2(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

/// Packed index of `(i, j, l)` with `i >= j >= l`.
#[inline]
pub(crate) fn tri3(i: usize, j: usize, l: usize) -> usize {
    debug_assert!(i >= j && j >= l);
    i * (i + 1) * (i + 2) / 6 + j * (j + 1) / 2 + l
}

/// Number of packed entries of a symmetric `dim x dim` matrix.
#[inline]
pub(crate) fn tri2_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Number of packed entries of a symmetric rank-3 tensor.
#[inline]
pub(crate) fn tri3_len(dim: usize) -> usize {
    dim * (dim + 1) * (dim + 2) / 6
}

/// A symmetric matrix in packed lower-triangular storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat {
    dim: usize,
    data: Vec<f64>,
}

impl SymMat {
    pub fn zeros(dim: usize) -> Self {
        SymMat { dim, data: vec![0.0; tri2_len(dim)] }
    }

    pub(crate) fn from_packed(dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), tri2_len(dim));
        SymMat { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        self.data[tri2(hi, lo)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        self.data[tri2(hi, lo)] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }
}

/// A permutation-symmetric rank-3 tensor in packed storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTen3 {
    dim: usize,
    data: Vec<f64>,
}

impl SymTen3 {
    pub fn zeros(dim: usize) -> Self {
        SymTen3 { dim, data: vec![0.0; tri3_len(dim)] }
    }

    pub(crate) fn from_packed(dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), tri3_len(dim));
        SymTen3 { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        let (a, b, c) = sort3(i, j, l);
        self.data[tri3(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        let (a, b, c) = sort3(i, j, l);
        self.data[tri3(a, b, c)] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    /// The matrix `T[i, :, :]` obtained by fixing the first index.
    pub fn slice_first(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |j, l| self.get(i, j, l))
    }
}

#[inline]
fn sort3(i: usize, j: usize, l: usize) -> (usize, usize, usize) {
    let (mut a, mut b, mut c) = (i, j, l);
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    if b < c {
        std::mem::swap(&mut b, &mut c);
    }
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    (a, b, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_indexing_round_trips() {
        let dim = 5;
        let mut m = SymMat::zeros(dim);
        let mut t = SymTen3::zeros(dim);
        let mut v = 1.0;
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, v);
                v += 1.0;
                for l in 0..=j {
                    t.set(i, j, l, v);
                    v += 0.5;
                }
            }
        }
        // Symmetric reads regardless of index order.
        assert_eq!(m.get(1, 3), m.get(3, 1));
        assert_eq!(t.get(0, 2, 4), t.get(4, 2, 0));
        assert_eq!(t.get(0, 2, 4), t.get(2, 4, 0));
        // Distinct packed slots for distinct index sets.
        let total = tri3_len(dim);
        assert_eq!(t.packed().len(), total);
        let mut seen = std::collections::HashSet::new();
        for i in 0..dim {
            for j in 0..=i {
                for l in 0..=j {
                    assert!(seen.insert(tri3(i, j, l)));
                }
            }
        }
        assert_eq!(seen.len(), total);
    }
}

//! Compressed-row sparsity patterns over the joint user/item node space.

/// Row pointers and column indices of a sparse matrix; values live elsewhere
/// (attention weights, normalization coefficients) and are aligned with `cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePattern {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl SparsePattern {
    /// Builds from per-row column lists; each list is used in the given order.
    pub fn from_rows<I, R>(rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[u32]>,
    {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for r in rows {
            cols.extend_from_slice(r.as_ref());
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols }
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    /// Edge index range of row `r`.
    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        &self.cols[self.row_range(r)]
    }

    /// Row index of every stored entry, aligned with `cols`.
    pub fn row_of_entries(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.num_rows() {
            out.extend(std::iter::repeat(r as u32).take(self.row_range(r).len()));
        }
        out
    }
}

//! Compressed sparse row matrices with a triplet interchange form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-list form used for JSON files: `{rows, cols, vals, shape}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplets {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub shape: [usize; 2],
}

impl CsrMatrix {
    /// Duplicate entries are summed; explicit zeros are kept.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = entries.into_iter().collect();
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= nrows || *c >= ncols) {
            return Err(Error::Shape(format!(
                "entry ({r}, {c}) outside a {nrows}x{ncols} matrix"
            )));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_dense_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::Shape(format!("row {r} has {} columns, expected {ncols}", row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    entries.push((r, c, v));
                }
            }
        }
        Self::from_triplets(rows.len(), ncols, entries)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|(cc, _)| *cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn transpose(&self) -> Self {
        let entries = (0..self.nrows).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)));
        Self::from_triplets(self.ncols, self.nrows, entries.collect::<Vec<_>>())
            .expect("transpose stays in range")
    }

    /// `self * dense` where `dense` is `ncols x width`, row-major.
    pub fn mul_dense(&self, dense: &[f64], width: usize) -> Result<Vec<f64>> {
        if dense.len() != self.ncols * width {
            return Err(Error::Shape(format!(
                "sparse {}x{} times dense with {} values (width {width})",
                self.nrows,
                self.ncols,
                dense.len()
            )));
        }
        let mut out = vec![0.0; self.nrows * width];
        self.mul_dense_into(dense, width, &mut out);
        Ok(out)
    }

    pub(crate) fn mul_dense_into(&self, dense: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.nrows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &dense[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `self^T * dense` accumulated into `out` (`ncols x width`).
    pub(crate) fn tmul_dense_acc(&self, dense: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.nrows {
            let src = &dense[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    pub fn to_triplets(&self) -> Triplets {
        let mut t = Triplets {
            rows: Vec::with_capacity(self.nnz()),
            cols: Vec::with_capacity(self.nnz()),
            vals: Vec::with_capacity(self.nnz()),
            shape: [self.nrows, self.ncols],
        };
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.rows.push(r);
                t.cols.push(c);
                t.vals.push(v);
            }
        }
        t
    }

    pub fn from_triplet_struct(t: &Triplets) -> Result<Self> {
        if t.rows.len() != t.cols.len() || t.rows.len() != t.vals.len() {
            return Err(Error::Shape("triplet arrays differ in length".into()));
        }
        Self::from_triplets(
            t.shape[0],
            t.shape[1],
            t.rows
                .iter()
                .zip(&t.cols)
                .zip(&t.vals)
                .map(|((&r, &c), &v)| (r, c, v))
                .collect::<Vec<_>>(),
        )
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_transpose_matches_dense() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 2, 1.0), (1, 0, 2.0), (0, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 2), 1.5);
        let t = m.transpose();
        assert_eq!(t.to_dense(), vec![vec![0.0, 2.0], vec![0.0, 0.0], vec![1.5, 0.0]]);
        let y = m.mul_dense(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        assert_eq!(y, vec![7.5, 9.0, 2.0, 4.0]);
    }

    #[test]
    fn out_of_range_entry_rejected() {
        assert!(CsrMatrix::from_triplets(1, 1, vec![(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn triplet_round_trip() {
        let m = CsrMatrix::from_triplets(3, 2, vec![(2, 1, -1.0), (0, 0, 4.0)]).unwrap();
        let back = CsrMatrix::from_triplet_struct(&m.to_triplets()).unwrap();
        assert_eq!(back, m);
    }
}

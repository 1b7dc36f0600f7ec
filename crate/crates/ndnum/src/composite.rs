//! Helpers assembled from the primitive catalog. None of these add a new
//! backward rule.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -1.0)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let na = self.neg(a)?;
        let neg = self.relu(na)?;
        self.add(pos, neg)
    }

    /// Elementwise `min(a, b) = a - relu(a - b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.sub(a, r)
    }

    /// Elementwise `max(a, b) = b + relu(a - b)`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.add(b, r)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = self.constant(Tensor::full(&shape, c));
        self.add(a, k)
    }

    /// `c - a` elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = self.constant(Tensor::full(&shape, c));
        self.sub(k, a)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, index, &[c, r])
    }

    /// Repeats a length-`n` vector as the rows of a `rows × n` matrix.
    pub fn tile_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let n = self.value(v).len();
        let index: Vec<usize> = (0..rows).flat_map(|_| 0..n).collect();
        self.gather(v, index, &[rows, n])
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("rows", a)?;
        if start > end || end > r {
            return Err(Error::IndexOutOfRange {
                op: "rows",
                index: end,
                len: r,
            });
        }
        let index: Vec<usize> = (start * c..end * c).collect();
        self.gather(a, index, &[end - start, c])
    }

    /// Column `j` of a 2-D tensor, as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.dims2("column", a)?;
        if j >= c {
            return Err(Error::IndexOutOfRange {
                op: "column",
                index: j,
                len: c,
            });
        }
        let index: Vec<usize> = (0..r).map(|i| i * c + j).collect();
        self.gather(a, index, &[r])
    }

    /// Flat-index selection returned as a vector.
    pub fn select(&mut self, a: Var, index: impl Into<Arc<[usize]>>) -> Result<Var> {
        let index: Arc<[usize]> = index.into();
        let n = index.len();
        self.gather(a, index, &[n])
    }

    /// `x·w + b` for `x: r×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.tile_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Sum of a list of scalars (or equally shaped tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or(Error::Empty { op: "add_all" })?;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_and_tile() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.transpose(a).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
        let v = g.constant(Tensor::vector(vec![7., 8.]));
        let tiled = g.tile_rows(v, 3).unwrap();
        assert_eq!(g.value(tiled).data(), &[7., 8., 7., 8., 7., 8.]);
    }

    #[test]
    fn min_max_abs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1., -2., 3.]));
        let b = g.constant(Tensor::vector(vec![2., -3., 3.]));
        let mn = g.minimum(a, b).unwrap();
        let mx = g.maximum(a, b).unwrap();
        let ab = g.abs(a).unwrap();
        assert_eq!(g.value(mn).data(), &[1., -3., 3.]);
        assert_eq!(g.value(mx).data(), &[2., -2., 3.]);
        assert_eq!(g.value(ab).data(), &[1., 2., 3.]);
    }

    #[test]
    fn rows_and_columns() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let r = g.rows(a, 1, 3).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4., 5., 6.]);
        let c = g.column(a, 1).unwrap();
        assert_eq!(g.value(c).data(), &[2., 4., 6.]);
        assert!(g.rows(a, 2, 4).is_err());
    }
}

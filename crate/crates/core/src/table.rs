//! Dense (state, action) tables: logits, probabilities and gradients.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Table<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<S>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean distance between two tables of the same shape.
    pub fn distance(&self, other: &Self) -> S {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>().sqrt()
    }
}

impl<S> Index<(usize, usize)> for Table<S> {
    type Output = S;

    fn index(&self, (r, c): (usize, usize)) -> &S {
        &self.data[r * self.cols + c]
    }
}

impl<S> IndexMut<(usize, usize)> for Table<S> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut S {
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_rows_rejects_ragged() {
        let err = Table::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn add_scaled_and_norm() {
        let mut t = Table::<f64>::zeros(1, 2);
        let g = Table::from_rows(&[vec![3.0, 4.0]]).unwrap();
        t.add_scaled(&g, 2.0);
        assert_eq!(t[(0, 1)], 8.0);
        assert_eq!(g.norm(), 5.0);
        assert_eq!(t.distance(&g), 5.0);
    }
}

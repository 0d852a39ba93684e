use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `n x d` matrix holding one state vector per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchVec<T> {
    n: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> BatchVec<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![T::zero(); n * d],
        }
    }

    pub fn from_vec(n: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape {
                what: "batch data",
                expected: n * d,
                got: data.len(),
            });
        }
        Ok(Self { n, d, data })
    }

    /// Builds a batch from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape {
                    what: "batch row",
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n, d, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn copy_row_from(&mut self, i: usize, src: &BatchVec<T>) {
        debug_assert_eq!(self.d, src.d);
        let d = self.d;
        self.data[i * d..(i + 1) * d].copy_from_slice(&src.data[i * d..(i + 1) * d]);
    }

    /// Reinterprets the same row-major data with a new shape.
    pub fn reshape(self, n: usize, d: usize) -> Result<Self> {
        Self::from_vec(n, d, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn row_is_finite(&self, i: usize) -> bool {
        self.row(i).iter().all(|x| x.is_finite())
    }
}

impl<T> Index<(usize, usize)> for BatchVec<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.d + j]
    }
}

impl<T> IndexMut<(usize, usize)> for BatchVec<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.d + j]
    }
}

/// Right-hand side `f(t, y)` of a batched ODE.
///
/// `t` holds one time per instance and `dy` has the same shape as `y`. The
/// function is always called on the whole batch, including instances that have
/// already finished.
pub trait Dynamics<T> {
    fn eval(&self, t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>);
}

impl<T, F> Dynamics<T> for F
where
    F: Fn(&[T], &BatchVec<T>, &mut BatchVec<T>),
{
    #[inline]
    fn eval(&self, t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>) {
        self(t, y, dy)
    }
}

/// Lifts a per-instance right-hand side `f(t, y_row, dy_row)` to a batch.
#[derive(Debug, Clone, Copy)]
pub struct RowWise<F>(pub F);

impl<T: Scalar, F> Dynamics<T> for RowWise<F>
where
    F: Fn(T, &[T], &mut [T]),
{
    fn eval(&self, t: &[T], y: &BatchVec<T>, dy: &mut BatchVec<T>) {
        for i in 0..y.n() {
            (self.0)(t[i], y.row(i), dy.row_mut(i));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_reshape() {
        let b = BatchVec::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(b.shape(), (2, 2));
        assert_eq!(b.row(1), &[3.0, 4.0]);
        assert_eq!(b[(0, 1)], 2.0);
        let flat = b.reshape(1, 4).unwrap();
        assert_eq!(flat.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert!(flat.reshape(3, 1).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(matches!(
            BatchVec::from_rows(&rows),
            Err(Error::Shape { .. })
        ));
    }
}

//! Small dense row-major matrices over any [`Scalar`].

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(n: usize) -> Self {
        Mat { n, data: vec![S::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Mat { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        (0..self.n)
            .map(|i| {
                let mut acc = S::zero();
                for j in 0..self.n {
                    acc += self[(i, j)] * x[j];
                }
                acc
            })
            .collect()
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        Mat::from_fn(self.n, |i, j| {
            let mut acc = S::zero();
            for k in 0..self.n {
                acc += self[(i, k)] * other[(k, j)];
            }
            acc
        })
    }

    /// `xᵀ M y`.
    pub fn bilinear(&self, x: &[S], y: &[S]) -> S {
        let mut acc = S::zero();
        for i in 0..self.n {
            for j in 0..self.n {
                acc += x[i] * self[(i, j)] * y[j];
            }
        }
        acc
    }

    pub fn map_re(&self) -> Mat<f64> {
        Mat { n: self.n, data: self.data.iter().map(|x| x.re()).collect() }
    }

    /// Lower Cholesky factor; `None` unless symmetric positive definite.
    pub fn cholesky(&self) -> Option<Mat<S>> {
        let n = self.n;
        let mut l = Mat::zeros(n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d.re() > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(l)
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn spd_inverse(&self) -> Option<Mat<S>> {
        let l = self.cholesky()?;
        let n = self.n;
        let mut inv = Mat::zeros(n);
        for c in 0..n {
            // forward solve L y = e_c, then back solve Lᵀ x = y
            let mut y = vec![S::zero(); n];
            for i in 0..n {
                let mut s = if i == c { S::one() } else { S::zero() };
                for k in 0..i {
                    s -= l[(i, k)] * y[k];
                }
                y[i] = s / l[(i, i)];
            }
            let mut x = vec![S::zero(); n];
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * x[k];
                }
                x[i] = s / l[(i, i)];
            }
            for r in 0..n {
                inv[(r, c)] = x[r];
            }
        }
        Some(inv)
    }
}

impl<S> core::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.n + j]
    }
}

impl<S> core::ops::IndexMut<(usize, usize)> for Mat<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.n + j]
    }
}

/// Determinant by partial-pivot elimination (f64 only).
pub fn det(m: &Mat<f64>) -> f64 {
    let n = m.dim();
    let mut a = m.clone();
    let mut det = 1.0;
    for c in 0..n {
        let mut p = c;
        for r in (c + 1)..n {
            if a[(r, c)].abs() > a[(p, c)].abs() {
                p = r;
            }
        }
        if a[(p, c)] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                let t = a[(c, k)];
                a[(c, k)] = a[(p, k)];
                a[(p, k)] = t;
            }
            det = -det;
        }
        det *= a[(c, c)];
        for r in (c + 1)..n {
            let f = a[(r, c)] / a[(c, c)];
            for k in c..n {
                let v = a[(c, k)];
                a[(r, k)] -= f * v;
            }
        }
    }
    det
}

/// Solve `A x = b` for square `A` by partial-pivot elimination.
pub fn solve(a: &Mat<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.dim();
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for c in 0..n {
        let mut p = c;
        for r in (c + 1)..n {
            if m[(r, c)].abs() > m[(p, c)].abs() {
                p = r;
            }
        }
        if m[(p, c)].abs() < 1e-300 {
            return None;
        }
        if p != c {
            for k in 0..n {
                let t = m[(c, k)];
                m[(c, k)] = m[(p, k)];
                m[(p, k)] = t;
            }
            rhs.swap(c, p);
        }
        for r in (c + 1)..n {
            let f = m[(r, c)] / m[(c, c)];
            for k in c..n {
                let v = m[(c, k)];
                m[(r, k)] -= f * v;
            }
            rhs[r] -= f * rhs[c];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in (i + 1)..n {
            s -= m[(i, k)] * x[k];
        }
        x[i] = s / m[(i, i)];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_round_trip() {
        let a = Mat::from_fn(3, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) });
        let inv = a.spd_inverse().unwrap();
        let id = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn indefinite_matrix_has_no_cholesky() {
        let a = Mat::from_fn(2, |i, j| if i == j { 1.0 } else { 2.0 });
        assert!(a.cholesky().is_none());
    }

    #[test]
    fn determinant_and_solve() {
        let a = Mat::from_fn(3, |i, j| [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]][i][j]);
        assert!((det(&a) - 18.0).abs() < 1e-12);
        let x = solve(&a, &[3.0, 5.0, 5.0]).unwrap();
        for (xi, e) in x.iter().zip([1.0, 1.0, 1.0]) {
            assert!((xi - e).abs() < 1e-14);
        }
    }
}

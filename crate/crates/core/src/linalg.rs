//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! The matrices seen here are at most 47x47, where Jacobi is accurate to
//! working precision and fast enough.

const MAX_SWEEPS: usize = 100;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Unsorted eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: SquareMatrix,
    pub sweeps: usize,
}

/// Eigendecomposition of a symmetric matrix. Only the upper triangle is read.
pub fn jacobi_eigen(a: &SquareMatrix) -> SymmetricEigen {
    let n = a.dim();
    let mut m = SquareMatrix::from_fn(n, |i, j| if i <= j { a[(i, j)] } else { a[(j, i)] });
    let mut v = SquareMatrix::identity(n);
    let scale = m.frobenius();
    let mut sweeps = 0;
    if scale > 0.0 {
        while sweeps < MAX_SWEEPS {
            let off: f64 =
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)] * m[(i, j)]).sum();
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            sweeps += 1;
            for p in 0..n {
                for q in p + 1..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }
    SymmetricEigen { values: (0..n).map(|i| m[(i, i)]).collect(), vectors: v, sweeps }
}

/// Annihilates `m[(p, q)]` with a plane rotation and accumulates it into `v`.
fn rotate(m: &mut SquareMatrix, v: &mut SquareMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = m.dim();
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(a: &SquareMatrix, e: &SymmetricEigen) -> f64 {
        let n = a.dim();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        let av: f64 = (0..n).map(|j| a[(i, j)] * e.vectors[(j, k)]).sum();
                        (av - e.values[k] * e.vectors[(i, k)]).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn diagonal_is_fixed_point() {
        let a = SquareMatrix::from_fn(4, |i, j| if i == j { i as f64 + 1.0 } else { 0.0 });
        let e = jacobi_eigen(&a);
        assert_eq!(e.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn two_by_two() {
        let a = SquareMatrix::from_fn(2, |i, j| if i == j { 2.0 } else { 1.0 });
        let mut vals = jacobi_eigen(&a).values;
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn residuals_small_on_dense_matrix() {
        let n = 47;
        let a = SquareMatrix::from_fn(n, |i, j| {
            let (i, j) = (i.min(j) as f64, i.max(j) as f64);
            (1.0 + i * 0.37 + j * 0.11).sin() + if i == j { 3.0 } else { 0.0 }
        });
        let e = jacobi_eigen(&a);
        assert!(residual(&a, &e) <= 1e-8 * a.frobenius());
        // Orthonormal columns.
        for p in 0..n {
            for q in 0..n {
                let d: f64 = (0..n).map(|k| e.vectors[(k, p)] * e.vectors[(k, q)]).sum();
                let want = if p == q { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix() {
        let e = jacobi_eigen(&SquareMatrix::zeros(5));
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert_eq!(e.vectors, SquareMatrix::identity(5));
    }
}

//! Small dense complex linear-algebra helpers.

use crate::{CMat, Cplx};
use num_traits::Zero;

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(n: usize) -> CMat {
    CMat::zeros(n, n)
}

pub fn dagger(a: &CMat) -> CMat {
    a.adjoint()
}

pub fn comm(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn trace(a: &CMat) -> Cplx {
    a.diagonal().iter().copied().fold(Cplx::zero(), |s, x| s + x)
}

/// Largest absolute entry.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

/// Eigen-decomposition of a hermitian matrix, eigenvalues ascending.
pub fn eigh(a: &CMat) -> (Vec<f64>, CMat) {
    let n = a.nrows();
    let herm = (a + a.adjoint()).scale(0.5);
    let eig = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `f(A)` for hermitian `A` through its spectral decomposition.
pub fn hermitian_fn(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(a);
    let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| Cplx::new(f(v), 0.0)),
    ));
    &vecs * d * vecs.adjoint()
}

pub fn mat_exp(a: &CMat) -> CMat {
    a.clone().exp()
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    max_abs(&(a - a.adjoint())) <= tol
}

//! Regularized traces on the circle and on finite matrix models.
//!
//! Wodzicki residues from symbol expansions, zeta-weighted traces by
//! analytic continuation, superconnection Chern and residue-Chern forms,
//! eta invariants, and Grassmannian anomaly cocycles.

pub mod cli;
pub mod graded_forms;
pub mod grassmann_anomaly;
pub mod lattice_spec;
pub mod linalg;
pub mod regularization;
pub mod superconn;
pub mod symbol_calc;

pub use num_complex::Complex;

/// Complex scalar used throughout the matrix and symbol layers.
pub type Cplx = Complex<f64>;
/// Dense complex matrix.
pub type CMat = nalgebra::DMatrix<Cplx>;
/// Meromorphic germ over `f64`.
pub type Germ = regularization::MeromorphicGerm<f64>;
/// Exact rational used for exponents and combinatorial coefficients.
pub type Rational = num_rational::Rational64;

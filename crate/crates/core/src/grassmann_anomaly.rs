//! Grassmannian Chern forms `tr(F (dF)^{2j})`, their weighted versions and
//! residue defects on circle families, spectral-window cocycles and the
//! gauge-orbit trivialization.

use crate::graded_forms::{Coef, Form, FormError, FormField, Homotopy, SampledField};
use crate::lattice_spec::{DiracFamily, LatticeError, Weight, COLLISION_TOL};
use crate::symbol_calc::{self, ClassicalSymbol, LogSymbol, SymbolError};
use crate::{linalg, CMat, Cplx};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrassmannError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error("not a projection: defect {0:e}")]
    NotProjection(f64),
    #[error("window edge {edge} within {gap:e} of the spectrum")]
    Crossing { edge: f64, gap: f64 },
    #[error("window {0}")]
    Window(String),
    #[error("F (dF)^{power} has order {order}, not trace class")]
    NotTraceClass { power: usize, order: f64 },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

pub type Result<T> = std::result::Result<T, GrassmannError>;

fn c(x: f64) -> Cplx {
    Cplx::new(x, 0.0)
}

pub type ProjFn = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;

/// Where `P(b)` comes from.
#[derive(Clone)]
pub enum ProjectionSource {
    /// Matrix field; derivatives by 4th-order central differences with step `h`.
    Field { p: usize, f: ProjFn, h: f64 },
    /// `1_{(λ, λ')}(D(b))` on a truncated circle family (`λ' = ∞` allowed);
    /// derivatives from first-order perturbation theory.
    Lattice { fam: DiracFamily, lambda: f64, lambda_prime: f64 },
}

#[derive(Clone)]
pub struct GrassmannFamily {
    pub source: ProjectionSource,
}

impl GrassmannFamily {
    pub fn from_fn(p: usize, h: f64, f: ProjFn) -> Self {
        GrassmannFamily { source: ProjectionSource::Field { p, f, h } }
    }

    /// `P(b) = U P_0 U^†`, `U = exp(Σ b_i X_i + Σ_{i<k} b_i b_k Y_{ik})` for
    /// anti-hermitian generators (`quad` in row-major `i<k` order, may be empty).
    pub fn conjugation(p0: CMat, gens: Vec<CMat>, quad: Vec<CMat>, h: f64) -> Self {
        let p = gens.len();
        let f = move |b: &[f64]| {
            let mut a = CMat::zeros(p0.nrows(), p0.ncols());
            for (bi, x) in b.iter().zip(&gens) {
                a += x * c(*bi);
            }
            let mut idx = 0;
            for i in 0..p {
                for k in (i + 1)..p {
                    if let Some(y) = quad.get(idx) {
                        a += y * c(b[i] * b[k]);
                    }
                    idx += 1;
                }
            }
            let u = linalg::mat_exp(&a);
            &u * &p0 * u.adjoint()
        };
        Self::from_fn(p, h, Arc::new(f))
    }

    pub fn window(fam: DiracFamily, lambda: f64, lambda_prime: f64) -> Result<Self> {
        if !(lambda < lambda_prime) {
            return Err(GrassmannError::Window(format!("need λ < λ' (got {lambda}, {lambda_prime})")));
        }
        let bound = fam.n_cut as f64 / 4.0;
        for e in [lambda, lambda_prime] {
            if e.is_finite() && e.abs() > bound {
                return Err(GrassmannError::Window(format!("|{e}| exceeds N/4 = {bound}")));
            }
        }
        Ok(GrassmannFamily { source: ProjectionSource::Lattice { fam, lambda, lambda_prime } })
    }

    /// `P(λ) = 1_{(λ,∞)}(D(b))`, so `F(λ) = sign(D(b) - λ)`.
    pub fn above(fam: DiracFamily, lambda: f64) -> Result<Self> {
        Self::window(fam, lambda, f64::INFINITY)
    }

    pub fn p(&self) -> usize {
        match &self.source {
            ProjectionSource::Field { p, .. } => *p,
            ProjectionSource::Lattice { fam, .. } => fam.params(),
        }
    }

    fn lattice_split(fam: &DiracFamily, b: &[f64], lambda: f64, lambda_prime: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let e = fam.eigen(b);
        let mut inside = vec![];
        let mut outside = vec![];
        for (i, v) in e.0.iter().enumerate() {
            for edge in [lambda, lambda_prime] {
                if (v - edge).abs() < COLLISION_TOL {
                    return Err(GrassmannError::Crossing { edge, gap: (v - edge).abs() });
                }
            }
            if *v > lambda && *v < lambda_prime {
                inside.push(i);
            } else {
                outside.push(i);
            }
        }
        Ok((inside, outside))
    }

    pub fn projector(&self, b: &[f64]) -> Result<CMat> {
        match &self.source {
            ProjectionSource::Field { f, .. } => Ok(f(b)),
            ProjectionSource::Lattice { fam, lambda, lambda_prime } => {
                let (inside, _) = Self::lattice_split(fam, b, *lambda, *lambda_prime)?;
                let e = fam.eigen(b);
                let vs = e.1.select_columns(&inside);
                Ok(&vs * vs.adjoint())
            }
        }
    }

    /// `∂_i P(b)` for each parameter.
    pub fn dprojector(&self, b: &[f64]) -> Result<Vec<CMat>> {
        match &self.source {
            ProjectionSource::Field { p, f, h } => Ok((0..*p)
                .map(|i| {
                    let at = |s: f64| {
                        let mut x = b.to_vec();
                        x[i] += s * h;
                        f(&x)
                    };
                    (at(-2.0) - at(2.0) + (at(1.0) - at(-1.0)) * c(8.0)) * c(1.0 / (12.0 * h))
                })
                .collect()),
            ProjectionSource::Lattice { fam, lambda, lambda_prime } => {
                let (inside, outside) = Self::lattice_split(fam, b, *lambda, *lambda_prime)?;
                let e = fam.eigen(b);
                let (vals, vecs) = (&e.0, &e.1);
                let vs = vecs.select_columns(&inside);
                let vc = vecs.select_columns(&outside);
                Ok((0..fam.params())
                    .map(|i| {
                        let mut m = vc.adjoint() * fam.matrix_derivative(i) * &vs;
                        for (r, k) in outside.iter().enumerate() {
                            for (col, s) in inside.iter().enumerate() {
                                m[(r, col)] /= c(vals[*s] - vals[*k]);
                            }
                        }
                        let x = &vc * m * vs.adjoint();
                        &x + x.adjoint()
                    })
                    .collect())
            }
        }
    }

    /// `‖P² - P‖ + ‖P - P^†‖`.
    pub fn projection_defect(&self, b: &[f64]) -> Result<f64> {
        let p = self.projector(b)?;
        Ok(linalg::max_abs(&(&p * &p - &p)) + linalg::max_abs(&(&p - p.adjoint())))
    }

    pub fn sign(&self, b: &[f64]) -> Result<CMat> {
        let p = self.projector(b)?;
        Ok(&p * c(2.0) - linalg::eye(p.nrows()))
    }
}

/// `Σ_i db_i ⊗ X_i`.
pub fn one_form(xs: &[CMat]) -> Form<CMat> {
    let mut f = Form::zero(xs.len());
    for (i, x) in xs.iter().enumerate() {
        f.insert(1 << i, Coef::even(x.clone()));
    }
    f
}

/// Ordinary trace of the coefficients, degree-wise.
pub fn trace_form(f: &Form<CMat>) -> Form<Cplx> {
    let mut out = Form::zero(f.p);
    for (m, co) in &f.parts {
        if let Some(x) = &co.even {
            out.insert(*m, Coef::even(linalg::trace(x)));
        }
    }
    out
}

/// `tr(X (dY)^{k})` from pointwise data.
pub fn trace_power(x: &CMat, dy: &[CMat], k: usize) -> Result<Form<Cplx>> {
    let d = one_form(dy);
    let pw = d.pow(k, linalg::eye(x.nrows()))?;
    Ok(trace_form(&Form::even0(dy.len(), x.clone()).wedge(&pw)?))
}

/// `ω_{2j} = tr(F (dF)^{2j})`.
pub fn omega_form(fam: &GrassmannFamily, b: &[f64], j: usize) -> Result<Form<Cplx>> {
    let f = fam.sign(b)?;
    let df: Vec<CMat> = fam.dprojector(b)?.into_iter().map(|x| x * c(2.0)).collect();
    trace_power(&f, &df, 2 * j)
}

/// `tr(P (dP)^{2j})`.
pub fn omega_p_form(fam: &GrassmannFamily, b: &[f64], j: usize) -> Result<Form<Cplx>> {
    trace_power(&fam.projector(b)?, &fam.dprojector(b)?, 2 * j)
}

/// `(tr(F (dF)²), 8 tr(P (dP)²))`.
pub fn hs_identity_check(fam: &GrassmannFamily, b: &[f64]) -> Result<(Form<Cplx>, Form<Cplx>)> {
    Ok((omega_form(fam, b, 1)?, omega_p_form(fam, b, 1)?.scale(c(8.0))))
}

/// `‖d ω_{2j}‖` with `d` by central differences of step `h`.
pub fn closedness_defect(fam: &GrassmannFamily, b: &[f64], j: usize, h: f64) -> Result<f64> {
    let me = fam.clone();
    let field = SampledField::unbounded(
        fam.p(),
        h,
        Arc::new(move |x: &[f64]| omega_form(&me, x, j).map_err(|e| FormError::Field(e.to_string()))),
    );
    Ok(field.d_at(b)?.max_abs())
}

/// Exterior derivative of a scalar form field by 4th-order central differences.
pub fn d_fourth_order(p: usize, h: f64, b: &[f64], f: &dyn Fn(&[f64]) -> Result<Form<Cplx>>) -> Result<Form<Cplx>> {
    let mut out = Form::zero(p);
    for i in 0..p {
        let at = |s: f64| -> Result<Form<Cplx>> {
            let mut x = b.to_vec();
            x[i] += s * h;
            f(&x)
        };
        let di = at(-2.0)?
            .sub(&at(2.0)?)?
            .add(&at(1.0)?.sub(&at(-1.0)?)?.scale(c(8.0)))?
            .scale(c(1.0 / (12.0 * h)));
        let dbi = Form::single(p, 1 << i, Coef::even(c(1.0)));
        out = out.add(&dbi.wedge(&di)?)?;
    }
    Ok(out)
}

// ------------------------------------------------------------ weighted forms on circle families

fn lift_log(l: &LogSymbol, m: usize) -> LogSymbol {
    LogSymbol { classical: l.classical.tensor_identity(m), log_part: l.log_part.tensor_identity(m) }
}

/// Symbols of `F(λ)(b)` and `∂_i F(λ)(b)`; the derivatives by 4th-order
/// differences in `b` with step `h`.
pub fn sign_symbols(fam: &DiracFamily, lambda: f64, b: &[f64], depth: usize, h: f64) -> Result<(ClassicalSymbol, Vec<ClassicalSymbol>)> {
    let f = |x: &[f64]| symbol_calc::sign_symbol(&fam.symbol(x, lambda, depth));
    let f0 = f(b)?;
    let mut ds = vec![];
    for i in 0..fam.params() {
        let at = |s: f64| {
            let mut x = b.to_vec();
            x[i] += s * h;
            f(&x)
        };
        let d = at(-2.0)?
            .sub(&at(2.0)?)?
            .add_scaled(&at(1.0)?.sub(&at(-1.0)?)?, c(8.0))?
            .scale(c(1.0 / (12.0 * h)));
        ds.push(d);
    }
    Ok((f0, ds))
}

/// Largest effective order among the `∂_i F` symbols (`-∞` if all vanish to `tol`).
pub fn df_order(dfs: &[ClassicalSymbol], tol: f64) -> f64 {
    dfs.iter().filter_map(|d| d.effective_order(tol)).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone)]
pub struct DefectReport {
    /// `d ω^Q_{2j}` from the truncated lattice (4th-order differences).
    pub lattice: Form<Cplx>,
    /// `(1/2q) res([log Q, F] (dF)^{2j+1} F)`.
    pub residue: Form<Cplx>,
    pub df_order: f64,
}

/// `ω^Q_{2j} = tr^Q(F (dF)^{2j})` on the truncated lattice; requires the
/// symbol audit to show `F (dF)^{2j}` is trace class (order `< -1`), in
/// which case the weighted trace is the ordinary one and `Q` drops out.
/// `perturbation` adds a fixed operator to `F` (locality checks).
pub fn omega_weighted(
    fam: &DiracFamily,
    lambda: f64,
    b: &[f64],
    j: usize,
    weight: &Weight,
    depth: usize,
    perturbation: Option<&CMat>,
) -> Result<Form<Cplx>> {
    weight.log_symbol(depth)?;
    let (_, dfs) = sign_symbols(fam, lambda, b, depth, 1e-3)?;
    let ord = df_order(&dfs, 1e-9);
    if 2.0 * j as f64 * ord >= -1.0 {
        return Err(GrassmannError::NotTraceClass { power: 2 * j, order: 2.0 * j as f64 * ord });
    }
    let g = GrassmannFamily::above(fam.clone(), lambda)?;
    let mut f = g.sign(b)?;
    if let Some(k) = perturbation {
        f += k;
    }
    let df: Vec<CMat> = g.dprojector(b)?.into_iter().map(|x| x * c(2.0)).collect();
    trace_power(&f, &df, 2 * j)
}

/// `(1/2q) res([log Q, F] (dF)^{2j+1} F)` from symbols.
pub fn residue_defect(fam: &DiracFamily, lambda: f64, b: &[f64], j: usize, weight: &Weight, depth: usize) -> Result<(Form<Cplx>, f64)> {
    let (f, dfs) = sign_symbols(fam, lambda, b, depth, 1e-3)?;
    let logq = lift_log(&weight.log_symbol(depth)?, fam.m);
    let comm = symbol_calc::log_commutator(&f, &logq)?.scale(c(-1.0)).into_classical()?;
    let p = dfs.len();
    let mut dform: Form<ClassicalSymbol> = Form::zero(p);
    for (i, d) in dfs.iter().enumerate() {
        dform.insert(1 << i, Coef::even(d.clone()));
    }
    let mut prod = Form::even0(p, comm);
    for _ in 0..(2 * j + 1) {
        prod = prod.wedge(&dform)?;
    }
    prod = prod.wedge(&Form::even0(p, f))?;
    let q = weight.order();
    let mut out = Form::zero(p);
    for (m, co) in &prod.parts {
        if let Some(x) = &co.even {
            out.insert(*m, Coef::even(symbol_calc::wodzicki_residue(x)? / c(2.0 * q)));
        }
    }
    Ok((out, df_order(&dfs, 1e-9)))
}

/// Both sides of `d ω^Q_{2j} = (1/2q) res([log Q, F](dF)^{2j+1} F)`.
pub fn defect_check(
    fam: &DiracFamily,
    lambda: f64,
    b: &[f64],
    j: usize,
    weight: &Weight,
    depth: usize,
    h: f64,
    perturbation: Option<&CMat>,
) -> Result<DefectReport> {
    let field = |x: &[f64]| omega_weighted(fam, lambda, x, j, weight, depth, perturbation);
    let lattice = d_fourth_order(fam.params(), h, b, &field)?;
    let (residue, df_order) = residue_defect(fam, lambda, b, j, weight, depth)?;
    Ok(DefectReport { lattice, residue, df_order })
}

#[derive(Debug, Clone)]
pub struct RenormReport {
    pub form: Form<Cplx>,
    /// `(2j+1)·ord(dF) < -1`: the correction `θ^Q` vanishes identically.
    pub theta_vanishes: bool,
    pub df_order: f64,
}

/// `ω^ren_{2j} = ω^Q_{2j} - θ^Q_{2j}`, `θ^Q` the contraction of the residue
/// defect along `path` (skipped when the order audit shows it vanishes).
pub fn renormalized_omega(
    fam: &DiracFamily,
    lambda: f64,
    b: &[f64],
    j: usize,
    weight: &Weight,
    depth: usize,
    path: &Homotopy,
) -> Result<RenormReport> {
    let (_, dfs) = sign_symbols(fam, lambda, b, depth, 1e-3)?;
    let ord = df_order(&dfs, 1e-9);
    let omega = omega_weighted(fam, lambda, b, j, weight, depth, None)?;
    let theta_vanishes = (2 * j + 1) as f64 * ord < -1.0;
    if theta_vanishes {
        return Ok(RenormReport { form: omega, theta_vanishes, df_order: ord });
    }
    let defect = |y: &[f64]| -> std::result::Result<Form<Cplx>, FormError> {
        residue_defect(fam, lambda, y, j, weight, depth).map(|r| r.0).map_err(|e| FormError::Field(e.to_string()))
    };
    let (theta, _) = crate::graded_forms::contract_integrate(&defect, path, b, 16, 1e-8)?;
    Ok(RenormReport { form: omega.sub(&theta)?, theta_vanishes, df_order: ord })
}

// ------------------------------------------------------------ cocycles

#[derive(Debug, Clone)]
pub struct CocycleReport {
    /// `‖ω^{λλ''} - ω^{λλ'} - ω^{λ'λ''}‖` for window forms `tr(P dP dP)`.
    pub additivity: f64,
    /// `‖[tr F dF²](λ) - [tr F dF²](λ') - 8([tr P dP²](λ) - [tr P dP²](λ'))‖`.
    pub fp_trace: f64,
    /// `‖[tr P dP²](λ) - [tr P dP²](λ') - ω^{λλ'}‖`.
    pub fp_window: f64,
    /// `‖tr(P dP' dP'')‖` for `P = 1 - P(λ)`, `P' = P(λ')`, `P'' = P(λλ')`.
    pub triple: f64,
    pub ranks: [usize; 3],
}

pub fn cocycle_check(fam: &DiracFamily, b: &[f64], lambda: f64, lambda_p: f64, lambda_pp: f64) -> Result<CocycleReport> {
    if !(lambda < lambda_p && lambda_p < lambda_pp) {
        return Err(GrassmannError::Window("need λ < λ' < λ''".into()));
    }
    let w = |l0: f64, l1: f64| GrassmannFamily::window(fam.clone(), l0, l1);
    let (w01, w12, w02) = (w(lambda, lambda_p)?, w(lambda_p, lambda_pp)?, w(lambda, lambda_pp)?);
    let om = |g: &GrassmannFamily| omega_p_form(g, b, 1);
    let additivity = om(&w02)?.sub(&om(&w01)?)?.sub(&om(&w12)?)?.max_abs();

    let (a0, a1) = (GrassmannFamily::above(fam.clone(), lambda)?, GrassmannFamily::above(fam.clone(), lambda_p)?);
    let fp_trace = omega_form(&a0, b, 1)?
        .sub(&omega_form(&a1, b, 1)?)?
        .sub(&om(&a0)?.sub(&om(&a1)?)?.scale(c(8.0)))?
        .max_abs();
    let fp_window = om(&a0)?.sub(&om(&a1)?)?.sub(&om(&w01)?)?.max_abs();

    let n = fam.dim();
    let p_rest = linalg::eye(n) - a0.projector(b)?;
    let (d1, d2) = (a1.dprojector(b)?, w01.dprojector(b)?);
    let mixed = Form::even0(fam.params(), p_rest).wedge(&one_form(&d1))?.wedge(&one_form(&d2))?;
    let triple = trace_form(&mixed).max_abs();
    let rank = |g: &GrassmannFamily| -> Result<usize> { Ok(linalg::trace(&g.projector(b)?).re.round() as usize) };
    Ok(CocycleReport { additivity, fp_trace, fp_window, triple, ranks: [rank(&w01)?, rank(&w12)?, rank(&w02)?] })
}

/// `(ω_2(X,Y), dω_1(X,Y)) = (tr(P[[P,X],[P,Y]]), -tr([X,Y] P))` for gauge
/// directions acting by conjugation.
pub fn gauge_orbit_trivialization(p: &CMat, x: &CMat, y: &CMat) -> (Cplx, Cplx) {
    let px = linalg::comm(p, x);
    let py = linalg::comm(p, y);
    let w2 = linalg::trace(&(p * linalg::comm(&px, &py)));
    let w1 = -linalg::trace(&(linalg::comm(x, y) * p));
    (w2, w1)
}

/// `ω_1(X) = -tr(X P)`.
pub fn omega_one(p: &CMat, x: &CMat) -> Cplx {
    -linalg::trace(&(x * p))
}

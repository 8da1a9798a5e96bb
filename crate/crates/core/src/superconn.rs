//! Superconnections `𝔸 = D + ∇ (+ 𝔸_[2])` over matrix and circle-symbol models.
//!
//! The connection is stored as the odd form `Θ = D + θ + 𝔸_[2]` with `D` in
//! the odd slot (odd operator in split mode, `σD` in sigma mode), so that
//! `𝔸² = dΘ + Θ∧Θ`.

use crate::graded_forms::{
    degree, Coef, Coefficient, Form, FormError, FormField, Grading, PolyCoef, PolyField, SampledField,
};
use crate::lattice_spec::{self, DiracFamily, LatticeError};
use crate::regularization::{self, RegError};
use crate::symbol_calc::{self, ClassicalSymbol, SymbolError};
use crate::{linalg, CMat, Cplx, Rational};
use nalgebra::DMatrix;
use num_traits::{One, Zero};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SuperconnError {
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error("λ = {lambda} lies on the spectrum (eigenvalue {eigenvalue})")]
    OnSpectrum { lambda: f64, eigenvalue: f64 },
    #[error("ad-chain did not terminate within depth {0}")]
    NonTerminating(u32),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("spectral crossing at a = {a} for λ = {lambda}")]
    Crossing { a: f64, lambda: f64 },
}

pub type Result<T> = std::result::Result<T, SuperconnError>;

fn c(x: f64) -> Cplx {
    Cplx::new(x, 0.0)
}

// ------------------------------------------------------------ fields

struct Mix {
    f0: Arc<dyn FormField<CMat>>,
    f1: Arc<dyn FormField<CMat>>,
    t: f64,
}

impl FormField<CMat> for Mix {
    fn p(&self) -> usize {
        self.f0.p()
    }
    fn at(&self, b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        self.f0.at(b)?.scale(c(1.0 - self.t)).add(&self.f1.at(b)?.scale(c(self.t)))
    }
    fn d_at(&self, b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        self.f0.d_at(b)?.scale(c(1.0 - self.t)).add(&self.f1.d_at(b)?.scale(c(self.t)))
    }
}

/// Degree-`k` part scaled by `t^{shift - k}`.
fn rescale_degrees(f: &Form<CMat>, t: f64, shift: i32) -> Form<CMat> {
    let mut out = Form::zero(f.p);
    for (m, co) in &f.parts {
        let k = degree(*m) as i32;
        let s = t.powi(shift - k);
        out.insert(*m, Coef { even: co.even.as_ref().map(|x| x * c(s)), odd: co.odd.as_ref().map(|x| x * c(s)) });
    }
    out
}

struct Rescaled {
    inner: Arc<dyn FormField<CMat>>,
    t: f64,
}

impl FormField<CMat> for Rescaled {
    fn p(&self) -> usize {
        self.inner.p()
    }
    fn at(&self, b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        Ok(rescale_degrees(&self.inner.at(b)?, self.t, 1))
    }
    fn d_at(&self, b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        Ok(rescale_degrees(&self.inner.d_at(b)?, self.t, 2))
    }
}

struct FamilyField {
    fam: DiracFamily,
    lambda: f64,
}

impl FormField<CMat> for FamilyField {
    fn p(&self) -> usize {
        self.fam.params()
    }
    fn at(&self, b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        let n = self.fam.dim();
        let d = self.fam.matrix(b) - linalg::eye(n) * c(self.lambda);
        Ok(Form::odd0(self.p(), d))
    }
    fn d_at(&self, _b: &[f64]) -> std::result::Result<Form<CMat>, FormError> {
        let mut out = Form::zero(self.p());
        for i in 0..self.p() {
            out.insert(1 << i, Coef::odd(self.fam.matrix_derivative(i)));
        }
        Ok(out)
    }
}

// ------------------------------------------------------------ superconnection

pub type MatFn = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;
pub type FormFn = Arc<dyn Fn(&[f64]) -> Form<CMat> + Send + Sync>;

#[derive(Clone)]
pub struct Superconnection {
    pub grading: Grading<CMat>,
    pub field: Arc<dyn FormField<CMat>>,
}

impl Superconnection {
    /// Exact polynomial connection form `Θ`.
    pub fn from_poly(grading: Grading<CMat>, theta: Form<PolyCoef<CMat>>) -> Self {
        Superconnection { grading, field: Arc::new(PolyField { form: theta }) }
    }

    /// Sampled `D(b)`, optional connection one-form and degree-two part; `d`
    /// by central differences with step `h`.
    pub fn from_fields(
        grading: Grading<CMat>,
        p: usize,
        dirac: MatFn,
        theta: Option<FormFn>,
        a2: Option<FormFn>,
        h: f64,
    ) -> Result<Self> {
        if p > crate::graded_forms::MAX_PATCH {
            return Err(FormError::PatchTooLarge(p).into());
        }
        let f = move |b: &[f64]| -> std::result::Result<Form<CMat>, FormError> {
            let mut out = Form::odd0(p, dirac(b));
            if let Some(t) = &theta {
                out = out.add(&t(b))?;
            }
            if let Some(t) = &a2 {
                out = out.add(&t(b))?;
            }
            Ok(out)
        };
        Ok(Superconnection { grading, field: Arc::new(SampledField::unbounded(p, h, Arc::new(f))) })
    }

    /// `σ(D(b) - λ) + d` on a truncated circle family (sigma mode, analytic `d`).
    pub fn from_family(fam: DiracFamily, lambda: f64) -> Self {
        Superconnection { grading: Grading::Sigma, field: Arc::new(FamilyField { fam, lambda }) }
    }

    pub fn p(&self) -> usize {
        self.field.p()
    }

    pub fn theta(&self, b: &[f64]) -> Result<Form<CMat>> {
        Ok(self.field.at(b)?)
    }

    /// `𝔸_[0] = D(b)`.
    pub fn dirac(&self, b: &[f64]) -> Result<CMat> {
        let t = self.field.at(b)?;
        t.get(0)
            .and_then(|co| co.odd.clone())
            .ok_or_else(|| SuperconnError::BadParameter("connection has no degree-0 operator".into()))
    }

    /// `𝔸² = dΘ + Θ∧Θ`.
    pub fn curvature(&self, b: &[f64]) -> Result<Form<CMat>> {
        let t = self.field.at(b)?;
        Ok(self.field.d_at(b)?.add(&t.wedge(&t)?)?)
    }

    /// `str((𝔸²)^j)`, all degrees.
    pub fn chern_form(&self, b: &[f64], j: usize) -> Result<Form<Cplx>> {
        let f = self.curvature(b)?;
        let m = f.parts.values().next().and_then(|co| co.even.as_ref().or(co.odd.as_ref())).map_or(1, |x| x.nrows());
        Ok(f.pow(j, linalg::eye(m))?.supertrace(&self.grading))
    }

    /// `‖d str(𝔸^{2j})_[2j]‖` by central differences with step `h`.
    pub fn closedness_defect(&self, b: &[f64], j: usize, h: f64) -> Result<f64> {
        let me = self.clone();
        let field = SampledField::unbounded(
            self.p(),
            h,
            Arc::new(move |x: &[f64]| me.chern_form(x, j).map(|f| f.part(2 * j)).map_err(|e| FormError::Field(e.to_string()))),
        );
        Ok(field.d_at(b)?.max_abs())
    }

    /// `(1-t)Θ_0 + tΘ_1`.
    pub fn interpolate(&self, other: &Self, t: f64) -> Self {
        Superconnection { grading: self.grading.clone(), field: Arc::new(Mix { f0: self.field.clone(), f1: other.field.clone(), t }) }
    }

    /// `∫_0^1 j str(𝔸̇_t (𝔸_t²)^{j-1}) dt` along the straight path to `other`,
    /// whose `d` is the change of `str(𝔸^{2j})` (Gauss-Legendre, exact here).
    pub fn variation_potential(&self, other: &Self, b: &[f64], j: usize) -> Result<Form<Cplx>> {
        let dot = other.field.at(b)?.sub(&self.field.at(b)?)?;
        let m = self.dirac(b)?.nrows();
        let mut acc = Form::zero(self.p());
        for (x, w) in gauss_legendre(j + 1) {
            let f = self.interpolate(other, x).curvature(b)?;
            let integrand = dot.wedge(&f.pow(j - 1, linalg::eye(m))?)?.supertrace(&self.grading);
            acc = acc.add(&integrand.scale(c(w * j as f64)))?;
        }
        Ok(acc)
    }

    /// `((λ - 𝔸²)^{-1})_[≤K] = Σ_l ((λ-D²)^{-1} 𝔸²_[>0])^l (λ-D²)^{-1}`, cut at degree `K`.
    pub fn resolvent_truncation(&self, b: &[f64], lambda: f64, k_max: usize) -> Result<Form<CMat>> {
        let f = self.curvature(b)?;
        let q = f.get(0).and_then(|co| co.even.clone()).ok_or_else(|| SuperconnError::BadParameter("no D²".into()))?;
        let n = q.nrows();
        let (vals, _) = linalg::eigh(&q);
        if let Some(v) = vals.iter().find(|v| (**v - lambda).abs() < 1e-12) {
            return Err(SuperconnError::OnSpectrum { lambda, eigenvalue: *v });
        }
        let r0 = (linalg::eye(n) * c(lambda) - &q)
            .try_inverse()
            .ok_or(SuperconnError::OnSpectrum { lambda, eigenvalue: lambda })?;
        let r = Form::even0(self.p(), r0);
        let v = f.positive();
        let rv = r.wedge(&v)?;
        let mut term = r.clone();
        let mut acc = r;
        for _ in 0..k_max {
            term = rv.wedge(&term)?;
            acc = acc.add(&term)?;
        }
        Ok(truncate_degree(&acc, k_max))
    }

    /// `tD + ∇ + 𝔸_[2]/t`.
    pub fn getzler_rescale(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(SuperconnError::BadParameter(format!("rescaling needs t > 0, got {t}")));
        }
        Ok(Superconnection { grading: self.grading.clone(), field: Arc::new(Rescaled { inner: self.field.clone(), t }) })
    }

    /// `(str(Ā_t^{2j} e^{-Ā_t²}), Σ_k t^{2j-k} str(𝔸^{2j} e^{-t²𝔸²})_[k])`.
    pub fn rescale_identity_check(&self, b: &[f64], j: usize, t: f64) -> Result<(Form<Cplx>, Form<Cplx>)> {
        let m = self.dirac(b)?.nrows();
        let fb = self.getzler_rescale(t)?.curvature(b)?;
        let lhs = fb.pow(j, linalg::eye(m))?.wedge(&form_exp_neg(&fb)?)?.supertrace(&self.grading);
        let f = self.curvature(b)?;
        let heat = form_exp_neg(&f.scale(c(t * t)))?;
        let inner = f.pow(j, linalg::eye(m))?.wedge(&heat)?.supertrace(&self.grading);
        let mut rhs = Form::zero(self.p());
        for (mask, co) in &inner.parts {
            let k = degree(*mask) as i32;
            rhs.insert(*mask, co.scale(c(t.powi(2 * j as i32 - k))));
        }
        Ok((lhs, rhs))
    }
}

fn truncate_degree<M: Coefficient>(f: &Form<M>, k: usize) -> Form<M> {
    Form { p: f.p, parts: f.parts.iter().filter(|(m, _)| degree(**m) <= k).map(|(m, co)| (*m, co.clone())).collect() }
}

/// Gauss-Legendre nodes and weights on `[0,1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    // Golub-Welsch on the Jacobi matrix
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let k = i as f64;
        let beta = k / (4.0 * k * k - 1.0).sqrt();
        j[(i, i - 1)] = beta;
        j[(i - 1, i)] = beta;
    }
    let eig = j.symmetric_eigen();
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let w = 2.0 * eig.eigenvectors[(0, i)].powi(2);
            ((x + 1.0) / 2.0, w / 2.0)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

// ------------------------------------------------------------ Duhamel

/// `f[x_0,…,x_l]` for `f(x) = e^{-x}`, as the corner entry of `exp(-J)`
/// with `J` upper bidiagonal (diagonal `x`, superdiagonal 1).
pub fn exp_divided_difference(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n == 1 {
        return (-xs[0]).exp();
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = -xs[i];
        if i + 1 < n {
            j[(i, i + 1)] = -1.0;
        }
    }
    j.exp()[(0, n - 1)]
}

fn matrix_entry_form(f: &Form<CMat>, r: usize, col: usize) -> Form<Cplx> {
    let mut out = Form::zero(f.p);
    for (m, co) in &f.parts {
        let e = co.even.as_ref().map(|x| x[(r, col)]).filter(|v| *v != Cplx::zero());
        let o = co.odd.as_ref().map(|x| x[(r, col)]).filter(|v| *v != Cplx::zero());
        out.insert(*m, Coef { even: e, odd: o });
    }
    out
}

/// Partial sums `S_0, …, S_{l_max}` of the Duhamel expansion of `e^{-(Q+R)}`,
/// `Q` hermitian, the `l`-th term `Σ_path f[λ_path] E R E ⋯ R E` in the
/// eigenbasis of `Q`.
pub fn duhamel_expand(q: &CMat, r: &Form<CMat>, l_max: usize) -> Result<Vec<Form<CMat>>> {
    if !linalg::is_hermitian(q, 1e-10) {
        return Err(SuperconnError::BadParameter("Duhamel base must be hermitian".into()));
    }
    let p = r.p;
    let n = q.nrows();
    let (vals, v) = linalg::eigh(q);
    let vd = v.adjoint();
    let rt = r.map(|x| &vd * x * &v);
    let entries: Vec<Vec<Form<Cplx>>> = (0..n).map(|a| (0..n).map(|b| matrix_entry_form(&rt, a, b)).collect()).collect();
    let nonzero: Vec<Vec<usize>> = (0..n).map(|a| (0..n).filter(|b| !entries[a][*b].parts.is_empty()).collect()).collect();

    // paths[a][b] = Σ over paths a→…→b of length l: (node list, product form)
    let mut frontier: Vec<(Vec<usize>, Form<Cplx>)> = (0..n).map(|a| (vec![a], Form::even0(p, c(1.0)))).collect();
    let mut sums = Vec::with_capacity(l_max + 1);
    let mut acc = Form::<CMat>::zero(p);
    for l in 0..=l_max {
        let mut term = Form::<CMat>::zero(p);
        let mut grouped: BTreeMap<(u8, bool, usize, usize), Cplx> = BTreeMap::new();
        for (path, prod) in &frontier {
            let w = exp_divided_difference(&path.iter().map(|i| vals[*i]).collect::<Vec<_>>());
            let (a, b) = (path[0], *path.last().expect("nonempty"));
            for (m, co) in &prod.parts {
                if let Some(x) = co.even {
                    *grouped.entry((*m, false, a, b)).or_insert_with(Cplx::zero) += x * w;
                }
                if let Some(x) = co.odd {
                    *grouped.entry((*m, true, a, b)).or_insert_with(Cplx::zero) += x * w;
                }
            }
        }
        for ((m, odd, a, b), x) in grouped {
            let mut mat = CMat::zeros(n, n);
            mat[(a, b)] = x;
            let co = if odd { Coef::odd(mat) } else { Coef::even(mat) };
            term.insert(m, co);
        }
        acc = acc.add(&term.map(|x| &v * x * &vd))?;
        sums.push(acc.clone());
        if l == l_max {
            break;
        }
        let mut next = Vec::new();
        for (path, prod) in &frontier {
            let last = *path.last().expect("nonempty");
            for &b in &nonzero[last] {
                let np = prod.wedge(&entries[last][b])?;
                if np.parts.is_empty() {
                    continue;
                }
                let mut nodes = path.clone();
                nodes.push(b);
                next.push((nodes, np));
            }
        }
        frontier = next;
    }
    Ok(sums)
}

/// `e^{-X}` for a form whose degree-0 part is an even hermitian operator;
/// exact, since the positive-degree part is nilpotent.
pub fn form_exp_neg(x: &Form<CMat>) -> Result<Form<CMat>> {
    let zero = x.get(0);
    if zero.is_some_and(|co| co.odd.is_some()) {
        return Err(SuperconnError::BadParameter("degree-0 part must be even".into()));
    }
    let n = x.parts.values().next().and_then(|co| co.even.as_ref().or(co.odd.as_ref())).map_or(1, |m| m.nrows());
    let top = x.parts.keys().map(|m| degree(*m)).max().unwrap_or(0);
    // path sums grow like n^{p+1}; past that, scale and square
    if (n as f64).powi(x.p as i32 + 1) > 2e5 && top > 0 {
        return form_exp_scaled(x, n);
    }
    let q = zero.and_then(|co| co.even.clone()).unwrap_or_else(|| CMat::zeros(n, n));
    let sums = duhamel_expand(&q, &x.positive(), x.p)?;
    Ok(sums.last().cloned().expect("at least one partial sum"))
}

/// `e^{-X} = (e^{-X/2^k})^{2^k}` with a Taylor series for the scaled form.
fn form_exp_scaled(x: &Form<CMat>, n: usize) -> Result<Form<CMat>> {
    let size: f64 = x.parts.values().map(|co| co.max_abs()).sum::<f64>() * n as f64;
    let k = if size > 0.25 { (size / 0.25).log2().ceil() as i32 } else { 0 };
    let y = x.scale(c(-(2f64.powi(-k))));
    let one = Form::even0(x.p, linalg::eye(n));
    let mut term = one.clone();
    let mut acc = one;
    for i in 1..=30 {
        term = term.wedge(&y)?.scale(c(1.0 / i as f64));
        acc = acc.add(&term)?;
        if term.max_abs() < 1e-18 * acc.max_abs() {
            break;
        }
    }
    for _ in 0..k {
        acc = acc.wedge(&acc)?;
    }
    Ok(acc)
}

// ------------------------------------------------------------ reordering, c(k)

pub type RatMat = DMatrix<Rational>;

fn binom_rat(n: i64, k: i64) -> Rational {
    if k < 0 || n < k {
        return Rational::zero();
    }
    (0..k).fold(Rational::one(), |acc, i| acc * Rational::from_integer(n - i) / Rational::from_integer(i + 1))
}

/// Coefficient of `A_1^{(k_1)}⋯A_l^{(k_l)} R^{|k|+l}` in the reordered
/// string `R A_1 R A_2 ⋯ R A_l R` (`R = (λ - D²)^{-1}`, `A^{(k)} = ad_{D²}^k A`),
/// from pushing resolvents right one step at a time.
pub fn ck_coefficient(k: &[u32]) -> Rational {
    ck_with_power(1, k)
}

fn ck_with_power(h: u32, k: &[u32]) -> Rational {
    let mut acc = Rational::one();
    let mut power = h as i64;
    for ki in k {
        let ki = *ki as i64;
        acc *= binom_rat(power + ki - 1, ki);
        power += ki + 1;
    }
    acc
}

/// `(|k|+l)! / (Π k_i! · Π_{i<l} (K_i + i))`, `K_i` the partial sums.
pub fn ck_printed(k: &[u32]) -> Rational {
    let l = k.len() as i64;
    let total: i64 = k.iter().map(|x| *x as i64).sum();
    let fact = |n: i64| (1..=n).fold(Rational::one(), |a, i| a * Rational::from_integer(i));
    let mut den = k.iter().fold(Rational::one(), |a, x| a * fact(*x as i64));
    let mut partial = 0i64;
    for (i, ki) in k.iter().enumerate().take(k.len().saturating_sub(1)) {
        partial += *ki as i64;
        den *= Rational::from_integer(partial + i as i64 + 1);
    }
    fact(total + l) / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkRow {
    pub k: Vec<u32>,
    pub recursion: Rational,
    pub printed: Rational,
}

/// All multi-indices with `1 <= l <= l_max`, `|k| <= k_max`.
pub fn ck_table(k_max: u32, l_max: usize) -> Vec<CkRow> {
    let mut rows = vec![];
    for l in 1..=l_max {
        let mut k = vec![0u32; l];
        loop {
            if k.iter().sum::<u32>() <= k_max {
                rows.push(CkRow { k: k.clone(), recursion: ck_coefficient(&k), printed: ck_printed(&k) });
            }
            // odometer
            let mut i = 0;
            loop {
                if i == l {
                    break;
                }
                k[i] += 1;
                if k[i] <= k_max {
                    break;
                }
                k[i] = 0;
                i += 1;
            }
            if i == l {
                break;
            }
        }
    }
    rows
}

pub fn rat_identity(n: usize) -> RatMat {
    RatMat::from_fn(n, n, |r, col| if r == col { Rational::one() } else { Rational::zero() })
}

fn rat_is_zero(m: &RatMat) -> bool {
    m.iter().all(|x| x.is_zero())
}

/// `ad_Δ^k(A)`.
pub fn ad_power(delta: &RatMat, a: &RatMat, k: u32) -> RatMat {
    let mut x = a.clone();
    for _ in 0..k {
        x = delta * &x - &x * delta;
    }
    x
}

/// Exact inverse by Gauss-Jordan; `None` if singular.
pub fn rat_inverse(m: &RatMat) -> Option<RatMat> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = rat_identity(n);
    for col in 0..n {
        let piv = (col..n).find(|r| !a[(*r, col)].is_zero())?;
        a.swap_rows(col, piv);
        inv.swap_rows(col, piv);
        let p = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for r in 0..n {
            if r != col && !a[(r, col)].is_zero() {
                let f = a[(r, col)];
                for j in 0..n {
                    let (ac, ic) = (a[(col, j)], inv[(col, j)]);
                    a[(r, j)] -= f * ac;
                    inv[(r, j)] -= f * ic;
                }
            }
        }
    }
    Some(inv)
}

/// One reordered term: `coefficient · A_1^{(k_1)}⋯A_l^{(k_l)} R^{power}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorderTerm {
    pub k: Vec<u32>,
    pub coefficient: Rational,
    pub power: u32,
    pub operator: RatMat,
}

/// Push every resolvent in `R^h A_1 R A_2 ⋯ R A_l R` to the right, using
/// `R^h A = Σ_k C(h+k-1, k) A^{(k)} R^{h+k}` until the ad-chains vanish.
pub fn reorder_expansion(h: u32, parts: &[RatMat], delta: &RatMat, max_depth: u32) -> Result<Vec<ReorderTerm>> {
    if h == 0 {
        return Err(SuperconnError::BadParameter("leading power must be positive".into()));
    }
    let mut chains: Vec<Vec<RatMat>> = Vec::new();
    for a in parts {
        let mut chain = vec![a.clone()];
        loop {
            let last = chain.last().expect("nonempty");
            if rat_is_zero(last) {
                chain.pop();
                break;
            }
            if chain.len() as u32 > max_depth {
                return Err(SuperconnError::NonTerminating(max_depth));
            }
            chain.push(delta * last - last * delta);
        }
        chains.push(chain);
    }
    let n = delta.nrows();
    let mut terms = vec![];
    let mut stack: Vec<(Vec<u32>, RatMat)> = vec![(vec![], rat_identity(n))];
    while let Some((k, op)) = stack.pop() {
        if k.len() == parts.len() {
            let total: u32 = k.iter().sum();
            terms.push(ReorderTerm {
                coefficient: ck_with_power(h, &k),
                power: h + total + parts.len() as u32,
                k,
                operator: op,
            });
            continue;
        }
        let chain = &chains[k.len()];
        for (ki, a) in chain.iter().enumerate().rev() {
            let mut nk = k.clone();
            nk.push(ki as u32);
            stack.push((nk, &op * a));
        }
    }
    terms.sort_by(|a, b| a.k.cmp(&b.k));
    Ok(terms)
}

/// `Σ coefficient · operator · R^{power}` at `R = (λ - Δ)^{-1}`.
pub fn reorder_value(terms: &[ReorderTerm], delta: &RatMat, lambda: Rational) -> Result<RatMat> {
    let n = delta.nrows();
    let r = resolvent_exact(delta, lambda)?;
    let mut acc = RatMat::from_element(n, n, Rational::zero());
    for t in terms {
        let mut rp = rat_identity(n);
        for _ in 0..t.power {
            rp = &rp * &r;
        }
        acc += (&t.operator * rp) * t.coefficient;
    }
    Ok(acc)
}

/// `R^h A_1 R A_2 ⋯ R A_l R` multiplied out directly.
pub fn string_value(h: u32, parts: &[RatMat], delta: &RatMat, lambda: Rational) -> Result<RatMat> {
    let r = resolvent_exact(delta, lambda)?;
    let mut acc = rat_identity(delta.nrows());
    for _ in 0..h {
        acc = &acc * &r;
    }
    for a in parts {
        acc = &acc * a * &r;
    }
    Ok(acc)
}

fn resolvent_exact(delta: &RatMat, lambda: Rational) -> Result<RatMat> {
    let n = delta.nrows();
    rat_inverse(&(rat_identity(n) * lambda - delta))
        .ok_or_else(|| SuperconnError::BadParameter(format!("λ = {lambda} is an eigenvalue")))
}

// ------------------------------------------------------------ |𝔸|^{2s} series

/// `((𝔸²)^s)` from `Q = 𝔸²_[0]` and `V = 𝔸²_[>0]`:
/// `Σ_l Σ_k C(s, |k|+l) c(k) V^{(k_1)}⋯V^{(k_l)} Q^{s-|k|-l}`.
/// `power(e)` returns `Q^e`; `keep` prunes negligible strings; `k_cap` bounds `|k|`.
pub fn abs_power_series<M: Coefficient>(
    q: &M,
    v: &Form<M>,
    s: f64,
    power: &dyn Fn(f64) -> Result<M>,
    keep: &dyn Fn(&M) -> bool,
    k_cap: u32,
) -> Result<Form<M>> {
    let p = v.p;
    let qf = Form::even0(p, q.clone());
    // ad chains of V
    let mut chain: Vec<Form<M>> = vec![v.clone()];
    while (chain.len() as u32) <= k_cap {
        let last = chain.last().expect("nonempty");
        let next = prune_form(&qf.graded_commutator(last)?, keep);
        if next.parts.is_empty() {
            break;
        }
        chain.push(next);
    }
    let binom = |n: usize| (0..n).fold(1.0, |acc, i| acc * (s - i as f64) / (i as f64 + 1.0));
    let mut acc = Form::even0(p, power(s)?);
    for l in 1..=p {
        let mut k = vec![0u32; l];
        loop {
            let total: u32 = k.iter().sum();
            if total <= k_cap && k.iter().all(|ki| (*ki as usize) < chain.len()) {
                let mut prod = chain[k[0] as usize].clone();
                for ki in &k[1..] {
                    prod = prod.wedge(&chain[*ki as usize])?;
                    if prod.parts.is_empty() {
                        break;
                    }
                }
                if !prod.parts.is_empty() {
                    let e = s - total as f64 - l as f64;
                    let w = binom(total as usize + l) * rat_to_f64(ck_coefficient(&k));
                    let term = prune_form(&prod.wedge(&Form::even0(p, power(e)?))?, keep);
                    acc = acc.add(&term.scale(c(w)))?;
                }
            }
            let mut i = 0;
            while i < l {
                k[i] += 1;
                if k[i] <= k_cap {
                    break;
                }
                k[i] = 0;
                i += 1;
            }
            if i == l {
                break;
            }
        }
    }
    Ok(acc)
}

fn prune_form<M: Coefficient>(f: &Form<M>, keep: &dyn Fn(&M) -> bool) -> Form<M> {
    let mut out = Form::zero(f.p);
    for (m, co) in &f.parts {
        out.insert(*m, Coef { even: co.even.clone().filter(|x| keep(x)), odd: co.odd.clone().filter(|x| keep(x)) });
    }
    out
}

fn rat_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `|𝔸|^{2j-1}` on a matrix model with `𝔸²_[0]` central and positive.
pub fn abs_power_central(curv: &Form<CMat>, s: f64) -> Result<Form<CMat>> {
    let q = curv.get(0).and_then(|co| co.even.clone()).ok_or_else(|| SuperconnError::BadParameter("no D²".into()))?;
    let n = q.nrows();
    let q0 = q[(0, 0)];
    if linalg::max_abs(&(&q - linalg::eye(n) * q0)) > 1e-14 || !(q0.re > 0.0) || q0.im != 0.0 {
        return Err(SuperconnError::BadParameter("degree-0 curvature must be a positive multiple of I".into()));
    }
    let power = |e: f64| Ok(linalg::eye(n) * c(q0.re.powf(e)));
    abs_power_series(&q, &curv.positive(), s, &power, &|m: &CMat| linalg::max_abs(m) > 0.0, 0)
}

// ------------------------------------------------------------ residue Chern forms

fn trim_symbol(a: &ClassicalSymbol) -> ClassicalSymbol {
    let scale = a.max_abs().max(1.0);
    let z = a.terms.iter().take_while(|t| t.is_zero() || term_max(t) < 1e-13 * scale).count();
    if z == 0 {
        return a.clone();
    }
    ClassicalSymbol { order: a.order - z as f64, rank: a.rank, depth: a.depth - z, terms: a.terms[z..].to_vec() }
}

fn term_max(t: &symbol_calc::HomogeneousTerm) -> f64 {
    symbol_calc::table::max_abs(&t.plus).max(symbol_calc::table::max_abs(&t.minus))
}

/// `sres(|𝔸|^{2j-1})` for a circle symbol model: `q` the symbol of `𝔸²_[0]`
/// (scalar positive leading part), `v` the positive-degree curvature with
/// symbol coefficients (sigma mode). Strings whose order drops below `-1`
/// carry no residue and are discarded.
pub fn residue_chern_form(q: &ClassicalSymbol, v: &Form<ClassicalSymbol>, j: usize) -> Result<Form<Cplx>> {
    if j == 0 {
        return Err(SuperconnError::BadParameter("j must be positive".into()));
    }
    let s = (2 * j) as f64 / 2.0 - 0.5;
    let power = |e: f64| Ok(symbol_calc::power_symbol(q, e)?);
    let keep = |a: &ClassicalSymbol| {
        let t = trim_symbol(a);
        !t.terms.is_empty() && t.order >= -1.0 - 1e-9 && t.max_abs() > 0.0
    };
    let v = v.map(trim_symbol);
    let k_cap = (q.depth as u32).max(2);
    let abs = abs_power_series(q, &v, s, &power, &keep, k_cap)?;
    let mut out = Form::zero(v.p);
    for (m, co) in &abs.parts {
        if let Some(x) = &co.odd {
            let r = symbol_calc::wodzicki_residue(&trim_symbol(x))?;
            out.insert(*m, Coef::even(r));
        }
    }
    Ok(out)
}

/// Symbol data of `σ(D_a - λ) + d` on the scalar circle family:
/// `𝔸²_[0] = (ξ + a - λ)²`, `𝔸²_[1] = σ da`.
pub fn circle_curvature(a: f64, lambda: f64, depth: usize) -> Result<(ClassicalSymbol, Form<ClassicalSymbol>)> {
    let shift = a - lambda;
    if (shift - shift.round()).abs() < lattice_spec::COLLISION_TOL {
        return Err(SuperconnError::Crossing { a, lambda });
    }
    let k = |x: f64| symbol_calc::table::constant(CMat::from_element(1, 1, c(x)));
    let q = ClassicalSymbol::polynomial(1, depth, &[(0, k(shift * shift)), (1, k(2.0 * shift)), (2, k(1.0))]);
    let v = Form::single(1, 1, Coef::odd(ClassicalSymbol::identity(1, depth)));
    Ok((q, v))
}

// ------------------------------------------------------------ eta forms, transgression

#[derive(Debug, Clone)]
pub struct EtaFormReport {
    pub value: f64,
    pub fit_residual: f64,
}

/// `η̃_λ(a) = fp_{t→0} ∫_t^∞ str(σ(D_a-λ) e^{-s²(D_a-λ)²}) ds`
/// `= (√π/2) fp Σ_n sign(μ_n) erfc(t|μ_n|)`, `μ_n = n + a - λ`.
pub fn eta_form(a: f64, lambda: f64) -> Result<EtaFormReport> {
    let shift = a - lambda;
    if (shift - shift.round()).abs() < lattice_spec::COLLISION_TOL {
        return Err(SuperconnError::Crossing { a, lambda });
    }
    let frac = shift - shift.floor();
    let pts: Vec<(f64, Cplx)> = (2..8)
        .map(|k| {
            let t = 2f64.powi(-k);
            (t, c(lattice_spec::eta_erfc_sum(frac, t)))
        })
        .collect();
    let exps = [Rational::from_integer(0), Rational::from_integer(1), Rational::from_integer(2)];
    let fit = regularization::fit_expansion(&pts, &exps)?;
    let fp = fit.expansion.coefficient(Rational::from_integer(0)).re;
    Ok(EtaFormReport { value: 0.5 * std::f64::consts::PI.sqrt() * fp, fit_residual: fit.residual })
}

#[derive(Debug, Clone)]
pub struct TransgressionRow {
    pub a: f64,
    pub d_eta: f64,
    pub residue: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct TransgressionReport {
    pub lambda: f64,
    pub rows: Vec<TransgressionRow>,
    /// Mean of `dη̃/da ÷ sres(|𝔸|)_[1]`.
    pub constant: f64,
    /// `max - min` of the ratio over the grid.
    pub spread: f64,
}

/// Compare `dη̃_λ/da` (central differences, step `h`) with the degree-1
/// residue Chern form at `j = 1` over a grid of twists.
pub fn transgression_check(lambda: f64, grid: &[f64], h: f64, depth: usize) -> Result<TransgressionReport> {
    let mut rows = vec![];
    for &a in grid {
        for x in [a - h, a, a + h] {
            let sh = x - lambda;
            if (sh - sh.round()).abs() < h + lattice_spec::COLLISION_TOL {
                return Err(SuperconnError::Crossing { a: x, lambda });
            }
        }
        let d_eta = (eta_form(a + h, lambda)?.value - eta_form(a - h, lambda)?.value) / (2.0 * h);
        let (q, v) = circle_curvature(a, lambda, depth)?;
        let residue = residue_chern_form(&q, &v, 1)?.scalar(1).re;
        rows.push(TransgressionRow { a, d_eta, residue, ratio: d_eta / residue });
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let constant = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let spread = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(TransgressionReport { lambda, rows, constant, spread: if ratios.is_empty() { 0.0 } else { spread } })
}

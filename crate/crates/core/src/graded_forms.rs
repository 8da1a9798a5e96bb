//! Operator-valued differential forms over a parameter patch `b ∈ R^p`.
//!
//! A form is stored as `Σ_I db_I ⊗ (X_I^even + X_I^odd)`, forms written to
//! the left. "Odd" is either the odd part of an operator for a grading `γ`
//! (split mode) or the coefficient of a formal `σ` with `σ² = 1` (sigma mode).
//! In both modes odd coefficients anticommute with odd forms, which gives one
//! product rule for the two.

use crate::symbol_calc::ClassicalSymbol;
use crate::{CMat, Cplx};
use num_traits::Zero;
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Largest supported patch dimension.
pub const MAX_PATCH: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormError {
    #[error("patch mismatch: {0} vs {1}")]
    PatchMismatch(usize, usize),
    #[error("patch dimension {0} exceeds {MAX_PATCH}")]
    PatchTooLarge(usize),
    #[error("finite difference leaves the domain in coordinate {coord} at {value}")]
    Boundary { coord: usize, value: f64 },
    #[error("quadrature did not settle: estimate {0:e}")]
    NotConverged(f64),
    #[error("field evaluation failed: {0}")]
    Field(String),
}

pub type Result<T> = std::result::Result<T, FormError>;

/// Ring operations a form coefficient needs.
pub trait Coefficient: Clone + Send + Sync {
    fn add(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn scale(&self, k: Cplx) -> Self;
    fn max_abs(&self) -> f64;
}

impl Coefficient for Cplx {
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn scale(&self, k: Cplx) -> Self {
        self * k
    }
    fn max_abs(&self) -> f64 {
        self.norm()
    }
}

impl Coefficient for CMat {
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn scale(&self, k: Cplx) -> Self {
        self * k
    }
    fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(self)
    }
}

/// Panics on rank mismatch or orders that are not integer-spaced.
impl Coefficient for ClassicalSymbol {
    fn add(&self, o: &Self) -> Self {
        ClassicalSymbol::add(self, o).expect("compatible symbols")
    }
    fn mul(&self, o: &Self) -> Self {
        crate::symbol_calc::compose(self, o).expect("compatible symbols")
    }
    fn scale(&self, k: Cplx) -> Self {
        ClassicalSymbol::scale(self, k)
    }
    fn max_abs(&self) -> f64 {
        ClassicalSymbol::max_abs(self)
    }
}

fn add_opt<M: Coefficient>(a: &Option<M>, b: &Option<M>) -> Option<M> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.add(y)),
        (Some(x), None) => Some(x.clone()),
        (None, Some(y)) => Some(y.clone()),
        (None, None) => None,
    }
}

fn mul_opt<M: Coefficient>(a: &Option<M>, b: &Option<M>, k: f64) -> Option<M> {
    match (a, b) {
        (Some(x), Some(y)) => {
            let p = x.mul(y);
            Some(if k == 1.0 { p } else { p.scale(Cplx::new(k, 0.0)) })
        }
        _ => None,
    }
}

/// `X^even + X^odd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coef<M> {
    pub even: Option<M>,
    pub odd: Option<M>,
}

impl<M: Coefficient> Coef<M> {
    pub fn even(m: M) -> Self {
        Coef { even: Some(m), odd: None }
    }

    pub fn odd(m: M) -> Self {
        Coef { even: None, odd: Some(m) }
    }

    pub fn is_zero(&self) -> bool {
        self.even.is_none() && self.odd.is_none()
    }

    fn add(&self, o: &Self) -> Self {
        Coef { even: add_opt(&self.even, &o.even), odd: add_opt(&self.odd, &o.odd) }
    }

    pub fn scale(&self, k: Cplx) -> Self {
        Coef { even: self.even.as_ref().map(|x| x.scale(k)), odd: self.odd.as_ref().map(|x| x.scale(k)) }
    }

    /// `X · Y` where the odd part of `X` has already crossed a form of parity `s`.
    fn mul(&self, o: &Self, s: f64) -> Self {
        let even = add_opt(&mul_opt(&self.even, &o.even, 1.0), &mul_opt(&self.odd, &o.odd, s));
        let odd = add_opt(&mul_opt(&self.even, &o.odd, 1.0), &mul_opt(&self.odd, &o.even, s));
        Coef { even, odd }
    }

    pub fn max_abs(&self) -> f64 {
        let e = self.even.as_ref().map_or(0.0, |x| x.max_abs());
        let o = self.odd.as_ref().map_or(0.0, |x| x.max_abs());
        e.max(o)
    }

    pub fn map<N>(&self, f: impl Fn(&M) -> N) -> Coef<N> {
        Coef { even: self.even.as_ref().map(&f), odd: self.odd.as_ref().map(&f) }
    }
}

/// How odd coefficients are realised, and what the supertrace reads.
#[derive(Debug, Clone)]
pub enum Grading<M> {
    /// `str(X) = tr(γ X)`.
    Split(M),
    /// `str(X + σY) = tr(Y)`.
    Sigma,
}

/// Sign of `db_I ∧ db_J` relative to `db_{I∪J}`, or `None` if they overlap.
pub fn wedge_sign(i: u8, j: u8) -> Option<f64> {
    if i & j != 0 {
        return None;
    }
    let mut swaps = 0u32;
    for b in 0..8 {
        if j & (1 << b) != 0 {
            swaps += (i >> (b + 1)).count_ones();
        }
    }
    Some(if swaps % 2 == 0 { 1.0 } else { -1.0 })
}

pub fn degree(mask: u8) -> usize {
    mask.count_ones() as usize
}

fn parity_sign(mask: u8) -> f64 {
    if degree(mask) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Sorted indices of a mask.
pub fn indices(mask: u8) -> Vec<usize> {
    (0..8).filter(|b| mask & (1 << b) != 0).collect()
}

pub fn mask_of(idx: &[usize]) -> u8 {
    idx.iter().fold(0u8, |m, i| m | (1 << i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Form<M> {
    pub p: usize,
    pub parts: BTreeMap<u8, Coef<M>>,
}

impl<M: Coefficient> Form<M> {
    pub fn zero(p: usize) -> Self {
        assert!(p <= MAX_PATCH, "patch dimension {p} exceeds {MAX_PATCH}");
        Form { p, parts: BTreeMap::new() }
    }

    pub fn single(p: usize, mask: u8, c: Coef<M>) -> Self {
        let mut f = Self::zero(p);
        f.insert(mask, c);
        f
    }

    pub fn even0(p: usize, m: M) -> Self {
        Self::single(p, 0, Coef::even(m))
    }

    pub fn odd0(p: usize, m: M) -> Self {
        Self::single(p, 0, Coef::odd(m))
    }

    /// `db_i ⊗ m` (even coefficient).
    pub fn db(p: usize, i: usize, m: M) -> Self {
        Self::single(p, 1 << i, Coef::even(m))
    }

    pub fn insert(&mut self, mask: u8, c: Coef<M>) {
        if c.is_zero() {
            return;
        }
        let e = match self.parts.remove(&mask) {
            Some(old) => old.add(&c),
            None => c,
        };
        self.parts.insert(mask, e);
    }

    pub fn get(&self, mask: u8) -> Option<&Coef<M>> {
        self.parts.get(&mask)
    }

    fn check(&self, o: &Self) -> Result<()> {
        if self.p != o.p {
            return Err(FormError::PatchMismatch(self.p, o.p));
        }
        Ok(())
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        let mut out = self.clone();
        for (m, c) in &o.parts {
            out.insert(*m, c.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.add(&o.scale(Cplx::new(-1.0, 0.0)))
    }

    pub fn scale(&self, k: Cplx) -> Self {
        Form { p: self.p, parts: self.parts.iter().map(|(m, c)| (*m, c.scale(k))).collect() }
    }

    /// `(db_I ⊗ X)(db_J ⊗ Y) = ±db_I∧db_J ⊗ (X_e Y + (-1)^{|J|} X_o Y)`.
    pub fn wedge(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        let mut out = Self::zero(self.p);
        for (i, x) in &self.parts {
            for (j, y) in &o.parts {
                if let Some(s) = wedge_sign(*i, *j) {
                    let c = x.mul(y, parity_sign(*j));
                    out.insert(i | j, if s < 0.0 { c.scale(Cplx::new(-1.0, 0.0)) } else { c });
                }
            }
        }
        Ok(out)
    }

    pub fn pow(&self, j: usize, one: M) -> Result<Self> {
        let mut out = Self::even0(self.p, one);
        for _ in 0..j {
            out = out.wedge(self)?;
        }
        Ok(out)
    }

    /// Degree-`k` part.
    pub fn part(&self, k: usize) -> Self {
        Form { p: self.p, parts: self.parts.iter().filter(|(m, _)| degree(**m) == k).map(|(m, c)| (*m, c.clone())).collect() }
    }

    /// Positive-degree part.
    pub fn positive(&self) -> Self {
        Form { p: self.p, parts: self.parts.iter().filter(|(m, _)| **m != 0).map(|(m, c)| (*m, c.clone())).collect() }
    }

    /// Split into total-parity components `(even, odd)`.
    pub fn parity_split(&self) -> (Self, Self) {
        let mut ev = Self::zero(self.p);
        let mut od = Self::zero(self.p);
        for (m, c) in &self.parts {
            let (e, o) = (Coef { even: c.even.clone(), odd: None }, Coef { even: None, odd: c.odd.clone() });
            if degree(*m) % 2 == 0 {
                ev.insert(*m, e);
                od.insert(*m, o);
            } else {
                od.insert(*m, e);
                ev.insert(*m, o);
            }
        }
        (ev, od)
    }

    /// `[α, β] = αβ - (-1)^{|α||β|} βα`, extended bilinearly over parities.
    pub fn graded_commutator(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        let (ae, ao) = self.parity_split();
        let (be, bo) = o.parity_split();
        let mut out = Self::zero(self.p);
        for (a, pa) in [(&ae, 0), (&ao, 1)] {
            for (b, pb) in [(&be, 0), (&bo, 1)] {
                let ab = a.wedge(b)?;
                let ba = b.wedge(a)?;
                let s = if pa * pb == 1 { 1.0 } else { -1.0 };
                out = out.add(&ab.add(&ba.scale(Cplx::new(s, 0.0)))?)?;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.parts.values().map(|c| c.max_abs()).fold(0.0, f64::max)
    }

    /// Supertrace with a caller-supplied trace (matrix trace, Wodzicki residue, …).
    pub fn supertrace_with(&self, grading: &Grading<M>, tr: impl Fn(&M) -> Cplx) -> Form<Cplx> {
        let mut out = Form::zero(self.p);
        for (m, c) in &self.parts {
            let v = match grading {
                Grading::Split(g) => c.even.as_ref().map(|x| tr(&g.mul(x))),
                Grading::Sigma => c.odd.as_ref().map(&tr),
            };
            if let Some(v) = v {
                out.insert(*m, Coef::even(v));
            }
        }
        out
    }

    /// `ι_v`, contraction with a constant vector.
    pub fn interior(&self, v: &[f64]) -> Self {
        let mut out = Self::zero(self.p);
        for (m, c) in &self.parts {
            for (pos, i) in indices(*m).into_iter().enumerate() {
                if v[i] != 0.0 {
                    let s = if pos % 2 == 0 { v[i] } else { -v[i] };
                    out.insert(m & !(1 << i), c.scale(Cplx::new(s, 0.0)));
                }
            }
        }
        out
    }

    pub fn map<N: Coefficient>(&self, f: impl Fn(&M) -> N) -> Form<N> {
        Form { p: self.p, parts: self.parts.iter().map(|(m, c)| (*m, c.map(&f))).collect() }
    }

    /// `ι_{∂_t} H^*θ` at a point: `v = ∂_t H`, `jac[r][c] = ∂H_r/∂b_c`.
    fn pull_contract(&self, v: &[f64], jac: &[Vec<f64>]) -> Self {
        let p = self.p;
        let mut out = Self::zero(p);
        for (m, c) in &self.parts {
            let k = degree(*m);
            if k == 0 {
                continue;
            }
            let kidx = indices(*m);
            for target in 0u8..(1u8 << p) {
                if degree(target) != k - 1 {
                    continue;
                }
                let tidx = indices(target);
                // rows: v, J e_{i1}, …; columns: K
                let mut mat = nalgebra::DMatrix::<f64>::zeros(k, k);
                for (col, kk) in kidx.iter().enumerate() {
                    mat[(0, col)] = v[*kk];
                    for (row, ti) in tidx.iter().enumerate() {
                        mat[(row + 1, col)] = jac[*kk][*ti];
                    }
                }
                let det = mat.determinant();
                if det != 0.0 {
                    out.insert(target, c.scale(Cplx::new(det, 0.0)));
                }
            }
        }
        out
    }
}

impl Form<Cplx> {
    pub fn scalar(&self, mask: u8) -> Cplx {
        self.parts.get(&mask).and_then(|c| c.even).unwrap_or_else(Cplx::zero)
    }
}

impl Form<CMat> {
    pub fn supertrace(&self, grading: &Grading<CMat>) -> Form<Cplx> {
        self.supertrace_with(grading, crate::linalg::trace)
    }
}

// ------------------------------------------------------------ matrix representation

/// Faithful representation of matrix-coefficient forms as block matrices on
/// `Λ(C^p) ⊗ C^aux ⊗ C^m`: `db_i ↦ c_i^†`, even `X ↦ 1 ⊗ X`, odd `X ↦ P ⊗ Z ⊗ X`
/// (`P` the parity of `Λ`, `Z = diag(1,-1)` in sigma mode, absent in split mode).
#[derive(Debug, Clone)]
pub struct MatrixRep {
    pub p: usize,
    pub m: usize,
    grading: Grading<CMat>,
    creation: Vec<CMat>,
    parity: CMat,
}

impl MatrixRep {
    pub fn new(p: usize, m: usize, grading: Grading<CMat>) -> Result<Self> {
        if p > MAX_PATCH {
            return Err(FormError::PatchTooLarge(p));
        }
        let dl = 1usize << p;
        let one = Cplx::new(1.0, 0.0);
        let creation = (0..dl as u8)
            .map(|mask| {
                let mut out = CMat::zeros(dl, dl);
                for s in 0..dl {
                    // c_I^† |s⟩ for s disjoint from I
                    if s as u8 & mask != 0 {
                        continue;
                    }
                    let mut sign = 1.0;
                    let mut cur = s as u8;
                    for i in indices(mask).into_iter().rev() {
                        if (cur & ((1u8 << i) - 1)).count_ones() % 2 == 1 {
                            sign = -sign;
                        }
                        cur |= 1 << i;
                    }
                    out[(cur as usize, s)] = one * sign;
                }
                out
            })
            .collect();
        let parity = CMat::from_fn(dl, dl, |r, c| if r == c { one * parity_sign(r as u8) } else { Cplx::zero() });
        Ok(MatrixRep { p, m, grading, creation, parity })
    }

    fn aux(&self) -> usize {
        match self.grading {
            Grading::Split(_) => 1,
            Grading::Sigma => 2,
        }
    }

    pub fn dim(&self) -> usize {
        (1 << self.p) * self.aux() * self.m
    }

    pub fn represent(&self, f: &Form<CMat>) -> Result<CMat> {
        if f.p != self.p {
            return Err(FormError::PatchMismatch(f.p, self.p));
        }
        let aux = self.aux();
        let z = CMat::from_fn(aux, aux, |r, c| {
            if r != c {
                Cplx::zero()
            } else if r == 0 {
                Cplx::new(1.0, 0.0)
            } else {
                Cplx::new(-1.0, 0.0)
            }
        });
        let mut out = CMat::zeros(self.dim(), self.dim());
        for (mask, c) in &f.parts {
            let cr = &self.creation[*mask as usize];
            if let Some(x) = &c.even {
                out += cr.kronecker(&CMat::identity(aux, aux)).kronecker(x);
            }
            if let Some(x) = &c.odd {
                out += (cr * &self.parity).kronecker(&z).kronecker(x);
            }
        }
        Ok(out)
    }

    /// Inverse of `represent` on its image.
    pub fn extract(&self, big: &CMat) -> Form<CMat> {
        let (m, aux) = (self.m, self.aux());
        let block = |mask: u8, a: usize| -> CMat {
            let r0 = (mask as usize * aux + a) * m;
            let c0 = a * m;
            big.view((r0, c0), (m, m)).into_owned()
        };
        let half = Cplx::new(0.5, 0.0);
        let mut out = Form::zero(self.p);
        for mask in 0..(1u8 << self.p) {
            let (e, o) = match &self.grading {
                Grading::Sigma => {
                    let (b0, b1) = (block(mask, 0), block(mask, 1));
                    ((&b0 + &b1) * half, (&b0 - &b1) * half)
                }
                Grading::Split(g) => {
                    let b = block(mask, 0);
                    let conj = g * &b * g;
                    ((&b + &conj) * half, (&b - &conj) * half)
                }
            };
            let nz = |x: CMat| (crate::linalg::max_abs(&x) > 0.0).then_some(x);
            out.insert(mask, Coef { even: nz(e), odd: nz(o) });
        }
        out
    }
}

// ------------------------------------------------------------ polynomial coefficients

/// Polynomial in `b` with coefficients in `M`: monomial exponents → value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoef<M> {
    pub p: usize,
    pub terms: BTreeMap<Vec<u8>, M>,
}

impl<M: Coefficient> PolyCoef<M> {
    pub fn constant(p: usize, m: M) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(vec![0; p], m);
        PolyCoef { p, terms }
    }

    pub fn monomial(exps: Vec<u8>, m: M) -> Self {
        let p = exps.len();
        let mut terms = BTreeMap::new();
        terms.insert(exps, m);
        PolyCoef { p, terms }
    }

    /// `b_i · m`.
    pub fn var(p: usize, i: usize, m: M) -> Self {
        let mut e = vec![0; p];
        e[i] = 1;
        Self::monomial(e, m)
    }

    pub fn eval(&self, b: &[f64]) -> Option<M> {
        let mut acc: Option<M> = None;
        for (e, m) in &self.terms {
            let w: f64 = e.iter().zip(b).map(|(k, x)| x.powi(*k as i32)).product();
            let t = m.scale(Cplx::new(w, 0.0));
            acc = Some(match acc {
                None => t,
                Some(a) => a.add(&t),
            });
        }
        acc
    }

    pub fn partial(&self, i: usize) -> Option<Self> {
        let mut terms = BTreeMap::new();
        for (e, m) in &self.terms {
            if e[i] > 0 {
                let mut f = e.clone();
                f[i] -= 1;
                let t = m.scale(Cplx::new(e[i] as f64, 0.0));
                let v = match terms.remove(&f) {
                    Some(old) => Coefficient::add(&old, &t),
                    None => t,
                };
                terms.insert(f, v);
            }
        }
        (!terms.is_empty()).then_some(PolyCoef { p: self.p, terms })
    }
}

impl<M: Coefficient> Coefficient for PolyCoef<M> {
    fn add(&self, o: &Self) -> Self {
        let mut terms = self.terms.clone();
        for (e, m) in &o.terms {
            let v = match terms.remove(e) {
                Some(old) => old.add(m),
                None => m.clone(),
            };
            terms.insert(e.clone(), v);
        }
        PolyCoef { p: self.p, terms }
    }

    fn mul(&self, o: &Self) -> Self {
        let mut out = PolyCoef { p: self.p, terms: BTreeMap::new() };
        for (e1, m1) in &self.terms {
            for (e2, m2) in &o.terms {
                let e: Vec<u8> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                out = out.add(&PolyCoef { p: self.p, terms: [(e, m1.mul(m2))].into_iter().collect() });
            }
        }
        out
    }

    fn scale(&self, k: Cplx) -> Self {
        PolyCoef { p: self.p, terms: self.terms.iter().map(|(e, m)| (e.clone(), m.scale(k))).collect() }
    }

    fn max_abs(&self) -> f64 {
        self.terms.values().map(|m| m.max_abs()).fold(0.0, f64::max)
    }
}

fn coef_partial<M: Coefficient>(c: &Coef<PolyCoef<M>>, i: usize) -> Coef<PolyCoef<M>> {
    Coef { even: c.even.as_ref().and_then(|x| x.partial(i)), odd: c.odd.as_ref().and_then(|x| x.partial(i)) }
}

impl<M: Coefficient> Form<PolyCoef<M>> {
    /// Exact exterior derivative.
    pub fn d(&self) -> Self {
        let mut out = Self::zero(self.p);
        for (m, c) in &self.parts {
            for i in 0..self.p {
                if let Some(s) = wedge_sign(1 << i, *m) {
                    let dc = coef_partial(c, i);
                    out.insert(m | (1 << i), dc.scale(Cplx::new(s, 0.0)));
                }
            }
        }
        out
    }

    pub fn eval(&self, b: &[f64]) -> Form<M> {
        let mut out = Form::zero(self.p);
        for (m, c) in &self.parts {
            let e = Coef {
                even: c.even.as_ref().and_then(|x| x.eval(b)),
                odd: c.odd.as_ref().and_then(|x| x.eval(b)),
            };
            out.insert(*m, e);
        }
        out
    }
}

// ------------------------------------------------------------ fields

/// Form-valued function on the patch with an exterior derivative.
pub trait FormField<M>: Send + Sync {
    fn p(&self) -> usize;
    fn at(&self, b: &[f64]) -> Result<Form<M>>;
    fn d_at(&self, b: &[f64]) -> Result<Form<M>>;
}

/// Exact polynomial backend.
#[derive(Debug, Clone)]
pub struct PolyField<M> {
    pub form: Form<PolyCoef<M>>,
}

impl<M: Coefficient> FormField<M> for PolyField<M> {
    fn p(&self) -> usize {
        self.form.p
    }
    fn at(&self, b: &[f64]) -> Result<Form<M>> {
        Ok(self.form.eval(b))
    }
    fn d_at(&self, b: &[f64]) -> Result<Form<M>> {
        Ok(self.form.d().eval(b))
    }
}

pub type FieldFn<M> = Arc<dyn Fn(&[f64]) -> Result<Form<M>> + Send + Sync>;

/// Sampled backend: `d` by central differences with step `h` inside a box.
#[derive(Clone)]
pub struct SampledField<M> {
    pub p: usize,
    pub f: FieldFn<M>,
    pub h: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl<M: Coefficient> SampledField<M> {
    pub fn new(p: usize, h: f64, lo: Vec<f64>, hi: Vec<f64>, f: FieldFn<M>) -> Result<Self> {
        if p > MAX_PATCH {
            return Err(FormError::PatchTooLarge(p));
        }
        Ok(SampledField { p, f, h, lo, hi })
    }

    pub fn unbounded(p: usize, h: f64, f: FieldFn<M>) -> Self {
        SampledField { p, f, h, lo: vec![f64::NEG_INFINITY; p], hi: vec![f64::INFINITY; p] }
    }

    pub fn with_step(&self, h: f64) -> Self {
        let mut s = self.clone();
        s.h = h;
        s
    }

    /// `∂_i` at `b` by central differences.
    pub fn partial(&self, b: &[f64], i: usize) -> Result<Form<M>> {
        let mut bp = b.to_vec();
        let mut bm = b.to_vec();
        bp[i] += self.h;
        bm[i] -= self.h;
        if bp[i] > self.hi[i] || bm[i] < self.lo[i] {
            return Err(FormError::Boundary { coord: i, value: b[i] });
        }
        let fp = (self.f)(&bp)?;
        let fm = (self.f)(&bm)?;
        Ok(fp.sub(&fm)?.scale(Cplx::new(0.5 / self.h, 0.0)))
    }
}

impl<M: Coefficient> FormField<M> for SampledField<M> {
    fn p(&self) -> usize {
        self.p
    }
    fn at(&self, b: &[f64]) -> Result<Form<M>> {
        (self.f)(b)
    }
    fn d_at(&self, b: &[f64]) -> Result<Form<M>> {
        let mut out = Form::zero(self.p);
        for i in 0..self.p {
            let di = self.partial(b, i)?;
            for (m, c) in &di.parts {
                if let Some(s) = wedge_sign(1 << i, *m) {
                    out.insert(m | (1 << i), c.scale(Cplx::new(s, 0.0)));
                }
            }
        }
        Ok(out)
    }
}

// ------------------------------------------------------------ contraction

/// Contraction `H: [0,1] × U → U` with `H(1, b) = b`, `H(0, b) = base`.
#[derive(Clone)]
pub enum Homotopy {
    /// `H(t, b) = base + t (b - base)`.
    Linear { base: Vec<f64> },
    /// Arbitrary smooth map; velocities and Jacobians by central differences with step `h`.
    General { map: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>, h: f64 },
}

impl Homotopy {
    fn eval(&self, t: f64, b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let p = b.len();
        match self {
            Homotopy::Linear { base } => {
                let y = base.iter().zip(b).map(|(c, x)| c + t * (x - c)).collect();
                let v = base.iter().zip(b).map(|(c, x)| x - c).collect();
                let jac = (0..p).map(|r| (0..p).map(|c| if r == c { t } else { 0.0 }).collect()).collect();
                (y, v, jac)
            }
            Homotopy::General { map, h } => {
                let y = map(t, b);
                let (tp, tm) = ((t + h).min(1.0), (t - h).max(0.0));
                let yp = map(tp, b);
                let ym = map(tm, b);
                let v = yp.iter().zip(&ym).map(|(a, c)| (a - c) / (tp - tm)).collect();
                let mut jac = vec![vec![0.0; p]; p];
                for c in 0..p {
                    let mut bp = b.to_vec();
                    let mut bm = b.to_vec();
                    bp[c] += h;
                    bm[c] -= h;
                    let (fp, fm) = (map(t, &bp), map(t, &bm));
                    for r in 0..p {
                        jac[r][c] = (fp[r] - fm[r]) / (2.0 * h);
                    }
                }
                (y, v, jac)
            }
        }
    }
}

/// `Kθ(b) = ∫_0^1 ι_{∂_t} H^*θ dt`, so that `θ = d Kθ` for closed `θ` of
/// positive degree. Composite Simpson on `n` and `2n` intervals; returns the
/// finer value and the Richardson error estimate, refusing above `tol`.
pub fn contract_integrate<M: Coefficient>(
    theta: &dyn Fn(&[f64]) -> Result<Form<M>>,
    path: &Homotopy,
    b: &[f64],
    n: usize,
    tol: f64,
) -> Result<(Form<M>, f64)> {
    let n = n.max(2) + n % 2;
    let p = b.len();
    let mut samples = Vec::with_capacity(2 * n + 1);
    for i in 0..=2 * n {
        let t = i as f64 / (2 * n) as f64;
        let (y, v, jac) = path.eval(t, b);
        samples.push(theta(&y)?.pull_contract(&v, &jac));
    }
    let simpson = |stride: usize| -> Result<Form<M>> {
        let m = 2 * n / stride;
        let h = 1.0 / m as f64;
        let mut acc = Form::zero(p);
        for k in 0..=m {
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc = acc.add(&samples[k * stride].scale(Cplx::new(w * h / 3.0, 0.0)))?;
        }
        Ok(acc)
    };
    let fine = simpson(1)?;
    let coarse = simpson(2)?;
    let est = fine.sub(&coarse)?.max_abs() / 15.0;
    if est > tol {
        return Err(FormError::NotConverged(est));
    }
    Ok((fine, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(x: f64) -> Cplx {
        Cplx::new(x, 0.0)
    }

    fn rmat(rng: &mut ChaCha8Rng, m: usize) -> CMat {
        CMat::from_fn(m, m, |_, _| Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn rcoef(rng: &mut ChaCha8Rng, m: usize) -> Coef<CMat> {
        Coef { even: Some(rmat(rng, m)), odd: Some(rmat(rng, m)) }
    }

    fn rform(rng: &mut ChaCha8Rng, p: usize, m: usize, degs: &[usize]) -> Form<CMat> {
        let mut f = Form::zero(p);
        for mask in 0u8..(1 << p) {
            if degs.contains(&degree(mask)) {
                f.insert(mask, rcoef(rng, m));
            }
        }
        f
    }

    fn close(a: &Form<CMat>, b: &Form<CMat>, tol: f64) -> bool {
        a.sub(b).unwrap().max_abs() < tol
    }

    fn jw(f: &Form<CMat>, m: usize) -> CMat {
        MatrixRep::new(f.p, m, Grading::Sigma).unwrap().represent(f).unwrap()
    }

    #[test]
    fn wedge_examples() {
        let one = CMat::identity(1, 1);
        let dx = Form::db(2, 0, one.clone());
        let dy = Form::db(2, 1, one.clone());
        assert_eq!(dx.wedge(&dy).unwrap(), dy.wedge(&dx).unwrap().scale(c(-1.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mm, nn) = (rmat(&mut rng, 3), rmat(&mut rng, 3));
        let prod = Form::odd0(2, mm.clone()).wedge(&Form::odd0(2, nn.clone())).unwrap();
        assert_eq!(prod, Form::even0(2, &mm * &nn));
    }

    #[test]
    fn wedge_is_associative_and_faithful() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = rform(&mut rng, 3, 2, &[0, 1]);
            let b = rform(&mut rng, 3, 2, &[1]);
            let g = rform(&mut rng, 3, 2, &[1, 2]);
            let l = a.wedge(&b).unwrap().wedge(&g).unwrap();
            let r = a.wedge(&b.wedge(&g).unwrap()).unwrap();
            assert!(close(&l, &r, 1e-12));
            let rep = jw(&a, 2) * jw(&b, 2);
            assert!(crate::linalg::max_abs(&(&rep - jw(&a.wedge(&b).unwrap(), 2))) < 1e-12);
            let back = MatrixRep::new(3, 2, Grading::Sigma).unwrap().extract(&rep);
            assert!(close(&back, &a.wedge(&b).unwrap(), 1e-12));
        }
    }

    #[test]
    fn commutator_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (odd_a, _) = {
            let f = rform(&mut rng, 3, 2, &[0, 1, 2]);
            let (e, o) = f.parity_split();
            (o, e)
        };
        let aa = odd_a.graded_commutator(&odd_a).unwrap();
        assert!(close(&aa, &odd_a.wedge(&odd_a).unwrap().scale(c(2.0)), 1e-12));
        let homog = |rng: &mut ChaCha8Rng, par: usize| {
            let (e, o) = rform(rng, 3, 2, &[0, 1, 2, 3]).parity_split();
            if par == 0 { e } else { o }
        };
        for (pa, pb) in [(0, 0), (0, 1), (1, 1), (1, 0)] {
            let a = homog(&mut rng, pa);
            let b = homog(&mut rng, pb);
            let g = homog(&mut rng, 1);
            let lhs = a.graded_commutator(&b.graded_commutator(&g).unwrap()).unwrap();
            let s = if pa * pb == 1 { -1.0 } else { 1.0 };
            let rhs = a
                .graded_commutator(&b)
                .unwrap()
                .graded_commutator(&g)
                .unwrap()
                .add(&b.graded_commutator(&a.graded_commutator(&g).unwrap()).unwrap().scale(c(s)))
                .unwrap();
            assert!(close(&lhs, &rhs, 1e-11));
        }
        // [θ, D] for an even-operator one-form and an odd operator is the anticommutator
        let theta = Form::db(2, 0, rmat(&mut rng, 2)).add(&Form::db(2, 1, rmat(&mut rng, 2))).unwrap();
        let d = Form::odd0(2, rmat(&mut rng, 2));
        let anti = theta.wedge(&d).unwrap().add(&d.wedge(&theta).unwrap()).unwrap();
        assert!(close(&theta.graded_commutator(&d).unwrap(), &anti, 1e-14));
    }

    #[test]
    fn supertrace_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rmat(&mut rng, 3);
        let s = Form::odd0(1, m.clone()).supertrace(&Grading::Sigma);
        assert_eq!(s.scalar(0), crate::linalg::trace(&m));
        let gamma = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0), c(1.0), c(-1.0), c(-1.0)]));
        let mut odd = CMat::zeros(4, 4);
        odd.view_mut((0, 2), (2, 2)).copy_from(&rmat(&mut rng, 2));
        odd.view_mut((2, 0), (2, 2)).copy_from(&rmat(&mut rng, 2));
        let s = Form::even0(1, odd).supertrace(&Grading::Split(gamma));
        assert!(s.scalar(0).norm() < 1e-15);
        for _ in 0..5 {
            let a = rform(&mut rng, 3, 3, &[0, 1, 2]);
            let b = rform(&mut rng, 3, 3, &[0, 1, 3]);
            let st = a.graded_commutator(&b).unwrap().supertrace(&Grading::Sigma);
            assert!(st.max_abs() < 1e-12);
        }
    }

    fn cubic_two_form() -> Form<PolyCoef<CMat>> {
        // (b2³ + b1 b2) db0∧db1 + b2² b0 db1∧db2, 2×2 coefficients
        let k = CMat::from_row_slice(2, 2, &[c(1.0), c(0.5), c(-0.5), c(2.0)]);
        let a = PolyCoef::monomial(vec![0, 0, 3], k.clone()).add(&PolyCoef::monomial(vec![0, 1, 1], k.clone()));
        let b = PolyCoef::monomial(vec![1, 0, 2], k * c(0.3));
        let mut f = Form::zero(3);
        f.insert(0b011, Coef::even(a));
        f.insert(0b110, Coef::odd(b));
        f
    }

    #[test]
    fn exterior_derivative_examples() {
        let one = CMat::identity(1, 1);
        // d(b0 db1) = db0∧db1
        let f = Form::single(2, 0b10, Coef::even(PolyCoef::var(2, 0, one.clone())));
        let df = f.d().eval(&[0.3, 0.7]);
        assert_eq!(df, Form::single(2, 0b11, Coef::even(one.clone())));
        let g = cubic_two_form();
        assert!(g.d().d().eval(&[0.2, -0.4, 0.9]).max_abs() == 0.0);
        let h0 = Form::single(3, 0, Coef::even(PolyCoef::monomial(vec![2, 1, 3], one.clone())));
        assert_eq!(h0.d().d().max_abs(), 0.0);
    }

    #[test]
    fn leibniz_exact() {
        let g = cubic_two_form();
        let k = CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let a = Form::single(3, 0b001, Coef::odd(PolyCoef::var(3, 2, k.clone())))
            .add(&Form::single(3, 0, Coef::even(PolyCoef::monomial(vec![1, 1, 0], k))))
            .unwrap();
        let (ae, ao) = a.parity_split();
        for (part, s) in [(ae, 1.0), (ao, -1.0)] {
            let lhs = part.wedge(&g).unwrap().d();
            let rhs = part.d().wedge(&g).unwrap().add(&part.wedge(&g.d()).unwrap().scale(c(s))).unwrap();
            let diff = lhs.sub(&rhs).unwrap().eval(&[0.4, -0.3, 1.1]);
            assert!(diff.max_abs() < 1e-13);
        }
    }

    #[test]
    fn sampled_derivative_converges_at_second_order() {
        let g = cubic_two_form();
        let exact = g.d().eval(&[0.3, 0.5, -0.2]);
        let gc = g.clone();
        let field = SampledField::unbounded(3, 0.1, Arc::new(move |b: &[f64]| Ok(gc.eval(b))));
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|h| field.with_step(*h).d_at(&[0.3, 0.5, -0.2]).unwrap().sub(&exact).unwrap().max_abs())
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.9, "{errs:?}");
        }
        let bounded = SampledField::new(3, 0.1, vec![0.0; 3], vec![1.0; 3], field.f.clone()).unwrap();
        assert!(matches!(bounded.d_at(&[0.05, 0.5, 0.5]), Err(FormError::Boundary { coord: 0, .. })));
    }

    #[test]
    fn contraction_examples() {
        let zero = |_: &[f64]| Ok(Form::<Cplx>::zero(2));
        let (k0, _) = contract_integrate(&zero, &Homotopy::Linear { base: vec![0.0, 0.0] }, &[0.3, 0.4], 8, 1e-12).unwrap();
        assert_eq!(k0.max_abs(), 0.0);
        // θ = b0² db1 → Kθ = ∫ t² b0² b1 dt = b0² b1 / 3
        let theta = |y: &[f64]| Ok(Form::single(2, 0b10, Coef::even(c(y[0] * y[0]))));
        let b = [0.7, -1.3];
        let (k, est) = contract_integrate(&theta, &Homotopy::Linear { base: vec![0.0, 0.0] }, &b, 8, 1e-10).unwrap();
        assert!((k.scalar(0) - c(b[0] * b[0] * b[1] / 3.0)).norm() < 1e-12 && est < 1e-12);
        // closed 2-form: d of the potential returns it
        let theta2 = |y: &[f64]| Ok(Form::single(2, 0b11, Coef::even(c(1.0 + y[0] * y[1]))));
        let pot = SampledField::unbounded(
            2,
            1e-3,
            Arc::new(move |b: &[f64]| {
                contract_integrate(&theta2, &Homotopy::Linear { base: vec![0.1, 0.2] }, b, 16, 1e-9).map(|r| r.0)
            }),
        );
        let dk = pot.d_at(&[0.5, -0.4]).unwrap();
        assert!((dk.scalar(0b11) - c(1.0 - 0.2)).norm() < 1e-6);
        // general path: a curved contraction onto the same base point
        let curved = Homotopy::General {
            map: Arc::new(|t: f64, b: &[f64]| vec![t * b[0] + 0.2 * t * (1.0 - t), t * t * b[1]]),
            h: 1e-5,
        };
        let pot2 = SampledField::unbounded(
            2,
            1e-3,
            Arc::new(move |b: &[f64]| contract_integrate(&theta2, &curved, b, 64, 1e-6).map(|r| r.0)),
        );
        let dk2 = pot2.d_at(&[0.5, -0.4]).unwrap();
        assert!((dk2.scalar(0b11) - c(0.8)).norm() < 1e-5, "{}", dk2.scalar(0b11));
    }
}

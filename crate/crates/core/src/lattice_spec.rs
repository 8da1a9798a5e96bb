//! Spectral models on the circle.
//!
//! Two tiers: the Toeplitz class (`e^{ikx} f(D)` with `f` built from shifted
//! powers, `|n|` and brackets `(n²+c)^s`), on which `TR(A Q^{-z})` is continued
//! exactly through Hurwitz zeta values; and a truncated Fourier lattice for
//! twisted Dirac families, used for windows, projections and sign operators.

use crate::linalg;
use crate::regularization::{self, digamma_int, hurwitz_zeta_f64, RegError};
use crate::symbol_calc::{self, table, ClassicalSymbol, FourierTable, LogSymbol, SymbolError};
use crate::{CMat, Cplx, Germ, Rational};
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error("expansion depth {depth} exhausted, remainder bound {bound:e}")]
    DepthExhausted { depth: usize, bound: f64 },
    #[error("operator not invertible (twist {0})")]
    NonInvertible(f64),
    #[error("lambda {lambda} within 1e-10 of eigenvalue {eigenvalue}")]
    Collision { lambda: f64, eigenvalue: f64 },
    #[error("bad window: {0}")]
    Window(String),
    #[error("outside the Toeplitz class: {0}")]
    Class(String),
    #[error("malformed family: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

/// Eigenvalue/λ collision tolerance.
pub const COLLISION_TOL: f64 = 1e-10;
/// Maximum number of expansion terms used for continuation.
pub const MAX_EXPANSION: usize = 12;
const REMAINDER_TOL: f64 = 1e-13;

// ---------------------------------------------------------------- series

/// `Σ_j c_j u^{order-j}` truncated to `c.len()` terms.
#[derive(Debug, Clone)]
struct Chain {
    order: f64,
    c: Vec<Cplx>,
}

/// Large-`u` expansion, possibly several chains with non-integer spacing.
#[derive(Debug, Clone)]
pub struct Series {
    chains: Vec<Chain>,
    depth: usize,
}

fn int_gap(a: f64, b: f64) -> Option<i64> {
    let d = a - b;
    ((d - d.round()).abs() < 1e-12).then(|| d.round() as i64)
}

impl Series {
    fn zero(depth: usize) -> Self {
        Series { chains: vec![], depth }
    }

    fn single(order: f64, mut c: Vec<Cplx>, depth: usize) -> Self {
        c.resize(depth, Cplx::zero());
        Series { chains: vec![Chain { order, c }], depth }
    }

    fn push(&mut self, ch: Chain) {
        for e in self.chains.iter_mut() {
            if let Some(g) = int_gap(e.order, ch.order) {
                let (hi, lo) = if g >= 0 { (e.clone(), ch) } else { (ch, e.clone()) };
                let off = int_gap(hi.order, lo.order).unwrap() as usize;
                let mut c = hi.c.clone();
                for (j, v) in lo.c.iter().enumerate() {
                    if j + off < self.depth {
                        c[j + off] += v;
                    }
                }
                *e = Chain { order: hi.order, c };
                return;
            }
        }
        self.chains.push(ch);
    }

    fn add(&self, other: &Series) -> Series {
        let mut out = self.clone();
        for ch in &other.chains {
            out.push(ch.clone());
        }
        out
    }

    fn mul(&self, other: &Series) -> Series {
        let mut out = Series::zero(self.depth);
        for a in &self.chains {
            for b in &other.chains {
                let mut c = vec![Cplx::zero(); self.depth];
                for (i, x) in a.c.iter().enumerate() {
                    for (j, y) in b.c.iter().enumerate().take(self.depth - i) {
                        c[i + j] += x * y;
                    }
                }
                out.push(Chain { order: a.order + b.order, c });
            }
        }
        out
    }

    fn scale(&self, k: Cplx) -> Series {
        Series {
            chains: self
                .chains
                .iter()
                .map(|ch| Chain { order: ch.order, c: ch.c.iter().map(|x| x * k).collect() })
                .collect(),
            depth: self.depth,
        }
    }

    /// Leading order and coefficients if the series is a single chain.
    pub fn as_single(&self) -> Option<(f64, Vec<Cplx>)> {
        match self.chains.len() {
            0 => Some((0.0, vec![Cplx::zero(); self.depth])),
            1 => Some((self.chains[0].order, self.chains[0].c.clone())),
            _ => None,
        }
    }
}

fn binom_real(s: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (s - i as f64) / (i as f64 + 1.0))
}

/// Coefficients of `v^i`, `i < depth`, in `(1 + β1 v + β2 v²)^s`.
fn binomial_series(s: f64, beta1: f64, beta2: f64, depth: usize) -> Vec<Cplx> {
    let x = [0.0, beta1, beta2];
    let mut out = vec![0.0; depth];
    let mut xk = vec![0.0; depth];
    xk[0] = 1.0;
    for k in 0..depth {
        let b = binom_real(s, k);
        for i in 0..depth {
            out[i] += b * xk[i];
        }
        let mut next = vec![0.0; depth];
        for i in 0..depth {
            for (d, xd) in x.iter().enumerate().skip(1) {
                if i + d < depth {
                    next[i + d] += xk[i] * xd;
                }
            }
        }
        xk = next;
    }
    out.into_iter().map(|v| Cplx::new(v, 0.0)).collect()
}

// ---------------------------------------------------------------- radial

/// Function of the mode number `n`, acting diagonally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Radial {
    Const { value: Cplx },
    /// `(n + shift)^p`
    Poly { shift: f64, p: u32 },
    /// `|n + shift|`
    Abs { shift: f64 },
    /// `((n + shift)² + c)^s`, `c > 0`
    Bracket { shift: f64, c: f64, s: f64 },
    /// `value` at `n = at`, zero elsewhere (finite rank)
    Delta { at: i64, value: Cplx },
    Sum { items: Vec<Radial> },
    Prod { items: Vec<Radial> },
    Scale { k: Cplx, item: Box<Radial> },
}

impl Radial {
    pub fn one() -> Radial {
        Radial::Const { value: Cplx::new(1.0, 0.0) }
    }

    pub fn constant(v: f64) -> Radial {
        Radial::Const { value: Cplx::new(v, 0.0) }
    }

    pub fn abs() -> Radial {
        Radial::Abs { shift: 0.0 }
    }

    pub fn poly(p: u32) -> Radial {
        Radial::Poly { shift: 0.0, p }
    }

    pub fn bracket(c: f64, s: f64) -> Radial {
        Radial::Bracket { shift: 0.0, c, s }
    }

    pub fn scaled(self, k: Cplx) -> Radial {
        Radial::Scale { k, item: Box::new(self) }
    }

    pub fn plus(self, other: Radial) -> Radial {
        Radial::Sum { items: vec![self, other] }
    }

    pub fn times(self, other: Radial) -> Radial {
        Radial::Prod { items: vec![self, other] }
    }

    pub fn eval(&self, n: i64) -> Cplx {
        let x = n as f64;
        match self {
            Radial::Const { value } => *value,
            Radial::Poly { shift, p } => Cplx::new((x + shift).powi(*p as i32), 0.0),
            Radial::Abs { shift } => Cplx::new((x + shift).abs(), 0.0),
            Radial::Bracket { shift, c, s } => Cplx::new(((x + shift).powi(2) + c).powf(*s), 0.0),
            Radial::Delta { at, value } => {
                if *at == n {
                    *value
                } else {
                    Cplx::zero()
                }
            }
            Radial::Sum { items } => items.iter().map(|r| r.eval(n)).sum(),
            Radial::Prod { items } => items.iter().fold(Cplx::new(1.0, 0.0), |acc, r| acc * r.eval(n)),
            Radial::Scale { k, item } => k * item.eval(n),
        }
    }

    /// `n ↦ f(n + l)`.
    pub fn shifted(&self, l: i64) -> Radial {
        let lf = l as f64;
        match self {
            Radial::Const { .. } => self.clone(),
            Radial::Poly { shift, p } => Radial::Poly { shift: shift + lf, p: *p },
            Radial::Abs { shift } => Radial::Abs { shift: shift + lf },
            Radial::Bracket { shift, c, s } => Radial::Bracket { shift: shift + lf, c: *c, s: *s },
            Radial::Delta { at, value } => Radial::Delta { at: at - l, value: *value },
            Radial::Sum { items } => Radial::Sum { items: items.iter().map(|r| r.shifted(l)).collect() },
            Radial::Prod { items } => Radial::Prod { items: items.iter().map(|r| r.shifted(l)).collect() },
            Radial::Scale { k, item } => Radial::Scale { k: *k, item: Box::new(item.shifted(l)) },
        }
    }

    /// Expansion of `f(σu)` in powers of `u = |n|` for large `u`.
    pub fn series(&self, sign: i8, depth: usize) -> Series {
        let sg = sign as f64;
        match self {
            Radial::Const { value } => Series::single(0.0, vec![*value], depth),
            Radial::Poly { shift, p } => {
                let lead = if sign < 0 && p % 2 == 1 { -1.0 } else { 1.0 };
                let c = (0..=*p as usize)
                    .map(|j| Cplx::new(lead * binom_real(*p as f64, j) * (sg * shift).powi(j as i32), 0.0))
                    .collect();
                Series::single(*p as f64, c, depth)
            }
            Radial::Abs { shift } => {
                Series::single(1.0, vec![Cplx::new(1.0, 0.0), Cplx::new(sg * shift, 0.0)], depth)
            }
            Radial::Bracket { shift, c, s } => {
                let coef = binomial_series(*s, 2.0 * sg * shift, shift * shift + c, depth);
                Series::single(2.0 * s, coef, depth)
            }
            Radial::Delta { .. } => Series::zero(depth),
            Radial::Sum { items } => {
                items.iter().fold(Series::zero(depth), |acc, r| acc.add(&r.series(sign, depth)))
            }
            Radial::Prod { items } => items
                .iter()
                .fold(Series::single(0.0, vec![Cplx::new(1.0, 0.0)], depth), |acc, r| {
                    acc.mul(&r.series(sign, depth))
                }),
            Radial::Scale { k, item } => item.series(sign, depth).scale(*k),
        }
    }

    /// Size beyond which every leaf expansion converges comfortably.
    fn reach(&self) -> f64 {
        match self {
            Radial::Const { .. } => 0.0,
            Radial::Poly { shift, .. } | Radial::Abs { shift } => shift.abs(),
            Radial::Bracket { shift, c, .. } => shift.abs() + c.abs().sqrt(),
            Radial::Delta { at, .. } => at.abs() as f64,
            Radial::Sum { items } | Radial::Prod { items } => {
                items.iter().map(|r| r.reach()).fold(0.0, f64::max)
            }
            Radial::Scale { item, .. } => item.reach(),
        }
    }

    /// Polynomial in `n` (the radial part of a differential operator).
    pub fn is_polynomial(&self) -> bool {
        match self {
            Radial::Const { .. } | Radial::Poly { .. } => true,
            Radial::Abs { .. } | Radial::Bracket { .. } | Radial::Delta { .. } => false,
            Radial::Sum { items } | Radial::Prod { items } => items.iter().all(|r| r.is_polynomial()),
            Radial::Scale { item, .. } => item.is_polynomial(),
        }
    }
}

// ---------------------------------------------------------------- Toeplitz

/// `e^{ikx} f(D)`: mode `n` goes to `f(n)·` mode `n+k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzTerm {
    pub shift: i64,
    pub radial: Radial,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToeplitzOp {
    pub terms: Vec<ToeplitzTerm>,
}

impl ToeplitzOp {
    pub fn term(shift: i64, radial: Radial) -> Self {
        ToeplitzOp { terms: vec![ToeplitzTerm { shift, radial }] }
    }

    pub fn radial(radial: Radial) -> Self {
        Self::term(0, radial)
    }

    pub fn plus(&self, other: &ToeplitzOp) -> ToeplitzOp {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        ToeplitzOp { terms }
    }

    pub fn scaled(&self, k: Cplx) -> ToeplitzOp {
        ToeplitzOp {
            terms: self
                .terms
                .iter()
                .map(|t| ToeplitzTerm { shift: t.shift, radial: t.radial.clone().scaled(k) })
                .collect(),
        }
    }

    /// `(e^{ikx}f(D))(e^{ilx}g(D)) = e^{i(k+l)x} f(D+l) g(D)`.
    pub fn compose(&self, other: &ToeplitzOp) -> ToeplitzOp {
        let mut terms = vec![];
        for a in &self.terms {
            for b in &other.terms {
                terms.push(ToeplitzTerm {
                    shift: a.shift + b.shift,
                    radial: a.radial.shifted(b.shift).times(b.radial.clone()),
                });
            }
        }
        ToeplitzOp { terms }
    }

    pub fn commutator(&self, other: &ToeplitzOp) -> ToeplitzOp {
        self.compose(other).plus(&other.compose(self).scaled(Cplx::new(-1.0, 0.0)))
    }

    /// Diagonal part (all shift-0 terms).
    pub fn diagonal(&self) -> Radial {
        Radial::Sum { items: self.terms.iter().filter(|t| t.shift == 0).map(|t| t.radial.clone()).collect() }
    }

    pub fn is_differential(&self) -> bool {
        self.terms.iter().all(|t| t.radial.is_polynomial())
    }

    /// Matrix element `⟨n+k| A |n⟩` summed over terms with shift `k`.
    pub fn entry(&self, row: i64, col: i64) -> Cplx {
        self.terms.iter().filter(|t| t.shift == row - col).map(|t| t.radial.eval(col)).sum()
    }

    /// Full symbol `Σ e^{ikx} f_k(ξ)`; finite-rank pieces are dropped.
    pub fn to_symbol(&self, depth: usize) -> Result<ClassicalSymbol> {
        let mut acc: Option<ClassicalSymbol> = None;
        for t in &self.terms {
            let sp = t.radial.series(1, depth);
            let sm = t.radial.series(-1, depth);
            let (op, _) = sp.as_single().ok_or_else(|| LatticeError::Class("mixed non-integer orders".into()))?;
            let (om, _) = sm.as_single().ok_or_else(|| LatticeError::Class("mixed non-integer orders".into()))?;
            let order = if sp.chains.is_empty() { om } else { op };
            let cp = align(&sp, order, depth);
            let cm = align(&sm, order, depth);
            let mut s = ClassicalSymbol::zero(order, 1, depth);
            for j in 0..depth {
                let mode = |v: Cplx| {
                    let mut tb = table::FourierTable::new();
                    if !v.is_zero() {
                        tb.insert(t.shift, CMat::from_element(1, 1, v));
                    }
                    tb
                };
                s.terms[j].plus = mode(cp[j]);
                s.terms[j].minus = mode(cm[j]);
            }
            acc = Some(match acc {
                None => s,
                Some(a) => a.add(&s)?,
            });
        }
        Ok(acc.unwrap_or_else(|| ClassicalSymbol::zero(0.0, 1, depth)))
    }
}

fn align(s: &Series, order: f64, depth: usize) -> Vec<Cplx> {
    let mut out = vec![Cplx::zero(); depth];
    if let Some(ch) = s.chains.first() {
        let off = int_gap(order, ch.order).unwrap_or(0).max(0) as usize;
        for (j, v) in ch.c.iter().enumerate() {
            if j + off < depth {
                out[j + off] = *v;
            }
        }
    }
    out
}

// ---------------------------------------------------------------- weights

/// `Q = (D + b)² + c` with optional finite-rank overrides of its eigenvalues;
/// a zero eigenvalue is replaced by 1 (`Q + π_Q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    #[serde(default)]
    pub b: f64,
    pub c: f64,
    #[serde(default)]
    pub overrides: BTreeMap<i64, f64>,
}

impl Weight {
    pub fn new(b: f64, c: f64) -> Self {
        Weight { b, c, overrides: BTreeMap::new() }
    }

    pub fn order(&self) -> f64 {
        2.0
    }

    pub fn eval(&self, n: i64) -> f64 {
        let w = self.overrides.get(&n).copied().unwrap_or_else(|| (n as f64 + self.b).powi(2) + self.c);
        if w == 0.0 {
            1.0
        } else {
            w
        }
    }

    pub fn symbol(&self, depth: usize) -> ClassicalSymbol {
        let k = |v: f64| table::constant(CMat::from_element(1, 1, Cplx::new(v, 0.0)));
        ClassicalSymbol::polynomial(
            1,
            depth,
            &[(2, k(1.0)), (1, k(2.0 * self.b)), (0, k(self.b * self.b + self.c))],
        )
    }

    pub fn log_symbol(&self, depth: usize) -> Result<LogSymbol> {
        Ok(symbol_calc::log_symbol(&self.symbol(depth))?)
    }

    fn validate(&self) -> Result<()> {
        if self.c < 0.0 || self.overrides.values().any(|v| *v <= 0.0) {
            return Err(LatticeError::Class("weight must be non-negative with positive overrides".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- continuation

type Poly = Vec<Cplx>;

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = vec![Cplx::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval(p: &Poly, z: Cplx) -> Cplx {
    p.iter().rev().fold(Cplx::zero(), |acc, c| acc * z + c)
}

fn poly_deriv_eval(p: &Poly, z: Cplx) -> Cplx {
    p.iter().enumerate().skip(1).rev().fold(Cplx::zero(), |acc, (i, c)| acc * z + c * i as f64)
}

/// `h_i(z)`: coefficient of `v^i` in `(1 + β1 v + β2 v²)^{-z}`, a polynomial in `z`.
fn weight_polys(beta1: f64, beta2: f64, depth: usize) -> Vec<Poly> {
    let mut out: Vec<Poly> = vec![vec![Cplx::zero()]; depth];
    let mut xk = vec![0.0; depth];
    xk[0] = 1.0;
    let mut binom: Poly = vec![Cplx::new(1.0, 0.0)];
    for k in 0..depth {
        for i in 0..depth {
            if xk[i] != 0.0 {
                let term: Poly = binom.iter().map(|c| c * xk[i]).collect();
                let cur = &mut out[i];
                if cur.len() < term.len() {
                    cur.resize(term.len(), Cplx::zero());
                }
                for (a, b) in cur.iter_mut().zip(&term) {
                    *a += b;
                }
            }
        }
        // binom(-z, k+1) = binom(-z, k) (-z - k)/(k+1)
        binom = poly_mul(&binom, &vec![Cplx::new(-(k as f64), 0.0), Cplx::new(-1.0, 0.0)])
            .into_iter()
            .map(|c| c / (k as f64 + 1.0))
            .collect();
        let mut next = vec![0.0; depth];
        for i in 0..depth {
            if i + 1 < depth {
                next[i + 1] += xk[i] * beta1;
            }
            if i + 2 < depth {
                next[i + 2] += xk[i] * beta2;
            }
        }
        xk = next;
    }
    out
}

/// Germ of `Σ_n f(n) w(n)^{-z}` at `z0`.
fn radial_germ(f: &Radial, q: &Weight, z0: Cplx) -> Result<Germ> {
    q.validate()?;
    let reach = f.reach().max(q.b.abs() + q.c.sqrt());
    let ov = q.overrides.keys().map(|k| k.abs()).max().unwrap_or(0) as f64;
    let n0 = (4.0 * reach + 8.0).max(ov + 1.0).max(32.0).ceil() as i64;
    let n1 = 4 * n0;
    let depth = MAX_EXPANSION + 2;

    let wpow = |n: i64| -> Cplx { (-z0 * q.eval(n).ln()).exp() };
    let mut finite: Cplx = (-n0 + 1..n0).map(|n| f.eval(n) * wpow(n)).sum();
    let mut residue = Cplx::zero();
    let psi = digamma_int(n0 as u64);

    for sign in [1i8, -1] {
        let sg = sign as f64;
        let fs = f.series(sign, depth);
        let h = weight_polys(2.0 * sg * q.b, q.b * q.b + q.c, depth);
        let g = |ch: &Chain, j: usize| -> Poly {
            let mut p: Poly = vec![Cplx::zero()];
            for i in 0..=j {
                let t: Poly = h[j - i].iter().map(|x| x * ch.c[i]).collect();
                if p.len() < t.len() {
                    p.resize(t.len(), Cplx::zero());
                }
                for (a, b) in p.iter_mut().zip(&t) {
                    *a += b;
                }
            }
            p
        };
        let mut used = 0usize;
        let mut converged = fs.chains.is_empty();
        let mut bound = 0.0;
        while used < MAX_EXPANSION && !converged {
            let j = used;
            for ch in &fs.chains {
                let gj = g(ch, j);
                let s = 2.0 * z0 + j as f64 - ch.order;
                if (s - Cplx::new(1.0, 0.0)).norm() < 1e-10 {
                    let g0 = poly_eval(&gj, z0);
                    residue += g0 / 2.0;
                    finite += poly_deriv_eval(&gj, z0) / 2.0 - g0 * psi;
                } else {
                    finite += poly_eval(&gj, z0) * hurwitz_zeta_f64(s, n0 as f64)?;
                }
            }
            used += 1;
            // size of the first omitted term beyond the numerically summed window
            bound = 0.0;
            let mut ok = true;
            // look a few terms ahead: single coefficients may vanish by parity
            for ch in &fs.chains {
                for ahead in used..(used + 3).min(depth) {
                    let s = 2.0 * z0.re + ahead as f64 - ch.order;
                    if s <= 1.0 + 1e-9 {
                        ok = false;
                        break;
                    }
                    let gn = poly_eval(&g(ch, ahead), z0).norm();
                    bound += gn * hurwitz_zeta_f64(Cplx::new(s, 0.0), n1 as f64)?.re;
                }
            }
            converged = ok && bound < REMAINDER_TOL;
        }
        if !converged {
            return Err(LatticeError::DepthExhausted { depth: used, bound });
        }
        // remainder between the cut and the far window, summed directly
        for u in n0..n1 {
            let n = sign as i64 * u;
            let mut partial = Cplx::zero();
            for ch in &fs.chains {
                for j in 0..used {
                    let e = ch.order - 2.0 * z0 - j as f64;
                    partial += poly_eval(&g(ch, j), z0) * (e * (u as f64).ln()).exp();
                }
            }
            finite += f.eval(n) * wpow(n) - partial;
        }
    }
    let coeffs = if residue.is_zero() { vec![finite] } else { vec![residue, finite] };
    Ok(Germ::new(z0, coeffs))
}

/// Germ of `TR(A Q^{-z})` at `z0`; only the diagonal part of `A` contributes.
pub fn canonical_trace_germ(a: &ToeplitzOp, q: &Weight, z0: Cplx) -> Result<Germ> {
    radial_germ(&a.diagonal(), q, z0)
}

/// `tr^Q(A) = fp_{z=0} TR(A Q^{-z})`.
pub fn weighted_trace(a: &ToeplitzOp, q: &Weight) -> Result<Cplx> {
    Ok(canonical_trace_germ(a, q, Cplx::zero())?.finite_part())
}

/// Heat route: fit `tr(A e^{-εQ}) ~ Σ c_α ε^α` on `ε = 2^{-4..-23}` and read
/// off `c_0`, which equals `tr^Q(A)` for differential `A` (no log terms).
pub fn weighted_trace_heat(a: &ToeplitzOp, q: &Weight) -> Result<(Cplx, regularization::FitReport)> {
    if !a.is_differential() {
        return Err(LatticeError::Class("heat route needs a differential A".into()));
    }
    q.validate()?;
    let diag = a.diagonal();
    let d = a.to_symbol(4)?.effective_order(1e-12).unwrap_or(0.0).max(0.0).round() as i64;
    let samples: Vec<(f64, Cplx)> = regularization::geometric_grid(4, 23)
        .into_iter()
        .map(|eps| {
            let cut = (42.0 / eps).sqrt().ceil() as i64 + q.b.abs().ceil() as i64 + 2;
            let mut acc = Cplx::zero();
            for k in (0..=cut).rev() {
                for n in if k == 0 { vec![0] } else { vec![k, -k] } {
                    acc += diag.eval(n) * (-eps * q.eval(n)).exp();
                }
            }
            (eps, acc)
        })
        .collect();
    let fit = regularization::fit_expansion(&samples, &regularization::heat_exponents(d + 1, 10))?;
    Ok((fit.expansion.coefficient(Rational::zero()), fit))
}

/// `(tr^Q(A), -(1/q) res(A log Q))` for differential `A`.
pub fn trq_res_check(a: &ToeplitzOp, q: &Weight, depth: usize) -> Result<(Cplx, Cplx)> {
    if !a.is_differential() {
        return Err(LatticeError::Class("A must be differential".into()));
    }
    let lhs = weighted_trace(a, q)?;
    let res = symbol_calc::wodzicki_residue_log(&a.to_symbol(depth)?, &q.log_symbol(depth)?)?;
    Ok((lhs, -res / q.order()))
}

/// `(tr^{Q1}(A) - tr^{Q2}(A), -res(A (log Q1/q1 - log Q2/q2)))`.
pub fn weight_change_defect(a: &ToeplitzOp, q1: &Weight, q2: &Weight, depth: usize) -> Result<(Cplx, Cplx)> {
    let lhs = weighted_trace(a, q1)? - weighted_trace(a, q2)?;
    let l1 = q1.log_symbol(depth)?.scale(Cplx::new(1.0 / q1.order(), 0.0));
    let l2 = q2.log_symbol(depth)?.scale(Cplx::new(1.0 / q2.order(), 0.0));
    let diff = l1.sub(&l2)?;
    let res = symbol_calc::wodzicki_residue_log(&a.to_symbol(depth)?, &diff)?;
    Ok((lhs, -res))
}

/// `(tr^Q([A,B]), -(1/q) res(A [B, log Q]))`.
pub fn cyclicity_defect(a: &ToeplitzOp, b: &ToeplitzOp, q: &Weight, depth: usize) -> Result<(Cplx, Cplx)> {
    let lhs = weighted_trace(&a.commutator(b), q)?;
    let sa = a.to_symbol(depth)?;
    let sb = b.to_symbol(depth)?;
    let c = symbol_calc::log_commutator(&sb, &q.log_symbol(depth)?)?.into_classical()?;
    let res = symbol_calc::wodzicki_residue(&symbol_calc::compose(&sa, &c)?)?;
    Ok((lhs, -res / q.order()))
}

// ---------------------------------------------------------------- eta

#[derive(Debug, Clone, PartialEq)]
pub struct EtaReport {
    pub closed_form: f64,
    pub numeric: f64,
    /// `(T, Σ sign(λ) erfc(T|λ|))` samples used for the fit.
    pub samples: Vec<(f64, f64)>,
    pub fit_residual: f64,
}

fn check_twist(a: f64) -> Result<f64> {
    if !a.is_finite() || (a - a.round()).abs() < COLLISION_TOL {
        return Err(LatticeError::NonInvertible(a));
    }
    Ok(a - a.floor())
}

/// `η(D_a)` for `D_a = -i d/dx + a` through Hurwitz values.
pub fn eta_closed_form(a: f64) -> Result<f64> {
    let a = check_twist(a)?;
    let z = Cplx::zero();
    Ok((hurwitz_zeta_f64(z, a)? - hurwitz_zeta_f64(z, 1.0 - a)?).re)
}

/// `Σ_n sign(n+a) erfc(T|n+a|)`, which tends to `η` as `T → 0`.
pub fn eta_erfc_sum(a: f64, t: f64) -> f64 {
    let cut = (27.0 / t).ceil() as i64 + 2;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for n in (-cut..=cut).rev() {
        let l = n as f64 + a;
        if l > 0.0 {
            pos += erfc(t * l);
        } else if l < 0.0 {
            neg += erfc(-t * l);
        }
    }
    pos - neg
}

pub fn eta_invariant(a: f64) -> Result<EtaReport> {
    let closed_form = eta_closed_form(a)?;
    let af = check_twist(a)?;
    let samples: Vec<(f64, f64)> = (2..8).map(|k| {
        let t = 2f64.powi(-k);
        (t, eta_erfc_sum(af, t))
    }).collect();
    let pts: Vec<(f64, Cplx)> = samples.iter().map(|(t, v)| (*t, Cplx::new(*v, 0.0))).collect();
    let exps = [Rational::from_integer(0), Rational::from_integer(1), Rational::from_integer(2)];
    let fit = regularization::fit_expansion(&pts, &exps)?;
    let numeric = fit.expansion.coefficient(Rational::from_integer(0)).re;
    Ok(EtaReport { closed_form, numeric, samples, fit_residual: fit.residual })
}

// ---------------------------------------------------------------- Dirac families

/// Parameter direction: `∂_{b_i} D = da·I + X_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub da: f64,
    pub potential: BTreeMap<i64, CMat>,
}

type Eigen = Arc<(Vec<f64>, CMat)>;

/// `D(b) = χ(-i d/dx) + a(b) + A(b)(x)` on `C^m`-valued functions, truncated to
/// modes `|n| <= N`, with `χ = diag(±1)`. Potentials store modes `k >= 0`;
/// `A_{-k} = A_k^†`.
#[derive(Debug, Clone)]
pub struct DiracFamily {
    pub m: usize,
    pub a: f64,
    pub n_cut: usize,
    pub potential: BTreeMap<i64, CMat>,
    pub directions: Vec<Direction>,
    pub lambda_grid: Vec<f64>,
    pub chirality: Vec<f64>,
    memo: Arc<Mutex<HashMap<Vec<u64>, Eigen>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialEntry {
    pub mode: i64,
    /// Row-major `[re, im]` pairs.
    pub matrix: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionEntry {
    #[serde(default)]
    pub da: f64,
    #[serde(default)]
    pub potential: Vec<PotentialEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub m: usize,
    pub a: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub potential: Vec<PotentialEntry>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub directions: Vec<DirectionEntry>,
    /// Per-component signs of the leading term; empty means all `+1`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chirality: Vec<f64>,
}

fn potential_from_entries(m: usize, entries: &[PotentialEntry]) -> Result<BTreeMap<i64, CMat>> {
    let mut out = BTreeMap::new();
    for e in entries {
        if e.matrix.len() != m * m {
            return Err(LatticeError::Malformed(format!("mode {}: expected {} entries", e.mode, m * m)));
        }
        let mat = CMat::from_row_iterator(m, m, e.matrix.iter().map(|p| Cplx::new(p[0], p[1])));
        let (k, mat) = if e.mode < 0 { (-e.mode, mat.adjoint()) } else { (e.mode, mat) };
        *out.entry(k).or_insert_with(|| CMat::zeros(m, m)) += mat;
    }
    Ok(out)
}

fn entries_from_potential(p: &BTreeMap<i64, CMat>) -> Vec<PotentialEntry> {
    p.iter()
        .map(|(k, mat)| {
            let mut v = vec![];
            for r in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    v.push([mat[(r, c)].re, mat[(r, c)].im]);
                }
            }
            PotentialEntry { mode: *k, matrix: v }
        })
        .collect()
}

/// A spectral window `(λ, λ')` with its projector.
#[derive(Debug, Clone)]
pub struct SpectralWindow {
    pub lambda: f64,
    pub lambda_prime: f64,
    pub projector: CMat,
    pub rank: usize,
}

impl DiracFamily {
    pub fn new(m: usize, a: f64, n_cut: usize, potential: BTreeMap<i64, CMat>) -> Result<Self> {
        if m == 0 {
            return Err(LatticeError::Malformed("rank must be positive".into()));
        }
        for (k, mat) in &potential {
            if *k < 0 || mat.nrows() != m || mat.ncols() != m {
                return Err(LatticeError::Malformed(format!("potential mode {k}")));
            }
        }
        if let Some(a0) = potential.get(&0) {
            if !linalg::is_hermitian(a0, 1e-12) {
                return Err(LatticeError::Malformed("zero mode of the potential must be hermitian".into()));
            }
        }
        Ok(DiracFamily {
            m,
            a,
            n_cut,
            potential,
            directions: vec![],
            lambda_grid: vec![],
            chirality: vec![1.0; m],
            memo: Arc::default(),
        })
    }

    pub fn with_directions(mut self, directions: Vec<Direction>) -> Result<Self> {
        for d in &directions {
            if let Some(x0) = d.potential.get(&0) {
                if !linalg::is_hermitian(x0, 1e-12) {
                    return Err(LatticeError::Malformed("direction zero mode must be hermitian".into()));
                }
            }
        }
        self.directions = directions;
        self.memo = Arc::default();
        Ok(self)
    }

    pub fn with_chirality(mut self, chirality: Vec<f64>) -> Result<Self> {
        if chirality.len() != self.m || chirality.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err(LatticeError::Malformed("chirality must list m signs ±1".into()));
        }
        self.chirality = chirality;
        self.memo = Arc::default();
        Ok(self)
    }

    pub fn from_descriptor(d: &FamilyDescriptor) -> Result<Self> {
        let pot = potential_from_entries(d.m, &d.potential)?;
        let dirs = d
            .directions
            .iter()
            .map(|e| Ok(Direction { da: e.da, potential: potential_from_entries(d.m, &e.potential)? }))
            .collect::<Result<Vec<_>>>()?;
        let mut f = DiracFamily::new(d.m, d.a, d.n, pot)?.with_directions(dirs)?;
        if !d.chirality.is_empty() {
            f = f.with_chirality(d.chirality.clone())?;
        }
        f.lambda_grid = d.lambda_grid.clone();
        Ok(f)
    }

    pub fn descriptor(&self) -> FamilyDescriptor {
        FamilyDescriptor {
            m: self.m,
            a: self.a,
            n: self.n_cut,
            potential: entries_from_potential(&self.potential),
            lambda_grid: self.lambda_grid.clone(),
            directions: self
                .directions
                .iter()
                .map(|d| DirectionEntry { da: d.da, potential: entries_from_potential(&d.potential) })
                .collect(),
            chirality: if self.chirality.iter().all(|s| *s == 1.0) { vec![] } else { self.chirality.clone() },
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: FamilyDescriptor = serde_json::from_str(s).map_err(|e| LatticeError::Malformed(e.to_string()))?;
        Self::from_descriptor(&d)
    }

    /// Same family at a different cutoff.
    pub fn with_cutoff(&self, n_cut: usize) -> Self {
        let mut f = self.clone();
        f.n_cut = n_cut;
        f.memo = Arc::default();
        f
    }

    pub fn dim(&self) -> usize {
        self.m * (2 * self.n_cut + 1)
    }

    pub fn params(&self) -> usize {
        self.directions.len()
    }

    /// Basis index of `(mode n, component r)`.
    pub fn index(&self, n: i64, r: usize) -> usize {
        (n + self.n_cut as i64) as usize * self.m + r
    }

    fn assemble(&self, twist: f64, pot: &BTreeMap<i64, CMat>) -> CMat {
        let nc = self.n_cut as i64;
        let m = self.m;
        let mut h = CMat::zeros(self.dim(), self.dim());
        for n in -nc..=nc {
            for r in 0..m {
                let i = self.index(n, r);
                h[(i, i)] += Cplx::new(n as f64 * self.chirality[r] + twist, 0.0);
            }
        }
        for (k, ak) in pot {
            for n in -nc..=nc {
                let np = n + k;
                if np.abs() > nc {
                    continue;
                }
                for r in 0..m {
                    for c in 0..m {
                        let (i, j) = (self.index(np, r), self.index(n, c));
                        h[(i, j)] += ak[(r, c)];
                        if *k != 0 {
                            h[(j, i)] += ak[(r, c)].conj();
                        }
                    }
                }
            }
        }
        h
    }

    fn param_data(&self, b: &[f64]) -> (f64, BTreeMap<i64, CMat>) {
        let mut twist = self.a;
        let mut pot = self.potential.clone();
        for (bi, d) in b.iter().zip(&self.directions) {
            twist += bi * d.da;
            for (k, x) in &d.potential {
                *pot.entry(*k).or_insert_with(|| CMat::zeros(self.m, self.m)) += x * Cplx::new(*bi, 0.0);
            }
        }
        (twist, pot)
    }

    /// Truncated matrix of `D(b)`.
    pub fn matrix(&self, b: &[f64]) -> CMat {
        let (twist, pot) = self.param_data(b);
        self.assemble(twist, &pot)
    }

    /// `∂_{b_i} D`, independent of `b`.
    pub fn matrix_derivative(&self, i: usize) -> CMat {
        let d = &self.directions[i];
        let mut h = self.assemble(d.da, &d.potential);
        let nc = self.n_cut as i64;
        // assemble adds the diagonal n; remove it
        for n in -nc..=nc {
            for r in 0..self.m {
                let j = self.index(n, r);
                h[(j, j)] -= Cplx::new(n as f64 * self.chirality[r], 0.0);
            }
        }
        h
    }

    /// Symbol of `D(b) - λ` (untruncated operator).
    pub fn symbol(&self, b: &[f64], lambda: f64, depth: usize) -> ClassicalSymbol {
        let (twist, pot) = self.param_data(b);
        let m = self.m;
        let mut t0 = FourierTable::new();
        for (k, ak) in &pot {
            if *k == 0 {
                *t0.entry(0).or_insert_with(|| CMat::zeros(m, m)) += ak;
            } else {
                *t0.entry(*k).or_insert_with(|| CMat::zeros(m, m)) += ak;
                *t0.entry(-*k).or_insert_with(|| CMat::zeros(m, m)) += ak.adjoint();
            }
        }
        *t0.entry(0).or_insert_with(|| CMat::zeros(m, m)) += CMat::identity(m, m) * Cplx::new(twist - lambda, 0.0);
        let chi = CMat::from_diagonal(&nalgebra::DVector::from_iterator(m, self.chirality.iter().map(|s| Cplx::new(*s, 0.0))));
        ClassicalSymbol::polynomial(m, depth, &[(1, table::constant(chi)), (0, t0)])
    }

    pub fn eigen(&self, b: &[f64]) -> Eigen {
        let key: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
        if let Some(e) = self.memo.lock().expect("memo lock").get(&key) {
            return e.clone();
        }
        let e = Arc::new(linalg::eigh(&self.matrix(b)));
        self.memo.lock().expect("memo lock").insert(key, e.clone());
        e
    }

    fn check_lambda(&self, vals: &[f64], lambda: f64) -> Result<()> {
        if let Some(v) = vals.iter().find(|v| (**v - lambda).abs() < COLLISION_TOL) {
            return Err(LatticeError::Collision { lambda, eigenvalue: *v });
        }
        Ok(())
    }

    /// `P(λλ') = Σ_{λ<μ<λ'} v v^†`.
    pub fn spectral_projection(&self, b: &[f64], lambda: f64, lambda_prime: f64) -> Result<SpectralWindow> {
        if !(lambda < lambda_prime) {
            return Err(LatticeError::Window(format!("need lambda < lambda' (got {lambda}, {lambda_prime})")));
        }
        let e = self.eigen(b);
        let (vals, vecs) = (&e.0, &e.1);
        self.check_lambda(vals, lambda)?;
        self.check_lambda(vals, lambda_prime)?;
        let mut p = CMat::zeros(self.dim(), self.dim());
        let mut rank = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > lambda && *v < lambda_prime {
                let col = vecs.column(i);
                p += &col * col.adjoint();
                rank += 1;
            }
        }
        Ok(SpectralWindow { lambda, lambda_prime, projector: p, rank })
    }

    /// `F(λ) = sign(D(b) - λ)`.
    pub fn sign_operator(&self, b: &[f64], lambda: f64) -> Result<CMat> {
        let e = self.eigen(b);
        self.check_lambda(&e.0, lambda)?;
        let vecs = &e.1;
        let d = nalgebra::DVector::from_iterator(
            e.0.len(),
            e.0.iter().map(|v| Cplx::new(if *v > lambda { 1.0 } else { -1.0 }, 0.0)),
        );
        Ok(vecs * CMat::from_diagonal(&d) * vecs.adjoint())
    }

    /// Smallest distance from `λ` to the spectrum at `b`.
    pub fn gap(&self, b: &[f64], lambda: f64) -> f64 {
        self.eigen(b).0.iter().map(|v| (v - lambda).abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn eigenvalues(&self, b: &[f64]) -> Vec<f64> {
        self.eigen(b).0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(x: f64) -> Cplx {
        Cplx::new(x, 0.0)
    }

    /// Brute-force oracle: Σ_{|n|<=N} f(n) w(n)^{-z} with N large, for
    /// absolutely convergent cases.
    fn direct(f: &Radial, q: &Weight, z: f64, n: i64) -> f64 {
        (-n..=n).map(|k| (f.eval(k) * q.eval(k).powf(-z)).re).sum()
    }

    #[test]
    fn germ_examples() {
        let q = Weight::new(0.0, 1.0);
        let one = ToeplitzOp::radial(Radial::one());
        let g = canonical_trace_germ(&one, &q, c(0.5)).unwrap();
        assert!((g.residue() - c(1.0)).norm() < 1e-10);
        assert!(weighted_trace(&one, &q).unwrap().norm() < 1e-10);
        for cc in [0.5, 1.0, 2.0, 3.5] {
            let w = weighted_trace(&ToeplitzOp::radial(Radial::abs()), &Weight::new(0.0, cc)).unwrap();
            assert!((w - c(-1.0 / 6.0 - cc)).norm() < 1e-9, "c={cc}: {w}");
        }
        let inv = ToeplitzOp::radial(Radial::bracket(1.0, -1.0));
        let w = weighted_trace(&inv, &q).unwrap();
        assert!((w - c(PI / PI.tanh())).norm() < 1e-10);
    }

    #[test]
    fn convergent_region_matches_direct_sum() {
        // Σ (n²+1)^{-z} at z = 1.3 and f = |n+2| at z = 1.7 against brute force with
        // an integral tail correction.
        let q = Weight::new(0.3, 1.5);
        for (f, z) in [(Radial::one(), 1.3), (Radial::Abs { shift: 2.0 }, 1.7)] {
            let g = radial_germ(&f, &q, c(z)).unwrap();
            let n = 200_000i64;
            let p = 2.0 * z - if matches!(f, Radial::Abs { .. }) { 1.0 } else { 0.0 };
            let tail = 2.0 * (n as f64 + 0.5).powf(1.0 - p) / (p - 1.0);
            let d = direct(&f, &q, z, n) + tail;
            assert!((g.finite_part().re - d).abs() < 1e-6, "{} vs {}", g.finite_part().re, d);
        }
    }

    #[test]
    fn trace_class_equals_sum() {
        let f = Radial::Bracket { shift: 0.5, c: 2.0, s: -1.5 }.times(Radial::Abs { shift: 0.0 }.plus(Radial::constant(1.0)));
        let w = weighted_trace(&ToeplitzOp::radial(f.clone()), &Weight::new(0.2, 0.7)).unwrap();
        // Σ O(n^{-2}): sum plus integral tail 2·∫_N^∞ x^{-2} dx
        let n = 400_000i64;
        let s: f64 = (-n..=n).map(|k| f.eval(k).re).sum::<f64>() + 2.0 / (n as f64 + 0.5);
        assert!((w.re - s).abs() < 1e-9, "{} {}", w.re, s);
    }

    #[test]
    fn weight_change_is_plus_one() {
        let a = ToeplitzOp::radial(Radial::abs());
        let (lhs, rhs) = weight_change_defect(&a, &Weight::new(0.0, 1.0), &Weight::new(0.0, 2.0), 6).unwrap();
        assert!((lhs - c(1.0)).norm() < 1e-9);
        assert!((rhs - c(1.0)).norm() < 1e-12);
    }

    #[test]
    fn cyclicity_examples() {
        let q = Weight::new(0.0, 1.0);
        let a = ToeplitzOp::term(1, Radial::one());
        let b = ToeplitzOp::term(-1, Radial::abs());
        let (lhs, rhs) = cyclicity_defect(&a, &b, &q, 6).unwrap();
        // oracle: diagonal of [a,b] is |n| - |n+1| = ∓1, so the continued sum is -1 (the n=0 term)
        assert!((lhs - c(-1.0)).norm() < 1e-9, "{lhs}");
        assert!((lhs - rhs).norm() < 1e-8, "{lhs} {rhs}");
        let r1 = ToeplitzOp::radial(Radial::abs());
        let r2 = ToeplitzOp::radial(Radial::poly(2));
        let (l0, r0) = cyclicity_defect(&r1, &r2, &q, 6).unwrap();
        assert!(l0.norm() < 1e-12 && r0.norm() < 1e-12);
    }

    #[test]
    fn trq_res_on_differential() {
        for (k, b, cc) in [(0, 0.0, 1.0), (0, 0.4, 2.0), (1, 0.0, 1.0), (0, -0.3, 0.5)] {
            let a = ToeplitzOp::term(k, Radial::poly(2).plus(Radial::poly(1).scaled(c(0.5))).plus(Radial::constant(-1.0)));
            let (lhs, rhs) = trq_res_check(&a, &Weight::new(b, cc), 6).unwrap();
            assert!((lhs - rhs).norm() < 1e-8, "{k} {b} {cc}: {lhs} {rhs}");
        }
    }

    #[test]
    fn finite_rank_edits() {
        let q1 = Weight::new(0.0, 1.0);
        let mut q2 = Weight::new(0.0, 2.0);
        let a = ToeplitzOp::radial(Radial::abs());
        let base = weight_change_defect(&a, &q1, &q2, 6).unwrap().0;
        let a2 = ToeplitzOp::radial(Radial::abs().plus(Radial::Delta { at: 3, value: c(7.0) }));
        q2.overrides.insert(-2, 11.0);
        let pert = weight_change_defect(&a2, &q1, &q2, 6).unwrap().0;
        assert!((pert - base).norm() < 1e-9);
    }

    #[test]
    fn eta_examples() {
        for (a, e) in [(0.5, 0.0), (0.25, 0.5), (0.3, 0.4), (0.75, -0.5)] {
            let r = eta_invariant(a).unwrap();
            assert!((r.closed_form - e).abs() < 1e-12);
            assert!((r.numeric - e).abs() < 1e-6, "{a}: {}", r.numeric);
        }
        assert!(matches!(eta_invariant(1.0), Err(LatticeError::NonInvertible(_))));
    }

    fn rank2_family(n: usize) -> DiracFamily {
        let mut pot = BTreeMap::new();
        pot.insert(0, CMat::from_row_slice(2, 2, &[c(0.1), Cplx::new(0.05, 0.02), Cplx::new(0.05, -0.02), c(-0.1)]));
        pot.insert(1, CMat::from_row_slice(2, 2, &[c(0.08), Cplx::new(0.0, 0.06), c(0.03), Cplx::new(-0.04, 0.01)]));
        DiracFamily::new(2, 0.3, n, pot).unwrap()
    }

    #[test]
    fn windows_and_signs() {
        let f = DiracFamily::new(2, 0.3, 8, BTreeMap::new()).unwrap();
        let w = f.spectral_projection(&[], -0.5, 0.5).unwrap();
        assert_eq!(w.rank, 2);
        let empty = f.spectral_projection(&[], 0.35, 0.4).unwrap();
        assert_eq!(empty.rank, 0);
        assert_eq!(linalg::max_abs(&empty.projector), 0.0);
        assert!(matches!(f.sign_operator(&[], 0.3), Err(LatticeError::Collision { .. })));

        let g = rank2_family(16);
        let fl = g.sign_operator(&[], -0.5).unwrap();
        let dim = g.dim();
        assert!(linalg::max_abs(&(&fl * &fl - linalg::eye(dim))) < 1e-12);
        let fr = g.sign_operator(&[], 1.5).unwrap();
        let p = g.spectral_projection(&[], -0.5, 1.5).unwrap();
        assert!(linalg::max_abs(&(&p.projector * &p.projector - &p.projector)) < 1e-12);
        assert!(linalg::max_abs(&(fl - fr - p.projector * c(2.0))) < 1e-12);
    }

    #[test]
    fn window_is_stable_under_refinement() {
        let lo = rank2_family(16).eigenvalues(&[]);
        let hi = rank2_family(32).eigenvalues(&[]);
        let inside = |v: &Vec<f64>| v.iter().copied().filter(|x| x.abs() < 4.0).collect::<Vec<_>>();
        let (a, b) = (inside(&lo), inside(&hi));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8, "{x} {y}");
        }
    }

    #[test]
    fn crossing_jump_is_finite_rank() {
        // twist direction: eigenvalue n + a crosses λ = 0 at a = 0
        let f = DiracFamily::new(1, -0.05, 10, BTreeMap::new())
            .unwrap()
            .with_directions(vec![Direction { da: 1.0, potential: BTreeMap::new() }])
            .unwrap();
        let jump = f.sign_operator(&[0.1], 0.0).unwrap() - f.sign_operator(&[0.0], 0.0).unwrap();
        let sv = jump.svd(false, false).singular_values;
        assert_eq!(sv.iter().filter(|s| **s > 1e-9).count(), 1);
    }

    #[test]
    fn descriptor_round_trip() {
        let f = rank2_family(6);
        let s = serde_json::to_string(&f.descriptor()).unwrap();
        let g = DiracFamily::from_json(&s).unwrap();
        assert_eq!(linalg::max_abs(&(f.matrix(&[]) - g.matrix(&[]))), 0.0);
        assert!(linalg::is_hermitian(&g.matrix(&[]), 1e-15));
    }

    #[test]
    fn heat_route_matches_zeta_route() {
        for (a, q) in [
            (ToeplitzOp::radial(Radial::one()), Weight::new(0.0, 1.0)),
            (ToeplitzOp::radial(Radial::one()), Weight::new(0.3, 2.0)),
        ] {
            let (heat, fit) = weighted_trace_heat(&a, &q).unwrap();
            let zeta = weighted_trace(&a, &q).unwrap();
            assert!((heat - zeta).norm() < 1e-8, "{q:?} {heat} {zeta} {}", fit.residual);
        }
        // higher order: the ε^0 coefficient sits under samples of size ε^{-3/2}
        let (heat, _) = weighted_trace_heat(&ToeplitzOp::radial(Radial::poly(2)), &Weight::new(0.0, 1.0)).unwrap();
        assert!(heat.norm() < 1e-4);
        assert!(weighted_trace_heat(&ToeplitzOp::radial(Radial::abs()), &Weight::new(0.0, 1.0)).is_err());
    }
}

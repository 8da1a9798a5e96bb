//! Matrix-valued classical and log-polyhomogeneous symbols on the circle.
//!
//! A homogeneous term of degree `d` is `|ξ|^d c_±(x)` where `c_±` are
//! trigonometric polynomials in `x` with `m×m` complex coefficients, one table
//! per sign of `ξ`. The cosphere is the two points `ξ = ±1`, so residues are
//! read off zero Fourier modes without quadrature.

use crate::linalg;
use crate::{CMat, Cplx};
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Default truncation depth (number of homogeneous terms kept).
pub const DEFAULT_DEPTH: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolError {
    #[error("matrix size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("symbol orders {0} and {1} do not differ by an integer")]
    NonIntegerSpacing(f64, f64),
    #[error("leading symbol is singular at xi = {0}")]
    NonElliptic(i8),
    #[error("leading symbol depends on x; its inverse is not a trigonometric polynomial")]
    NonConstantLeading,
    #[error("not admissible: {0}")]
    NotAdmissible(String),
    #[error("truncation depth {depth} does not reach degree {degree} (order {order})")]
    InsufficientDepth { order: f64, depth: usize, degree: f64 },
    #[error("residue of A log Q needs A differential or a vanishing log part")]
    NotDifferential,
    #[error("log part does not vanish")]
    LogPartNonzero,
    #[error("malformed symbol: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, SymbolError>;

/// Fourier coefficients `mode -> m×m matrix` of a trigonometric polynomial.
pub type FourierTable = BTreeMap<i64, CMat>;

fn t_const(m: CMat) -> FourierTable {
    let mut t = FourierTable::new();
    if !m.iter().all(|z| z.is_zero()) {
        t.insert(0, m);
    }
    t
}

fn t_add(a: &FourierTable, b: &FourierTable, kb: Cplx) -> FourierTable {
    let mut out = a.clone();
    for (k, m) in b {
        let e = out.entry(*k).or_insert_with(|| CMat::zeros(m.nrows(), m.ncols()));
        *e += m * kb;
    }
    out.retain(|_, m| !m.iter().all(|z| z.is_zero()));
    out
}

fn t_scale(a: &FourierTable, k: Cplx) -> FourierTable {
    if k.is_zero() {
        return FourierTable::new();
    }
    a.iter().map(|(i, m)| (*i, m * k)).collect()
}

fn t_mul(a: &FourierTable, b: &FourierTable) -> FourierTable {
    let mut out = FourierTable::new();
    for (i, ma) in a {
        for (j, mb) in b {
            let p = ma * mb;
            match out.get_mut(&(i + j)) {
                Some(e) => *e += p,
                None => {
                    out.insert(i + j, p);
                }
            }
        }
    }
    out.retain(|_, m| !m.iter().all(|z| z.is_zero()));
    out
}

/// `(-i ∂_x)^α` on a table: mode `k` picks up `k^α`.
fn t_dx(a: &FourierTable, alpha: usize) -> FourierTable {
    if alpha == 0 {
        return a.clone();
    }
    a.iter()
        .filter(|(k, _)| **k != 0)
        .map(|(k, m)| (*k, m * Cplx::new((*k as f64).powi(alpha as i32), 0.0)))
        .collect()
}

fn t_max_abs(a: &FourierTable) -> f64 {
    a.values().map(linalg::max_abs).fold(0.0, f64::max)
}

fn t_eval(a: &FourierTable, x: f64, m: usize) -> CMat {
    let mut out = CMat::zeros(m, m);
    for (k, c) in a {
        out += c * Cplx::new(0.0, *k as f64 * x).exp();
    }
    out
}

/// Falling factorial `d (d-1) … (d-α+1)`.
fn falling(d: f64, alpha: usize) -> f64 {
    (0..alpha).fold(1.0, |acc, i| acc * (d - i as f64))
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn is_int(x: f64) -> bool {
    (x - x.round()).abs() < 1e-12
}

/// `|ξ|^degree · c_{sign ξ}(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousTerm {
    pub degree: f64,
    pub plus: FourierTable,
    pub minus: FourierTable,
}

impl HomogeneousTerm {
    pub fn zero(degree: f64) -> Self {
        HomogeneousTerm { degree, plus: FourierTable::new(), minus: FourierTable::new() }
    }

    pub fn is_zero(&self) -> bool {
        self.plus.is_empty() && self.minus.is_empty()
    }

    pub fn side(&self, sign: i8) -> &FourierTable {
        if sign > 0 {
            &self.plus
        } else {
            &self.minus
        }
    }

    fn max_abs(&self) -> f64 {
        t_max_abs(&self.plus).max(t_max_abs(&self.minus))
    }

    /// `∂_ξ^α`: degree drops by `α`, the minus side picks up `(-1)^α`.
    fn d_xi(&self, alpha: usize) -> HomogeneousTerm {
        let f = falling(self.degree, alpha);
        let fm = if alpha % 2 == 0 { f } else { -f };
        HomogeneousTerm {
            degree: self.degree - alpha as f64,
            plus: t_scale(&self.plus, Cplx::new(f, 0.0)),
            minus: t_scale(&self.minus, Cplx::new(fm, 0.0)),
        }
    }
}

/// Truncated polyhomogeneous symbol: `terms[j]` has degree `order - j`,
/// `j < depth`; everything of degree `<= order - depth` is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalSymbol {
    pub order: f64,
    pub rank: usize,
    pub depth: usize,
    pub terms: Vec<HomogeneousTerm>,
}

impl ClassicalSymbol {
    pub fn zero(order: f64, rank: usize, depth: usize) -> Self {
        let terms = (0..depth).map(|j| HomogeneousTerm::zero(order - j as f64)).collect();
        ClassicalSymbol { order, rank, depth, terms }
    }

    pub fn identity(rank: usize, depth: usize) -> Self {
        Self::multiplication(rank, depth, t_const(CMat::identity(rank, rank)))
    }

    /// Multiplication by a matrix-valued trigonometric polynomial (order 0).
    pub fn multiplication(rank: usize, depth: usize, table: FourierTable) -> Self {
        let mut s = Self::zero(0.0, rank, depth);
        if depth > 0 {
            s.terms[0].plus = table.clone();
            s.terms[0].minus = table;
        }
        s
    }

    /// `Σ_p ξ^p c_p(x)`, the symbol of the differential operator `Σ c_p D^p`.
    pub fn polynomial(rank: usize, depth: usize, coeffs: &[(usize, FourierTable)]) -> Self {
        let order = coeffs.iter().map(|c| c.0).max().unwrap_or(0) as f64;
        let mut s = Self::zero(order, rank, depth);
        for (p, table) in coeffs {
            let j = (order - *p as f64) as usize;
            if j >= depth {
                continue;
            }
            let sgn = if p % 2 == 0 { 1.0 } else { -1.0 };
            let t = &mut s.terms[j];
            t.plus = t_add(&t.plus, table, Cplx::new(1.0, 0.0));
            t.minus = t_add(&t.minus, table, Cplx::new(sgn, 0.0));
        }
        s
    }

    /// `ξ · I`, the symbol of `D = -i d/dx`.
    pub fn xi(rank: usize, depth: usize) -> Self {
        Self::polynomial(rank, depth, &[(1, t_const(CMat::identity(rank, rank)))])
    }

    /// Scalar x-independent symbol with per-sign coefficient sequences for
    /// degrees `order, order-1, …`.
    pub fn radial(order: f64, depth: usize, plus: &[Cplx], minus: &[Cplx]) -> Self {
        let mut s = Self::zero(order, 1, depth);
        for j in 0..depth {
            let p = plus.get(j).copied().unwrap_or_else(Cplx::zero);
            let m = minus.get(j).copied().unwrap_or_else(Cplx::zero);
            s.terms[j].plus = t_const(CMat::from_element(1, 1, p));
            s.terms[j].minus = t_const(CMat::from_element(1, 1, m));
        }
        s
    }

    /// Scalar symbol tensored with the `rank×rank` identity.
    pub fn tensor_identity(&self, rank: usize) -> Self {
        assert_eq!(self.rank, 1);
        let lift = |t: &FourierTable| -> FourierTable {
            t.iter().map(|(k, m)| (*k, CMat::identity(rank, rank) * m[(0, 0)])).collect()
        };
        ClassicalSymbol {
            order: self.order,
            rank,
            depth: self.depth,
            terms: self
                .terms
                .iter()
                .map(|t| HomogeneousTerm { degree: t.degree, plus: lift(&t.plus), minus: lift(&t.minus) })
                .collect(),
        }
    }

    pub fn term_of_degree(&self, degree: f64) -> Option<&HomogeneousTerm> {
        let j = self.order - degree;
        if !is_int(j) || j < -0.5 {
            return None;
        }
        self.terms.get(j.round() as usize)
    }

    /// Lowest degree that is still known.
    pub fn valid_above(&self) -> f64 {
        self.order - self.depth as f64
    }

    pub fn truncate(&self, depth: usize) -> Self {
        let mut s = self.clone();
        s.depth = depth.min(self.depth);
        s.terms.truncate(s.depth);
        s
    }

    /// Degree of the first term whose coefficients exceed `tol`, if any.
    pub fn effective_order(&self, tol: f64) -> Option<f64> {
        self.terms.iter().find(|t| t.max_abs() > tol).map(|t| t.degree)
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.iter().map(|t| t.max_abs()).fold(0.0, f64::max)
    }

    /// Polynomial in `ξ` with no negative-degree part.
    pub fn is_differential(&self) -> bool {
        self.terms.iter().all(|t| {
            if t.is_zero() {
                return true;
            }
            if t.degree < -1e-12 || !is_int(t.degree) {
                return false;
            }
            let d = t.degree.round() as i64;
            let sgn = if d % 2 == 0 { 1.0 } else { -1.0 };
            t_max_abs(&t_add(&t.minus, &t.plus, Cplx::new(-sgn, 0.0))) == 0.0
        })
    }

    /// Pointwise value at `(x, ξ)`, `ξ ≠ 0`, summing the known terms.
    pub fn eval(&self, x: f64, xi: f64) -> CMat {
        let sign: i8 = if xi > 0.0 { 1 } else { -1 };
        let mut out = CMat::zeros(self.rank, self.rank);
        for t in &self.terms {
            out += t_eval(t.side(sign), x, self.rank) * Cplx::new(xi.abs().powf(t.degree), 0.0);
        }
        out
    }

    pub fn scale(&self, k: Cplx) -> Self {
        let mut s = self.clone();
        for t in &mut s.terms {
            t.plus = t_scale(&t.plus, k);
            t.minus = t_scale(&t.minus, k);
        }
        s
    }

    /// `self + k·other`; orders must differ by an integer.
    pub fn add_scaled(&self, other: &Self, k: Cplx) -> Result<Self> {
        if self.rank != other.rank {
            return Err(SymbolError::SizeMismatch(self.rank, other.rank));
        }
        let diff = self.order - other.order;
        if !is_int(diff) {
            return Err(SymbolError::NonIntegerSpacing(self.order, other.order));
        }
        let order = self.order.max(other.order);
        let low = self.valid_above().max(other.valid_above());
        let depth = (order - low).round().max(0.0) as usize;
        let mut out = Self::zero(order, self.rank, depth);
        for (j, t) in out.terms.iter_mut().enumerate() {
            let deg = order - j as f64;
            if let Some(a) = self.term_of_degree(deg) {
                t.plus = t_add(&t.plus, &a.plus, Cplx::new(1.0, 0.0));
                t.minus = t_add(&t.minus, &a.minus, Cplx::new(1.0, 0.0));
            }
            if let Some(b) = other.term_of_degree(deg) {
                t.plus = t_add(&t.plus, &b.plus, k);
                t.minus = t_add(&t.minus, &b.minus, k);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, Cplx::new(1.0, 0.0))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, Cplx::new(-1.0, 0.0))
    }

    /// Drop terms of degree `< degree` and re-extend with explicit zeros
    /// (an x-independent smoothing-class edit used by insensitivity checks).
    pub fn with_term(&self, degree: f64, term: HomogeneousTerm) -> Self {
        let mut s = self.clone();
        let j = (self.order - degree).round() as usize;
        if j < s.depth {
            s.terms[j] = HomogeneousTerm { degree: s.terms[j].degree, ..term };
        }
        s
    }
}

/// `σ(A∘B) = Σ_α (1/α!) ∂_ξ^α a · (-i∂_x)^α b`, truncated to the smaller depth.
pub fn compose(a: &ClassicalSymbol, b: &ClassicalSymbol) -> Result<ClassicalSymbol> {
    if a.rank != b.rank {
        return Err(SymbolError::SizeMismatch(a.rank, b.rank));
    }
    let depth = a.depth.min(b.depth);
    let mut out = ClassicalSymbol::zero(a.order + b.order, a.rank, depth);
    for (j, aj) in a.terms.iter().enumerate().take(depth) {
        for (k, bk) in b.terms.iter().enumerate().take(depth - j) {
            if aj.is_zero() || bk.is_zero() {
                continue;
            }
            for alpha in 0..(depth - j - k) {
                let da = aj.d_xi(alpha);
                if da.is_zero() {
                    continue;
                }
                let w = Cplx::new(1.0 / factorial(alpha), 0.0);
                let n = j + k + alpha;
                let t = &mut out.terms[n];
                t.plus = t_add(&t.plus, &t_mul(&da.plus, &t_dx(&bk.plus, alpha)), w);
                t.minus = t_add(&t.minus, &t_mul(&da.minus, &t_dx(&bk.minus, alpha)), w);
            }
        }
    }
    Ok(out)
}

pub fn commutator(a: &ClassicalSymbol, b: &ClassicalSymbol) -> Result<ClassicalSymbol> {
    compose(a, b)?.sub(&compose(b, a)?)
}

fn constant_leading(a: &ClassicalSymbol) -> Result<(CMat, CMat)> {
    let lead = a.terms.first().ok_or(SymbolError::InsufficientDepth {
        order: a.order,
        depth: 0,
        degree: a.order,
    })?;
    let get = |t: &FourierTable| -> Result<CMat> {
        if t.keys().any(|k| *k != 0) {
            return Err(SymbolError::NonConstantLeading);
        }
        Ok(t.get(&0).cloned().unwrap_or_else(|| CMat::zeros(a.rank, a.rank)))
    };
    Ok((get(&lead.plus)?, get(&lead.minus)?))
}

/// Right parametrix: `compose(a, parametrix(a)) = I` up to degree `<= -depth`.
pub fn parametrix(a: &ClassicalSymbol) -> Result<ClassicalSymbol> {
    let (lp, lm) = constant_leading(a)?;
    let ip = lp.try_inverse().ok_or(SymbolError::NonElliptic(1))?;
    let im = lm.try_inverse().ok_or(SymbolError::NonElliptic(-1))?;
    let depth = a.depth;
    let mut b = ClassicalSymbol::zero(-a.order, a.rank, depth);
    b.terms[0].plus = t_const(ip.clone());
    b.terms[0].minus = t_const(im.clone());
    for n in 1..depth {
        let mut sp = FourierTable::new();
        let mut sm = FourierTable::new();
        for j in 0..=n {
            for alpha in 0..=(n - j) {
                let k = n - j - alpha;
                if k == n {
                    continue;
                }
                let da = a.terms[j].d_xi(alpha);
                let w = Cplx::new(1.0 / factorial(alpha), 0.0);
                sp = t_add(&sp, &t_mul(&da.plus, &t_dx(&b.terms[k].plus, alpha)), w);
                sm = t_add(&sm, &t_mul(&da.minus, &t_dx(&b.terms[k].minus, alpha)), w);
            }
        }
        let neg = Cplx::new(-1.0, 0.0);
        b.terms[n].plus = t_scale(&t_mul(&t_const(ip.clone()), &sp), neg);
        b.terms[n].minus = t_scale(&t_mul(&t_const(im.clone()), &sm), neg);
    }
    Ok(b)
}

/// Resolvent expansion of `(q - λ)^{-1}` on one side of the cosphere:
/// level `n` is `Σ_p R_{n,p}(x) |ξ|^{m(p-1)-n} (q_0 - λ)^{-p}`.
struct ResolventSide {
    order: usize,
    lead: f64,
    levels: Vec<BTreeMap<usize, FourierTable>>,
}

fn admissible_scalar(q: &ClassicalSymbol) -> Result<(usize, f64, f64)> {
    if !(q.order >= 2.0 - 1e-12) || !is_int(q.order) || (q.order.round() as i64) % 2 != 0 {
        return Err(SymbolError::NotAdmissible(format!("order {} is not a positive even integer", q.order)));
    }
    let (lp, lm) = constant_leading(q).map_err(|_| {
        SymbolError::NotAdmissible("leading symbol must be x-independent".into())
    })?;
    let scalar = |m: &CMat| -> Option<f64> {
        let c = m[(0, 0)];
        let ok = linalg::max_abs(&(m - CMat::identity(q.rank, q.rank) * c)) < 1e-13;
        (ok && c.im.abs() < 1e-13 && c.re > 0.0).then_some(c.re)
    };
    let cp = scalar(&lp).ok_or_else(|| SymbolError::NotAdmissible("leading symbol at xi=+1 is not a positive scalar".into()))?;
    let cm = scalar(&lm).ok_or_else(|| SymbolError::NotAdmissible("leading symbol at xi=-1 is not a positive scalar".into()))?;
    Ok((q.order.round() as usize, cp, cm))
}

fn resolvent_side(q: &ClassicalSymbol, m: usize, c: f64, sign: i8) -> ResolventSide {
    let rank = q.rank;
    let depth = q.depth;
    let mut levels: Vec<BTreeMap<usize, FourierTable>> = Vec::with_capacity(depth);
    let mut r0 = BTreeMap::new();
    r0.insert(1usize, t_const(CMat::identity(rank, rank)));
    levels.push(r0);
    let sgn = |alpha: usize| if sign < 0 && alpha % 2 == 1 { -1.0 } else { 1.0 };
    for n in 1..depth {
        let mut acc: BTreeMap<usize, FourierTable> = BTreeMap::new();
        for j in 0..=n {
            for alpha in 0..=(n - j) {
                let k = n - j - alpha;
                if k == n {
                    continue;
                }
                // ∂_ξ^α of the j-th term of q - λ (λ only sits in the leading term)
                let da: FourierTable = if j == 0 {
                    if alpha == 0 {
                        continue;
                    }
                    let f = falling(m as f64, alpha) * sgn(alpha) * c;
                    t_const(CMat::identity(rank, rank) * Cplx::new(f, 0.0))
                } else {
                    let t = &q.terms[j];
                    let f = falling(t.degree, alpha) * sgn(alpha);
                    t_scale(t.side(sign), Cplx::new(f, 0.0))
                };
                if da.is_empty() {
                    continue;
                }
                let w = Cplx::new(-1.0 / factorial(alpha), 0.0);
                for (p, rk) in &levels[k] {
                    let prod = t_mul(&da, &t_dx(rk, alpha));
                    let e = acc.entry(p + 1).or_default();
                    *e = t_add(e, &prod, w);
                }
            }
        }
        levels.push(acc);
    }
    ResolventSide { order: m, lead: c, levels }
}

fn binom_real(s: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (s - i as f64) / (i as f64 + 1.0))
}

/// Symbol of `Q^s` (cut at `π`) from the resolvent expansion, the contour
/// integral done termwise: `(q_0-λ)^{-p} ↦ (-1)^{p-1} C(s,p-1) q_0^{s-p+1}`.
pub fn power_symbol(q: &ClassicalSymbol, s: f64) -> Result<ClassicalSymbol> {
    let (m, cp, cm) = admissible_scalar(q)?;
    let sides = [resolvent_side(q, m, cp, 1), resolvent_side(q, m, cm, -1)];
    let mut out = ClassicalSymbol::zero(m as f64 * s, q.rank, q.depth);
    for (idx, side) in sides.iter().enumerate() {
        for (n, level) in side.levels.iter().enumerate() {
            let mut acc = FourierTable::new();
            for (p, r) in level {
                let sg = if (p - 1) % 2 == 0 { 1.0 } else { -1.0 };
                let coef = sg * binom_real(s, p - 1) * side.lead.powf(s - *p as f64 + 1.0);
                acc = t_add(&acc, r, Cplx::new(coef, 0.0));
            }
            if idx == 0 {
                out.terms[n].plus = acc;
            } else {
                out.terms[n].minus = acc;
            }
        }
        debug_assert_eq!(side.order, m);
    }
    Ok(out)
}

/// `a(x,ξ) + b(x,ξ) log|ξ|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSymbol {
    pub classical: ClassicalSymbol,
    pub log_part: ClassicalSymbol,
}

impl LogSymbol {
    pub fn from_classical(a: ClassicalSymbol) -> Self {
        let log_part = ClassicalSymbol::zero(0.0, a.rank, a.depth);
        LogSymbol { classical: a, log_part }
    }

    pub fn has_log(&self) -> bool {
        self.log_part.max_abs() > 0.0
    }

    pub fn add_scaled(&self, other: &Self, k: Cplx) -> Result<Self> {
        Ok(LogSymbol {
            classical: self.classical.add_scaled(&other.classical, k)?,
            log_part: self.log_part.add_scaled(&other.log_part, k)?,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, Cplx::new(-1.0, 0.0))
    }

    pub fn scale(&self, k: Cplx) -> Self {
        LogSymbol { classical: self.classical.scale(k), log_part: self.log_part.scale(k) }
    }

    pub fn into_classical(self) -> Result<ClassicalSymbol> {
        if self.has_log() {
            return Err(SymbolError::LogPartNonzero);
        }
        Ok(self.classical)
    }
}

/// `log Q = d/ds Q^s |_{s=0}`: log part `order(q)·I`, classical part of order 0.
pub fn log_symbol(q: &ClassicalSymbol) -> Result<LogSymbol> {
    let (m, cp, cm) = admissible_scalar(q)?;
    let sides = [resolvent_side(q, m, cp, 1), resolvent_side(q, m, cm, -1)];
    let mut classical = ClassicalSymbol::zero(0.0, q.rank, q.depth);
    for (idx, side) in sides.iter().enumerate() {
        for (n, level) in side.levels.iter().enumerate() {
            let mut acc = FourierTable::new();
            for (p, r) in level {
                let coef = if *p == 1 {
                    side.lead.ln()
                } else {
                    -side.lead.powf(1.0 - *p as f64) / (*p as f64 - 1.0)
                };
                acc = t_add(&acc, r, Cplx::new(coef, 0.0));
            }
            if idx == 0 {
                classical.terms[n].plus = acc;
            } else {
                classical.terms[n].minus = acc;
            }
        }
    }
    let log_part =
        ClassicalSymbol::identity(q.rank, q.depth).scale(Cplx::new(m as f64, 0.0));
    Ok(LogSymbol { classical, log_part })
}

/// `a ⋆ L`; `x`-derivatives never reach `log|ξ|`, so the log part is `a ⋆ b`.
pub fn compose_log_right(a: &ClassicalSymbol, l: &LogSymbol) -> Result<LogSymbol> {
    Ok(LogSymbol { classical: compose(a, &l.classical)?, log_part: compose(a, &l.log_part)? })
}

/// `L ⋆ b`, including the classical terms produced by `∂_ξ^β log|ξ|`.
pub fn compose_log_left(l: &LogSymbol, b: &ClassicalSymbol) -> Result<LogSymbol> {
    let mut classical = compose(&l.classical, b)?;
    let log_part = compose(&l.log_part, b)?;
    let depth = l.log_part.depth.min(b.depth);
    let mut extra = ClassicalSymbol::zero(l.log_part.order + b.order, b.rank, depth);
    for (j, lj) in l.log_part.terms.iter().enumerate().take(depth) {
        for (k, bk) in b.terms.iter().enumerate().take(depth - j) {
            for alpha in 1..(depth - j - k) {
                for beta in 1..=alpha {
                    // ∂^β log|ξ| = (-1)^{β-1} (β-1)! |ξ|^{-β} sign(ξ)^β
                    let g = (if (beta - 1) % 2 == 0 { 1.0 } else { -1.0 }) * factorial(beta - 1);
                    let dl = lj.d_xi(alpha - beta);
                    if dl.is_zero() {
                        continue;
                    }
                    let binom = factorial(alpha) / (factorial(beta) * factorial(alpha - beta));
                    let w = binom * g / factorial(alpha);
                    let wm = if beta % 2 == 0 { w } else { -w };
                    let n = j + k + alpha;
                    let t = &mut extra.terms[n];
                    t.plus = t_add(&t.plus, &t_mul(&dl.plus, &t_dx(&bk.plus, alpha)), Cplx::new(w, 0.0));
                    t.minus = t_add(&t.minus, &t_mul(&dl.minus, &t_dx(&bk.minus, alpha)), Cplx::new(wm, 0.0));
                }
            }
        }
    }
    classical = classical.add(&extra)?;
    Ok(LogSymbol { classical, log_part })
}

/// `[b, L]`, classical whenever the log part of `L` is central.
pub fn log_commutator(b: &ClassicalSymbol, l: &LogSymbol) -> Result<LogSymbol> {
    compose_log_right(b, l)?.sub(&compose_log_left(l, b)?)
}

/// `res(a) = (1/2π)∫ tr[σ_{-1}(x,+1) + σ_{-1}(x,-1)] dx`.
pub fn wodzicki_residue(a: &ClassicalSymbol) -> Result<Cplx> {
    let j = a.order + 1.0;
    if !is_int(j) || j < -0.5 {
        return Ok(Cplx::zero());
    }
    let j = j.round() as usize;
    if j >= a.depth {
        return Err(SymbolError::InsufficientDepth { order: a.order, depth: a.depth, degree: -1.0 });
    }
    let t = &a.terms[j];
    let tr = |tab: &FourierTable| tab.get(&0).map(linalg::trace).unwrap_or_else(Cplx::zero);
    Ok(tr(&t.plus) + tr(&t.minus))
}

/// `res(A · L)` for `A` differential, or for any `A` when `L` has no log part.
pub fn wodzicki_residue_log(a: &ClassicalSymbol, l: &LogSymbol) -> Result<Cplx> {
    if l.has_log() && !a.is_differential() {
        return Err(SymbolError::NotDifferential);
    }
    wodzicki_residue(&compose(a, &l.classical)?)
}

/// `σ(D |D|^{-1}) = d ⋆ (d⋆d)^{-1/2}`.
pub fn sign_symbol(d: &ClassicalSymbol) -> Result<ClassicalSymbol> {
    if !is_int(d.order) || d.order.round() as i64 != 1 {
        return Err(SymbolError::NotAdmissible(format!("sign symbol needs order 1, got {}", d.order)));
    }
    let d2 = compose(d, d)?;
    compose(d, &power_symbol(&d2, -0.5)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TermFile {
    degree: f64,
    plus: BTreeMap<i64, Vec<[f64; 2]>>,
    minus: BTreeMap<i64, Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SymbolFile {
    order: f64,
    depth: usize,
    rank: usize,
    terms: Vec<TermFile>,
}

fn table_to_file(t: &FourierTable) -> BTreeMap<i64, Vec<[f64; 2]>> {
    t.iter()
        .map(|(k, m)| {
            let mut v = Vec::with_capacity(m.len());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    v.push([m[(r, c)].re, m[(r, c)].im]);
                }
            }
            (*k, v)
        })
        .collect()
}

fn table_from_file(t: &BTreeMap<i64, Vec<[f64; 2]>>, rank: usize) -> Result<FourierTable> {
    t.iter()
        .map(|(k, v)| {
            if v.len() != rank * rank {
                return Err(SymbolError::Malformed(format!(
                    "mode {k}: expected {} entries, got {}",
                    rank * rank,
                    v.len()
                )));
            }
            Ok((*k, CMat::from_row_iterator(rank, rank, v.iter().map(|p| Cplx::new(p[0], p[1])))))
        })
        .collect()
}

impl ClassicalSymbol {
    pub fn to_json(&self) -> String {
        let f = SymbolFile {
            order: self.order,
            depth: self.depth,
            rank: self.rank,
            terms: self
                .terms
                .iter()
                .map(|t| TermFile { degree: t.degree, plus: table_to_file(&t.plus), minus: table_to_file(&t.minus) })
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("symbol serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SymbolFile = serde_json::from_str(s).map_err(|e| SymbolError::Malformed(e.to_string()))?;
        if f.rank == 0 {
            return Err(SymbolError::Malformed("rank must be at least 1".into()));
        }
        if f.terms.len() != f.depth {
            return Err(SymbolError::Malformed(format!("depth {} but {} terms", f.depth, f.terms.len())));
        }
        let mut terms = Vec::with_capacity(f.depth);
        for (j, t) in f.terms.iter().enumerate() {
            if (t.degree - (f.order - j as f64)).abs() > 1e-12 {
                return Err(SymbolError::Malformed(format!("term {j} has degree {}", t.degree)));
            }
            terms.push(HomogeneousTerm {
                degree: t.degree,
                plus: table_from_file(&t.plus, f.rank)?,
                minus: table_from_file(&t.minus, f.rank)?,
            });
        }
        Ok(ClassicalSymbol { order: f.order, rank: f.rank, depth: f.depth, terms })
    }
}

/// Table helpers exposed for other modules.
pub mod table {
    pub use super::FourierTable;
    use super::*;

    pub fn constant(m: CMat) -> FourierTable {
        t_const(m)
    }

    pub fn add(a: &FourierTable, b: &FourierTable, k: Cplx) -> FourierTable {
        t_add(a, b, k)
    }

    pub fn mul(a: &FourierTable, b: &FourierTable) -> FourierTable {
        t_mul(a, b)
    }

    pub fn scale(a: &FourierTable, k: Cplx) -> FourierTable {
        t_scale(a, k)
    }

    pub fn max_abs(a: &FourierTable) -> f64 {
        t_max_abs(a)
    }
}

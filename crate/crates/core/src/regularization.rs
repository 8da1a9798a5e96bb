//! Meromorphic germs, small-ε asymptotic expansions, the Hurwitz zeta
//! function and the Mellin finite-part bridge.

use crate::{Cplx, Rational};
use nalgebra::DMatrix;
use num_complex::Complex;
use num_traits::{Float, FromPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegError {
    #[error("pole of the Hurwitz zeta function at s = 1")]
    Pole,
    #[error("Hurwitz parameter must be positive, got {0}")]
    Domain(f64),
    #[error("expansion is not certified to decay at infinity")]
    Uncertified,
    #[error("exponents must be strictly increasing")]
    Unordered,
    #[error("germs expanded at different points")]
    PointMismatch,
    #[error("spectral gap must be positive to certify decay, got {0}")]
    NoGap(f64),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("ill-conditioned design matrix (condition estimate {0:.3e})")]
    IllConditioned(f64),
}

pub type Result<T> = std::result::Result<T, RegError>;

// B_2, B_4, ..., B_22
const BERNOULLI_EVEN: [f64; 11] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
    854513.0 / 138.0,
];

/// Number of Bernoulli correction terms in the Euler-Maclaurin tail.
pub const EM_TERMS: usize = 10;

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn c<T: Float + FromPrimitive>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

/// `x^{-s}` for real `x > 0`.
fn real_pow_neg<T: Float + FromPrimitive>(x: T, s: Complex<T>) -> Complex<T> {
    (-s * x.ln()).exp()
}

/// Hurwitz zeta `ζ(s, a) = Σ_{n≥0} (n+a)^{-s}`, analytically continued.
///
/// Euler-Maclaurin with [`EM_TERMS`] Bernoulli corrections; the split point
/// is chosen so the first omitted correction is below working precision.
/// Non-positive integer `s` needs no split (the tail terminates).
pub fn hurwitz_zeta<T: Float + FromPrimitive>(s: Complex<T>, a: T) -> Result<Complex<T>> {
    if !(a > T::zero()) {
        return Err(RegError::Domain(a.to_f64().unwrap_or(f64::NAN)));
    }
    if s.re == T::one() && s.im == T::zero() {
        return Err(RegError::Pole);
    }
    let one = Complex::new(T::one(), T::zero());
    let nonpos_int = s.im == T::zero() && s.re <= T::zero() && s.re == s.re.round();

    // |(s)_{2M+1}| B_{2M+2}/(2M+2)!, the size of the first omitted term
    let mut poch_abs = s.norm();
    for i in 1..(2 * EM_TERMS + 1) {
        poch_abs = poch_abs * (s + c::<T>(i as f64)).norm();
    }
    let tail_coef = poch_abs * c::<T>(BERNOULLI_EVEN[EM_TERMS].abs() / factorial(2 * EM_TERMS + 2));
    let decay = s.re + c::<T>((2 * EM_TERMS + 1) as f64);

    let mut n_split = 0usize;
    if !nonpos_int {
        loop {
            let x = c::<T>(n_split as f64) + a;
            let lead = real_pow_neg(x, s - one) / (s - one);
            let scale = lead.norm().max(T::one());
            let est = tail_coef * x.powf(-decay);
            if est <= c::<T>(1e-17) * scale || n_split > 200_000 {
                break;
            }
            n_split += if n_split < 64 { 1 } else { n_split / 8 };
        }
    }

    let mut head = Complex::new(T::zero(), T::zero());
    for n in (0..n_split).rev() {
        head = head + real_pow_neg(c::<T>(n as f64) + a, s);
    }
    let x = c::<T>(n_split as f64) + a;
    let x_s = real_pow_neg(x, s);
    let mut total = head + real_pow_neg(x, s - one) / (s - one) + x_s * c::<T>(0.5);
    // (s)_{2k-1} x^{-s-2k+1}
    let mut poch = s;
    let mut xp = x_s / x;
    let inv_x2 = T::one() / (x * x);
    for k in 1..=EM_TERMS {
        let coef = c::<T>(BERNOULLI_EVEN[k - 1] / factorial(2 * k));
        total = total + poch * xp * coef;
        poch = poch * (s + c::<T>((2 * k - 1) as f64)) * (s + c::<T>((2 * k) as f64));
        xp = xp * inv_x2;
        if poch.norm() == T::zero() {
            break;
        }
    }
    Ok(total)
}

/// Convenience wrapper over `f64`.
pub fn hurwitz_zeta_f64(s: Cplx, a: f64) -> Result<Cplx> {
    hurwitz_zeta(s, a)
}

/// Riemann zeta `ζ(s) = ζ(s, 1)`.
pub fn riemann_zeta(s: Cplx) -> Result<Cplx> {
    hurwitz_zeta(s, 1.0)
}

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma at a positive integer, `ψ(n) = -γ + Σ_{k<n} 1/k`.
pub fn digamma_int(n: u64) -> f64 {
    assert!(n >= 1, "digamma_int needs n >= 1");
    -EULER_GAMMA + (1..n).rev().map(|k| 1.0 / k as f64).sum::<f64>()
}

/// Laurent germ `Σ_{k=0}^{p} c_k (z - z0)^{k - p}` truncated at the constant term.
#[derive(Debug, Clone, PartialEq)]
pub struct MeromorphicGerm<T> {
    pub pole_order: usize,
    /// Coefficients of `(z-z0)^{-pole_order}, …, (z-z0)^0`.
    pub coefficients: Vec<Complex<T>>,
    pub expansion_point: Complex<T>,
}

impl<T: Float> MeromorphicGerm<T> {
    /// Germ from its principal part and finite part; `coefficients` must be non-empty.
    pub fn new(expansion_point: Complex<T>, coefficients: Vec<Complex<T>>) -> Self {
        assert!(!coefficients.is_empty(), "a germ needs at least its finite part");
        MeromorphicGerm { pole_order: coefficients.len() - 1, coefficients, expansion_point }
    }

    pub fn holomorphic(expansion_point: Complex<T>, value: Complex<T>) -> Self {
        Self::new(expansion_point, vec![value])
    }

    pub fn finite_part(&self) -> Complex<T> {
        self.coefficients[self.pole_order]
    }

    /// Coefficient of `(z - z0)^{-1}`.
    pub fn residue(&self) -> Complex<T> {
        self.principal(1)
    }

    /// Coefficient of `(z - z0)^{-k}`.
    pub fn principal(&self, k: usize) -> Complex<T> {
        if k > self.pole_order {
            Complex::zero()
        } else {
            self.coefficients[self.pole_order - k]
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.expansion_point != other.expansion_point {
            return Err(RegError::PointMismatch);
        }
        let p = self.pole_order.max(other.pole_order);
        let coefficients = (0..=p)
            .map(|i| self.principal(p - i) + other.principal(p - i))
            .collect();
        Ok(MeromorphicGerm { pole_order: p, coefficients, expansion_point: self.expansion_point })
    }

    pub fn scale(&self, k: Complex<T>) -> Self {
        MeromorphicGerm {
            pole_order: self.pole_order,
            coefficients: self.coefficients.iter().map(|&x| x * k).collect(),
            expansion_point: self.expansion_point,
        }
    }
}

/// `f(ε) ~ Σ c_i ε^{α_i}` as `ε → 0`, with exact rational exponents.
///
/// Logarithmic terms are not representable; inputs that would need them must
/// be rejected upstream (the fit residual exposes them).
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticExpansion {
    terms: Vec<(Rational, Cplx)>,
    decay_certified: bool,
}

impl AsymptoticExpansion {
    /// Uncertified expansion; exponents must be strictly increasing.
    pub fn new(terms: Vec<(Rational, Cplx)>) -> Result<Self> {
        if terms.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(RegError::Unordered);
        }
        Ok(AsymptoticExpansion { terms, decay_certified: false })
    }

    /// Expansion of a heat-type trace over a spectrum bounded below by `gap > 0`,
    /// hence decaying like `e^{-gap/ε}`-type at infinity.
    pub fn with_spectral_gap(terms: Vec<(Rational, Cplx)>, gap: f64) -> Result<Self> {
        Self::new(terms)?.certify(gap)
    }

    pub fn certify(mut self, gap: f64) -> Result<Self> {
        if !(gap > 0.0) {
            return Err(RegError::NoGap(gap));
        }
        self.decay_certified = true;
        Ok(self)
    }

    pub fn terms(&self) -> &[(Rational, Cplx)] {
        &self.terms
    }

    pub fn is_certified(&self) -> bool {
        self.decay_certified
    }

    pub fn coefficient(&self, exponent: Rational) -> Cplx {
        self.terms
            .iter()
            .find(|(e, _)| *e == exponent)
            .map(|t| t.1)
            .unwrap_or_else(Cplx::zero)
    }

    /// Partial sum at `eps`.
    pub fn evaluate(&self, eps: f64) -> Cplx {
        self.terms.iter().map(|(e, c)| c * eps.powf(rat_f64(*e))).sum()
    }

    /// Multiply by `ε^r`.
    pub fn shifted(&self, r: Rational) -> Self {
        AsymptoticExpansion {
            terms: self.terms.iter().map(|(e, c)| (e + r, *c)).collect(),
            decay_certified: self.decay_certified,
        }
    }

    /// Append terms (merging equal exponents), keeping certification.
    pub fn with_terms(&self, extra: &[(Rational, Cplx)]) -> Self {
        let mut all: Vec<(Rational, Cplx)> = self.terms.clone();
        for &(e, c) in extra {
            match all.iter_mut().find(|t| t.0 == e) {
                Some(t) => t.1 += c,
                None => all.push((e, c)),
            }
        }
        all.sort_by(|a, b| a.0.cmp(&b.0));
        AsymptoticExpansion { terms: all, decay_certified: self.decay_certified }
    }
}

pub fn rat_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `fp_{ε=0} f = M(f)(0)`: the coefficient of `ε^0`.
pub fn mellin_finite_part(f: &AsymptoticExpansion) -> Result<Cplx> {
    if !f.decay_certified {
        return Err(RegError::Uncertified);
    }
    Ok(f.coefficient(Rational::zero()))
}

/// `fp_{ε=0} (√ε g)`: the coefficient of `ε^{-1/2}` in `g`.
pub fn sqrt_eps_residue(g: &AsymptoticExpansion) -> Result<Cplx> {
    if !g.decay_certified {
        return Err(RegError::Uncertified);
    }
    Ok(g.coefficient(Rational::new(-1, 2)))
}

/// `{2^{-k}}` for `k = k_min..=k_max`.
pub fn geometric_grid(k_min: i32, k_max: i32) -> Vec<f64> {
    (k_min..=k_max).map(|k| 2f64.powi(-k)).collect()
}

/// Default fit grid, `k = 4..16`.
pub fn default_grid() -> Vec<f64> {
    geometric_grid(4, 16)
}

/// Condition estimate above which a fit is refused.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Uncertified; certification is the caller's structural knowledge.
    pub expansion: AsymptoticExpansion,
    /// RMS residual relative to the largest sample magnitude.
    pub residual: f64,
    /// Change of the `ε^0` coefficient when refitting on every other sample.
    pub half_grid_shift: Option<f64>,
    pub condition: f64,
}

fn least_squares(eps: &[f64], values: &[Cplx], exps: &[f64]) -> Result<(Vec<Cplx>, f64)> {
    let rows = eps.len();
    let cols = exps.len();
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    for (i, &e) in eps.iter().enumerate() {
        for (j, &p) in exps.iter().enumerate() {
            a[(i, j)] = e.powf(p);
        }
    }
    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    for j in 0..cols {
        let n = norms[j];
        a.column_mut(j).iter_mut().for_each(|x| *x /= n);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_CONDITION) {
        return Err(RegError::IllConditioned(cond));
    }
    let re = nalgebra::DVector::from_iterator(rows, values.iter().map(|v| v.re));
    let im = nalgebra::DVector::from_iterator(rows, values.iter().map(|v| v.im));
    let xr = svd.solve(&re, 0.0).expect("svd with u and v_t");
    let xi = svd.solve(&im, 0.0).expect("svd with u and v_t");
    let coef = (0..cols).map(|j| Cplx::new(xr[j], xi[j]) / norms[j]).collect();
    Ok((coef, cond))
}

/// Least-squares fit of `Σ c_i ε^{α_i}` to samples `(ε, f(ε))`.
pub fn fit_expansion(samples: &[(f64, Cplx)], exponents: &[Rational]) -> Result<FitReport> {
    if exponents.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RegError::Unordered);
    }
    let need = 2 * exponents.len();
    if samples.len() < need {
        return Err(RegError::TooFewSamples { need, got: samples.len() });
    }
    let eps: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let vals: Vec<Cplx> = samples.iter().map(|s| s.1).collect();
    let exps: Vec<f64> = exponents.iter().map(|&r| rat_f64(r)).collect();
    let (coef, condition) = least_squares(&eps, &vals, &exps)?;

    let scale = vals.iter().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let sq: f64 = eps
        .iter()
        .zip(&vals)
        .map(|(&e, v)| {
            let model: Cplx = coef.iter().zip(&exps).map(|(c, &p)| c * e.powf(p)).sum();
            (model - v).norm_sqr()
        })
        .sum();
    let residual = (sq / eps.len() as f64).sqrt() / scale;

    let zero_idx = exponents.iter().position(|r| r.is_zero());
    let half_grid_shift = match zero_idx {
        Some(j) if samples.len() / 2 >= exponents.len() => {
            let e2: Vec<f64> = eps.iter().step_by(2).copied().collect();
            let v2: Vec<Cplx> = vals.iter().step_by(2).copied().collect();
            least_squares(&e2, &v2, &exps).ok().map(|(c2, _)| (c2[j] - coef[j]).norm())
        }
        _ => None,
    };
    let expansion = AsymptoticExpansion::new(exponents.iter().copied().zip(coef).collect())?;
    Ok(FitReport { expansion, residual, half_grid_shift, condition })
}

/// Exponent list `{(k - δ)/2 : k = 0..count}`, the small-ε exponents of a
/// heat trace `tr(C e^{-εQ})` with `Q` of order 2 on a 1-dimensional base.
pub fn heat_exponents(delta: i64, count: usize) -> Vec<Rational> {
    (0..count as i64).map(|k| Rational::new(k - delta, 2)).collect()
}

#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrace::graded_forms::{Coef, Coefficient, Form, PolyCoef};
use spectrace::lattice_spec::{DiracFamily, Direction};
use spectrace::{linalg, CMat, Cplx};
use std::collections::BTreeMap;

pub fn c(x: f64) -> Cplx {
    Cplx::new(x, 0.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    CMat::from_fn(n, n, |_, _| Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

pub fn rand_herm(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let a = rand_mat(rng, n);
    (&a + a.adjoint()) * c(0.5)
}

pub fn rand_anti(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let a = rand_mat(rng, n);
    (&a - a.adjoint()) * c(0.5)
}

/// Random element of su(n).
pub fn rand_su(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let x = rand_anti(rng, n);
    let t = linalg::trace(&x) / c(n as f64);
    x - linalg::eye(n) * t
}

pub fn rand_proj(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> CMat {
    let u = linalg::mat_exp(&(rand_anti(rng, n) * c(2.0)));
    let d = CMat::from_diagonal(&DVector::from_fn(n, |i, _| c(if i < rank { 1.0 } else { 0.0 })));
    &u * d * u.adjoint()
}

pub fn pc(exps: &[u8], m: CMat) -> PolyCoef<CMat> {
    PolyCoef::monomial(exps.to_vec(), m)
}

/// Sigma-mode polynomial superconnection: odd `D(b)` quadratic in `b`,
/// `θ_i = i·herm·b_{i+1}²`.
pub fn poly_toy(rng: &mut ChaCha8Rng, p: usize, m: usize, scale: f64) -> Form<PolyCoef<CMat>> {
    let mut f = Form::zero(p);
    let mut d = PolyCoef::constant(p, rand_herm(rng, m));
    for i in 0..p {
        let mut e = vec![0u8; p];
        e[i] = 1;
        d = Coefficient::add(&d, &pc(&e, rand_herm(rng, m)));
    }
    let mut e = vec![0u8; p];
    e[0] = 1;
    e[1 % p] += 1;
    d = Coefficient::add(&d, &pc(&e, rand_herm(rng, m)));
    f.insert(0, Coef::odd(d));
    for i in 0..p {
        let mut e = vec![0u8; p];
        e[(i + 1) % p] = 2;
        f.insert(1 << i, Coef::even(pc(&e, rand_herm(rng, m) * Cplx::new(0.0, scale))));
    }
    f
}

/// Split-graded polynomial superconnection on `C^m ⊕ C^m` with `γ = diag(1,-1)`.
pub fn graded_toy(rng: &mut ChaCha8Rng, p: usize, m: usize, scale: f64) -> (CMat, Form<PolyCoef<CMat>>) {
    let mut gd = vec![c(1.0); m];
    gd.extend(vec![c(-1.0); m]);
    let g = CMat::from_diagonal(&DVector::from_vec(gd));
    let off = |rng: &mut ChaCha8Rng| {
        let mut x = CMat::zeros(2 * m, 2 * m);
        let b = rand_mat(rng, m);
        x.view_mut((0, m), (m, m)).copy_from(&b);
        x.view_mut((m, 0), (m, m)).copy_from(&b.adjoint());
        x
    };
    let mut f = Form::zero(p);
    let mut d = PolyCoef::constant(p, off(rng));
    for i in 0..p {
        let mut e = vec![0u8; p];
        e[i] = 1;
        d = Coefficient::add(&d, &pc(&e, off(rng)));
        e[(i + 1) % p] += 1;
        d = Coefficient::add(&d, &pc(&e, off(rng) * c(0.5)));
    }
    f.insert(0, Coef::odd(d));
    for i in 0..p {
        let mut x = CMat::zeros(2 * m, 2 * m);
        x.view_mut((0, 0), (m, m)).copy_from(&rand_herm(rng, m));
        x.view_mut((m, m), (m, m)).copy_from(&rand_herm(rng, m));
        let mut e = vec![1u8; p];
        e[(i + 1) % p] += 2;
        f.insert(1 << i, Coef::even(pc(&e, x * Cplx::new(0.0, scale))));
    }
    (g, f)
}

/// Random rank-2 circle family with chirality `(1,-1)` and `p` directions.
pub fn rank2_family(rng: &mut ChaCha8Rng, n_cut: usize, p: usize) -> DiracFamily {
    let mut pot = BTreeMap::new();
    pot.insert(0, rand_herm(rng, 2) * c(0.4));
    pot.insert(1, rand_mat(rng, 2) * c(0.25));
    let dirs = (0..p)
        .map(|_| {
            let mut d = BTreeMap::new();
            d.insert(0, rand_herm(rng, 2) * c(0.3));
            d.insert(1, rand_mat(rng, 2) * c(0.15));
            Direction { da: 0.0, potential: d }
        })
        .collect();
    DiracFamily::new(2, rng.gen_range(0.1..0.9), n_cut, pot)
        .unwrap()
        .with_chirality(vec![1.0, -1.0])
        .unwrap()
        .with_directions(dirs)
        .unwrap()
}

/// Midpoint of the spectral gap nearest to `target`.
pub fn gap_near(fam: &DiracFamily, b: &[f64], target: f64) -> f64 {
    let e = fam.eigenvalues(b);
    e.windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .min_by(|x, y| (x - target).abs().partial_cmp(&(y - target).abs()).unwrap())
        .unwrap()
}

/// Observed orders `log2(e_k / e_{k+1})`.
pub fn orders(errs: &[f64]) -> Vec<f64> {
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub fn line(id: u32, title: &str, pass: bool, detail: &str) {
    println!("[{id:02}] {} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
}

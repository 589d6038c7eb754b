//! Independent reference implementations used as test oracles. None of
//! these call into the library's numerical routines.
#![allow(dead_code)]

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    Array2::from_shape_fn((rows, cols), |_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n).map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect()
}

pub fn frob(m: &Array2<Complex64>) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vnorm(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn matmul(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let aik = a[[i, k]];
            for j in 0..b.ncols() {
                out[[i, j]] += aik * b[[k, j]];
            }
        }
    }
    out
}

fn adjoint(a: &Array2<Complex64>) -> Array2<Complex64> {
    Array2::from_shape_fn((a.ncols(), a.nrows()), |(i, j)| a[[j, i]].conj())
}

fn oracle_block_norms(j: &Array2<Complex64>, group: usize) -> Vec<f64> {
    (0..j.nrows() / group)
        .map(|k| {
            let mut s = 0.0;
            for r in k * group..(k + 1) * group {
                for p in 0..j.ncols() {
                    s += j[[r, p]].norm_sqr();
                }
            }
            s.sqrt()
        })
        .collect()
}

pub fn oracle_group_norm(j: &Array2<Complex64>, group: usize) -> f64 {
    oracle_block_norms(j, group).iter().sum()
}

/// Projection onto the group-l1 ball by bisection on the threshold
/// equation `sum_k max(0, b_k - theta) = tau`.
pub fn bisection_projection(j: &Array2<Complex64>, tau: f64, group: usize) -> Array2<Complex64> {
    let norms = oracle_block_norms(j, group);
    if norms.iter().sum::<f64>() <= tau {
        return j.clone();
    }
    let excess = |theta: f64| norms.iter().map(|b| (b - theta).max(0.0)).sum::<f64>() - tau;
    let (mut lo, mut hi) = (0.0, norms.iter().copied().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    let mut out = j.clone();
    for r in 0..j.nrows() {
        let b = norms[r / group];
        let s = if b > theta { (b - theta) / b } else { 0.0 };
        for p in 0..j.ncols() {
            out[[r, p]] *= s;
        }
    }
    out
}

/// Largest singular value squared, by power iteration on `A^H A`.
pub fn spectral_norm_sq(a: &Array2<Complex64>) -> f64 {
    let ah = adjoint(a);
    let mut v = Array2::from_elem((a.ncols(), 1), c(1.0, 0.0));
    let mut lam = 0.0;
    for _ in 0..2000 {
        let w = matmul(&ah, &matmul(a, &v));
        lam = frob(&w) / frob(&v);
        let n = frob(&w);
        v = w.mapv(|x| x / n);
    }
    lam
}

/// Lasso over the group-l1 ball by projected gradient with the fixed
/// step `1/L`. Returns the iterate and `0.5 ||F - A J||^2`.
pub fn fixed_step_lasso(
    a: &Array2<Complex64>,
    f: &Array2<Complex64>,
    tau: f64,
    group: usize,
    iters: usize,
) -> (Array2<Complex64>, f64) {
    let ah = adjoint(a);
    let step = 1.0 / spectral_norm_sq(a);
    let mut x = Array2::zeros((a.ncols(), f.ncols()));
    for _ in 0..iters {
        let r = f - &matmul(a, &x);
        let g = matmul(&ah, &r);
        x = bisection_projection(&(&x + &g.mapv(|v| v * step)), tau, group);
    }
    let r = f - &matmul(a, &x);
    (x, 0.5 * frob(&r).powi(2))
}

fn soft(z: Complex64, t: f64) -> Complex64 {
    let m = z.norm();
    if m <= t {
        c(0.0, 0.0)
    } else {
        z * ((m - t) / m)
    }
}

/// Coordinate descent with scalar soft thresholding on
/// `0.5 ||b - A x||^2 + lambda ||x||_1`, warm started from `x`.
fn lagrangian_cd(a: &Array2<Complex64>, b: &[Complex64], lambda: f64, x: &mut [Complex64]) {
    let (m, n) = a.dim();
    let col_sq: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[[i, j]].norm_sqr()).sum()).collect();
    let mut r: Vec<Complex64> = (0..m)
        .map(|i| b[i] - (0..n).map(|j| a[[i, j]] * x[j]).sum::<Complex64>())
        .collect();
    for _ in 0..200_000 {
        let mut change: f64 = 0.0;
        for j in 0..n {
            let corr: Complex64 = (0..m).map(|i| a[[i, j]].conj() * r[i]).sum();
            let z = x[j] + corr / col_sq[j];
            let new = soft(z, lambda / col_sq[j]);
            let d = new - x[j];
            if d != c(0.0, 0.0) {
                for i in 0..m {
                    r[i] -= a[[i, j]] * d;
                }
                change = change.max(d.norm());
                x[j] = new;
            }
        }
        if change < 1e-15 {
            break;
        }
    }
}

/// Scalar BPDN `min ||x||_1 s.t. ||b - A x|| <= sigma` via bisection on the
/// Lagrange multiplier. Returns the minimizer.
pub fn soft_threshold_bpdn(a: &Array2<Complex64>, b: &[Complex64], sigma: f64) -> Vec<Complex64> {
    let (m, n) = a.dim();
    let resid = |x: &[Complex64]| -> f64 {
        (0..m)
            .map(|i| (b[i] - (0..n).map(|j| a[[i, j]] * x[j]).sum::<Complex64>()).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    let lam_max = (0..n)
        .map(|j| (0..m).map(|i| a[[i, j]].conj() * b[i]).sum::<Complex64>().norm())
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, lam_max);
    let mut x = vec![c(0.0, 0.0); n];
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        lagrangian_cd(a, b, mid, &mut x);
        if resid(&x) > sigma {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lagrangian_cd(a, b, 0.5 * (lo + hi), &mut x);
    x
}

/// Central finite-difference gradient of a real function of a complex
/// vector, in the convention `g = df/dRe + i df/dIm`.
pub fn fd_gradient(f: impl Fn(&[Complex64]) -> f64, x: &[Complex64], h: f64) -> Vec<Complex64> {
    let mut g = Vec::with_capacity(x.len());
    let mut y = x.to_vec();
    for i in 0..x.len() {
        let x0 = y[i];
        y[i] = x0 + c(h, 0.0);
        let fp = f(&y);
        y[i] = x0 - c(h, 0.0);
        let fm = f(&y);
        let dre = (fp - fm) / (2.0 * h);
        y[i] = x0 + c(0.0, h);
        let fp = f(&y);
        y[i] = x0 - c(0.0, h);
        let fm = f(&y);
        let dim = (fp - fm) / (2.0 * h);
        y[i] = x0;
        g.push(c(dre, dim));
    }
    g
}

//! BiCGSTAB for non-Hermitian complex systems.
//!
//! The solver starts from a zero initial guess and runs serially, so
//! identical inputs give bitwise identical iterates.

use num_complex::Complex64;

use crate::error::{BestIterate, CsiError, Result};

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[Complex64], y: &mut [Complex64]);
}

impl LinearOperator for crate::sparse::CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        self.matvec(x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual `||b - A x|| / ||b||` of the returned iterate.
    pub residual: f64,
}

pub(crate) fn dotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Unconjugated bilinear pairing `sum a_i b_i`.
pub fn dotu(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn true_residual(op: &dyn LinearOperator, x: &[Complex64], b: &[Complex64], r: &mut [Complex64]) {
    op.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

struct State {
    r: Vec<Complex64>,
    r_hat: Vec<Complex64>,
    p: Vec<Complex64>,
    v: Vec<Complex64>,
    rho: Complex64,
    alpha: Complex64,
    omega: Complex64,
}

impl State {
    fn new(r: Vec<Complex64>) -> Self {
        let n = r.len();
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        State {
            r_hat: r.clone(),
            r,
            p: vec![zero; n],
            v: vec![zero; n],
            rho: one,
            alpha: one,
            omega: one,
        }
    }

    /// Restarts the recurrences from the true residual of `x`.
    fn restart(&mut self, op: &dyn LinearOperator, x: &[Complex64], b: &[Complex64]) {
        true_residual(op, x, b, &mut self.r);
        let r = std::mem::take(&mut self.r);
        *self = State::new(r);
    }
}

/// Solves `op x = b` to `||b - op x|| <= tol ||b||`.
///
/// Convergence claimed by the recurrence is always confirmed against the
/// true residual; on mismatch the recurrences restart from the current
/// iterate. On failure the error carries the best iterate seen.
pub fn bicgstab(
    op: &dyn LinearOperator,
    b: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Complex64>, SolveStats)> {
    let n = op.dim();
    assert_eq!(b.len(), n);
    let zero = Complex64::new(0.0, 0.0);
    let bnorm = norm(b);
    let mut x = vec![zero; n];
    if bnorm == 0.0 {
        return Ok((x, SolveStats { iterations: 0, residual: 0.0 }));
    }
    let mut st = State::new(b.to_vec());
    let mut s = vec![zero; n];
    let mut t = vec![zero; n];
    let mut check = vec![zero; n];
    let mut best = x.clone();
    let mut best_res = 1.0;
    let mut it = 0;

    while it < max_iter {
        it += 1;
        let rho_new = dotc(&st.r_hat, &st.r);
        if rho_new.norm() < 1e-300 || st.omega.norm() < 1e-300 {
            st.restart(op, &x, b);
            continue;
        }
        let beta = (rho_new / st.rho) * (st.alpha / st.omega);
        st.rho = rho_new;
        for i in 0..n {
            st.p[i] = st.r[i] + beta * (st.p[i] - st.omega * st.v[i]);
        }
        op.apply(&st.p, &mut st.v);
        let denom = dotc(&st.r_hat, &st.v);
        if denom.norm() < 1e-300 {
            st.restart(op, &x, b);
            continue;
        }
        st.alpha = st.rho / denom;
        for i in 0..n {
            s[i] = st.r[i] - st.alpha * st.v[i];
        }
        let half_step_done = norm(&s) / bnorm <= tol;
        if half_step_done {
            for i in 0..n {
                x[i] += st.alpha * st.p[i];
            }
        } else {
            op.apply(&s, &mut t);
            let tt = dotc(&t, &t).re;
            st.omega = if tt > 0.0 { dotc(&t, &s) / tt } else { zero };
            for i in 0..n {
                x[i] += st.alpha * st.p[i] + st.omega * s[i];
                st.r[i] = s[i] - st.omega * t[i];
            }
        }
        let rnorm = if half_step_done { 0.0 } else { norm(&st.r) / bnorm };
        if rnorm <= tol {
            true_residual(op, &x, b, &mut check);
            let res = norm(&check) / bnorm;
            if res <= tol {
                return Ok((x, SolveStats { iterations: it, residual: res }));
            }
            if res < best_res {
                best_res = res;
                best.copy_from_slice(&x);
            }
            st.restart(op, &x, b);
        } else if rnorm < best_res {
            best_res = rnorm;
            best.copy_from_slice(&x);
        }
    }
    true_residual(op, &best, b, &mut check);
    let res = norm(&check) / bnorm;
    Err(CsiError::NotConverged {
        iterations: it,
        residual: res,
        best: BestIterate(best),
    })
}

//! Contrast recovery from estimated contrast sources.
//!
//! With the total fields fixed, the contrast `chi` enters linearly both in
//! the data equation `f_p = Phi (e_p * chi)` and in the state equation
//! `j_p = e_p * chi`. The cost
//!
//! ```text
//! C(chi) = ||f - Psi chi||^2 / ||f||^2 + ||j - D_tot chi||^2 / ||D_inc chi||^2
//! ```
//!
//! (stacked over sources) is minimized by Polak-Ribiere conjugate gradients
//! with a Brent line search and projection onto the physical range after
//! each update. Gradients are taken with respect to `Re chi + i Im chi`,
//! so `dC = Re <g, d chi>`.

use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64;

use crate::error::{CsiError, Result};
use crate::fdfd::{FieldVector, SolverOptions, StiffnessMatrix};
use crate::mmv::ContrastSourceMatrix;
use crate::scattering::InversionDomain;

type C64 = Complex64;

/// Per-component complex contrast over the inversion domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastVector {
    pub values: Vec<C64>,
}

impl ContrastVector {
    pub fn zeros(num_unknowns: usize) -> Self {
        ContrastVector {
            values: vec![C64::new(0.0, 0.0); num_unknowns],
        }
    }

    /// The values as a one-column matrix, for the binary matrix format.
    pub fn as_column(&self) -> Array2<C64> {
        Array2::from_shape_vec((self.values.len(), 1), self.values.clone()).expect("column shape")
    }

    pub fn num_cells(&self) -> usize {
        self.values.len() / 3
    }

    /// Mean of the three components of each cell.
    pub fn isotropic(&self) -> Vec<C64> {
        self.values.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
    }
}

/// Total and incident fields over the inversion domain, one column per
/// source.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalFieldSet {
    pub total: Array2<C64>,
    pub incident: Array2<C64>,
}

impl TotalFieldSet {
    pub fn new(total: Array2<C64>, incident: Array2<C64>) -> Result<Self> {
        if total.dim() != incident.dim() {
            return Err(CsiError::DimensionMismatch("total and incident field shapes differ".into()));
        }
        Ok(TotalFieldSet { total, incident })
    }

    pub fn num_sources(&self) -> usize {
        self.total.ncols()
    }
}

/// Scattered fields radiated by the estimated sources, added to the
/// incident fields. One forward solve per source, in parallel.
pub fn compute_total_fields(
    a_bg: &StiffnessMatrix,
    domain: &InversionDomain,
    j_hat: &ContrastSourceMatrix,
    incident: &[FieldVector],
    opts: &SolverOptions,
) -> Result<TotalFieldSet> {
    if incident.len() != j_hat.num_sources() {
        return Err(CsiError::DimensionMismatch(format!(
            "{} incident fields for {} sources",
            incident.len(),
            j_hat.num_sources()
        )));
    }
    if j_hat.data.nrows() != domain.num_unknowns() {
        return Err(CsiError::DimensionMismatch("contrast sources do not match the domain".into()));
    }
    let k2 = a_bg.source_scale();
    let rhs: Vec<Vec<C64>> = (0..incident.len())
        .map(|p| domain.embed(&j_hat.column(p)).into_iter().map(|v| v * k2).collect())
        .collect();
    let refs: Vec<&[C64]> = rhs.iter().map(|b| b.as_slice()).collect();
    let columns: Vec<(Vec<C64>, Vec<C64>)> = a_bg
        .solve_many(&refs, opts)?
        .into_iter()
        .enumerate()
        .map(|(p, res)| {
            let (sct, _) = res.map_err(|e| CsiError::SourceSolve {
                index: p,
                source: Box::new(e),
            })?;
            let total: Vec<C64> = incident[p].data.iter().zip(&sct).map(|(i, s)| i + s).collect();
            Ok((domain.restrict(&total), domain.restrict(&incident[p].data)))
        })
        .collect::<Result<_>>()?;
    let n = domain.num_unknowns();
    let mut total = Array2::zeros((n, columns.len()));
    let mut inc = Array2::zeros((n, columns.len()));
    for (p, (t, i)) in columns.into_iter().enumerate() {
        total.column_mut(p).assign(&Array1::from(t));
        inc.column_mut(p).assign(&Array1::from(i));
    }
    TotalFieldSet::new(total, inc)
}

/// Relative threshold below which a component's total field counts as zero.
const ZERO_FIELD: f64 = 1e-14;

/// Least-squares solution of the state equations, per component. Also
/// returns the indices of components left at zero for lack of field.
pub fn init_contrast(j_hat: &ContrastSourceMatrix, totals: &TotalFieldSet) -> (ContrastVector, Vec<usize>) {
    let e = &totals.total;
    let peak = e.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    let mut flagged = Vec::new();
    let values = (0..e.nrows())
        .map(|i| {
            let num: C64 = (0..e.ncols()).map(|p| e[[i, p]].conj() * j_hat.data[[i, p]]).sum();
            let den: f64 = (0..e.ncols()).map(|p| e[[i, p]].norm_sqr()).sum();
            if den <= ZERO_FIELD * peak || den == 0.0 {
                flagged.push(i);
                C64::new(0.0, 0.0)
            } else {
                num / den
            }
        })
        .collect();
    (ContrastVector { values }, flagged)
}

/// Data, state and total cost of a contrast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerms {
    pub total: f64,
    pub data: f64,
    pub state: f64,
}

/// Everything the contrast cost depends on besides the contrast itself.
#[derive(Clone, Debug)]
pub struct ContrastProblem {
    /// Scattering matrix, `M x 3N_D`.
    pub phi: Array2<C64>,
    phi_h: Array2<C64>,
    /// Measured data, `M x P`.
    pub f: Array2<C64>,
    pub j_hat: ContrastSourceMatrix,
    pub totals: TotalFieldSet,
    /// Background relative permittivity per domain unknown.
    pub eps_b: Vec<C64>,
    f_norm_sq: f64,
}

impl ContrastProblem {
    pub fn new(
        phi: Array2<C64>,
        f: Array2<C64>,
        j_hat: ContrastSourceMatrix,
        totals: TotalFieldSet,
        eps_b: Vec<C64>,
    ) -> Result<Self> {
        let n = phi.ncols();
        let p = f.ncols();
        let ok = f.nrows() == phi.nrows()
            && j_hat.data.dim() == (n, p)
            && totals.total.dim() == (n, p)
            && eps_b.len() == n;
        if !ok {
            return Err(CsiError::DimensionMismatch("inconsistent contrast problem".into()));
        }
        let f_norm_sq = f.iter().map(|v| v.norm_sqr()).sum();
        Ok(ContrastProblem {
            phi_h: phi.t().mapv(|v| v.conj()),
            phi,
            f,
            j_hat,
            totals,
            eps_b,
            f_norm_sq,
        })
    }

    pub fn num_unknowns(&self) -> usize {
        self.phi.ncols()
    }

    /// `Psi chi`: column `p` is `Phi (e_p * chi)`.
    fn psi(&self, chi: &[C64]) -> Array2<C64> {
        let chi = ndarray::ArrayView1::from(chi);
        let w = &self.totals.total * &chi.insert_axis(Axis(1));
        self.phi.dot(&w)
    }

    fn state_residual(&self, chi: &[C64]) -> Array2<C64> {
        let chi = ndarray::ArrayView1::from(chi);
        &self.j_hat.data - &(&self.totals.total * &chi.insert_axis(Axis(1)))
    }

    /// `||D_inc chi||^2` stacked over sources.
    pub fn state_normalization(&self, chi: &[C64]) -> f64 {
        let e = &self.totals.incident;
        let mut s = 0.0;
        for i in 0..e.nrows() {
            let c2 = chi[i].norm_sqr();
            if c2 > 0.0 {
                s += c2 * e.row(i).iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        s
    }

    fn data_term(&self, chi: &[C64]) -> f64 {
        let r = &self.f - &self.psi(chi);
        r.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.f_norm_sq
    }

    fn state_numerator(&self, chi: &[C64]) -> f64 {
        self.state_residual(chi).iter().map(|v| v.norm_sqr()).sum()
    }

    /// Cost with the state normalization evaluated at `chi` itself.
    pub fn cost(&self, chi: &[C64]) -> CostTerms {
        let data = self.data_term(chi);
        let den = self.state_normalization(chi);
        let state = if den > 0.0 {
            self.state_numerator(chi) / den
        } else {
            f64::INFINITY
        };
        CostTerms {
            total: data + state,
            data,
            state,
        }
    }

    /// Cost with the state normalization frozen at `den`.
    pub fn frozen_cost(&self, chi: &[C64], den: f64) -> f64 {
        self.data_term(chi) + self.state_numerator(chi) / den
    }

    /// Gradient of the cost with the state normalization frozen at `chi`.
    pub fn gradient(&self, chi: &[C64]) -> Result<Vec<C64>> {
        let den = self.state_normalization(chi);
        if den <= 0.0 {
            return Err(CsiError::InvalidArgument("contrast vanishes where the incident field is nonzero".into()));
        }
        Ok(self.frozen_gradient(chi, den))
    }

    fn frozen_gradient(&self, chi: &[C64], den: f64) -> Vec<C64> {
        let e = &self.totals.total;
        let r_data = &self.f - &self.psi(chi);
        let back = self.phi_h.dot(&r_data);
        let r_state = self.state_residual(chi);
        let wd = -2.0 / self.f_norm_sq;
        let ws = -2.0 / den;
        (0..chi.len())
            .map(|i| {
                let mut g = C64::new(0.0, 0.0);
                for p in 0..e.ncols() {
                    let ec = e[[i, p]].conj();
                    g += ec * (back[[i, p]] * wd + r_state[[i, p]] * ws);
                }
                g
            })
            .collect()
    }

    /// Minimizer along `nu` of the cost with frozen state normalization.
    fn quadratic_step(&self, g: &[C64], nu: &[C64], den: f64) -> Option<f64> {
        let slope: f64 = g.iter().zip(nu).map(|(a, b)| (a.conj() * b).re).sum();
        let psi_nu = self.psi(nu);
        let e = &self.totals.total;
        let mut d_nu = 0.0;
        for i in 0..nu.len() {
            let n2 = nu[i].norm_sqr();
            if n2 > 0.0 {
                d_nu += n2 * e.row(i).iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        let curv = 2.0 * (psi_nu.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.f_norm_sq + d_nu / den);
        (curv > 0.0 && slope != 0.0).then(|| -slope / curv)
    }
}

/// Polak-Ribiere direction `g_n + beta nu_{n-1}` with
/// `beta = Re <g_n, g_n - g_{n-1}> / ||g_{n-1}||^2`. Without a previous
/// gradient (or when it vanishes) the direction restarts at `g_n`.
pub fn pr_direction(g: &[C64], g_prev: Option<&[C64]>, nu_prev: Option<&[C64]>) -> Vec<C64> {
    let (Some(gp), Some(np)) = (g_prev, nu_prev) else {
        return g.to_vec();
    };
    let gp2: f64 = gp.iter().map(|v| v.norm_sqr()).sum();
    if gp2 == 0.0 {
        return g.to_vec();
    }
    let num: f64 = g.iter().zip(gp).map(|(a, b)| (a.conj() * (a - b)).re).sum();
    let beta = num / gp2;
    g.iter().zip(np).map(|(a, n)| a + n * beta).collect()
}

/// A bracketing triple `a < b < c` (or reversed) with `f(b) <= f(a), f(c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fa: f64,
    pub fb: f64,
    pub fc: f64,
}

const GOLD: f64 = 1.618_033_988_749_895;

/// Brackets a minimum of `f` by geometric expansion from the pair `(a, b)`.
pub fn bracket_minimum(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, max_expansions: usize) -> Option<Bracket> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if !fa.is_finite() && !fb.is_finite() {
        return None;
    }
    if !(fb <= fa) {
        let m = a - (b - a);
        let fm = f(m);
        if fm >= fa {
            return Some(Bracket {
                a: m,
                b: a,
                c: b,
                fa: fm,
                fb: fa,
                fc: fb,
            });
        }
        (b, fb) = (m, fm);
    }
    let mut c = b + GOLD * (b - a);
    let mut fc = f(c);
    for _ in 0..max_expansions {
        if fc >= fb {
            return Some(Bracket { a, b, c, fa, fb, fc });
        }
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        c = b + GOLD * (b - a);
        fc = f(c);
    }
    None
}

/// Brent's method on a bracket, to relative tolerance `tol` in the
/// abscissa. Returns the best point found.
pub fn brent_minimize(f: &mut impl FnMut(f64) -> f64, br: &Bracket, tol: f64, max_iter: usize) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    const ZEPS: f64 = 1e-20;
    let (mut lo, mut hi) = if br.a < br.c { (br.a, br.c) } else { (br.c, br.a) };
    let (mut x, mut w, mut v) = (br.b, br.b, br.b);
    let (mut fx, mut fw, mut fv) = (br.fb, br.fb, br.fb);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol * x.abs() + ZEPS;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (lo - x) && p < q * (hi - x) {
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { lo - x } else { hi - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Outcome of a line search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearch {
    pub alpha: f64,
    pub value: f64,
    pub value_at_zero: f64,
    /// The bracket could not be formed and a safeguarded step was used.
    pub fallback: bool,
}

pub const BRENT_TOL: f64 = 1e-6;

/// Minimizes `phi(alpha)` starting from the trial step `alpha0`.
/// The result never has a larger value than `phi(0)`.
pub fn brent_step(mut phi: impl FnMut(f64) -> f64, alpha0: f64) -> LineSearch {
    let f0 = phi(0.0);
    let alpha0 = if alpha0 != 0.0 && alpha0.is_finite() { alpha0 } else { 1.0 };
    if let Some(br) = bracket_minimum(&mut phi, 0.0, alpha0, 60) {
        let (alpha, value) = brent_minimize(&mut phi, &br, BRENT_TOL, 200);
        if value <= f0 {
            return LineSearch {
                alpha,
                value,
                value_at_zero: f0,
                fallback: false,
            };
        }
    }
    let mut step = alpha0;
    for _ in 0..60 {
        for s in [step, -step] {
            let v = phi(s);
            if v < f0 {
                return LineSearch {
                    alpha: s,
                    value: v,
                    value_at_zero: f0,
                    fallback: true,
                };
            }
        }
        step *= 0.5;
    }
    LineSearch {
        alpha: 0.0,
        value: f0,
        value_at_zero: f0,
        fallback: true,
    }
}

/// Clamps `Re chi >= 1 - Re eps_b` and `Im chi <= -Im eps_b`. Returns the
/// number of clamped values.
pub fn project_range(chi: &mut [C64], eps_b: &[C64]) -> usize {
    let mut clamped = 0;
    for (x, e) in chi.iter_mut().zip(eps_b) {
        let lo = 1.0 - e.re;
        let hi = -e.im;
        if x.re < lo {
            x.re = lo;
            clamped += 1;
        }
        if x.im > hi {
            x.im = hi;
            clamped += 1;
        }
    }
    clamped
}

/// True when every component satisfies the range constraints exactly.
pub fn in_range(chi: &[C64], eps_b: &[C64]) -> bool {
    chi.iter().zip(eps_b).all(|(x, e)| x.re >= 1.0 - e.re && x.im <= -e.im)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastOptions {
    pub iterations: usize,
    /// Early exit when the relative cost change falls below this.
    pub rel_tol: f64,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        ContrastOptions {
            iterations: 20,
            rel_tol: 1e-6,
        }
    }
}

/// One row of the error history. Row 0 describes the initial guess.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionRecord {
    pub iter: usize,
    pub data_error: f64,
    pub state_error: f64,
    pub total: f64,
    pub alpha: f64,
    /// Line-search cost at zero step and at the chosen step.
    pub line_zero: f64,
    pub line_min: f64,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionHistory {
    pub records: Vec<InversionRecord>,
    /// Components left at zero by the initialization for lack of field.
    pub zero_field: Vec<usize>,
}

impl InversionHistory {
    /// Writes `iter,data_error,state_error` rows.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| vec![r.iter.to_string(), format!("{:e}", r.data_error), format!("{:e}", r.state_error)])
            .collect();
        crate::io::write_csv(path, &["iter", "data_error", "state_error"], &rows)
    }
}

fn record(iter: usize, c: CostTerms) -> InversionRecord {
    InversionRecord {
        iter,
        data_error: c.data,
        state_error: c.state,
        total: c.total,
        alpha: 0.0,
        line_zero: c.total,
        line_min: c.total,
        clamped: 0,
    }
}

/// Initializes by least squares, then runs projected Polak-Ribiere
/// conjugate gradients.
pub fn invert_contrast(problem: &ContrastProblem, opts: &ContrastOptions) -> Result<(ContrastVector, InversionHistory)> {
    let (mut chi, zero_field) = init_contrast(&problem.j_hat, &problem.totals);
    project_range(&mut chi.values, &problem.eps_b);
    let mut cost = problem.cost(&chi.values);
    let mut history = InversionHistory {
        records: vec![record(0, cost)],
        zero_field,
    };
    if !cost.total.is_finite() {
        return Ok((chi, history));
    }
    let mut g_prev: Option<Vec<C64>> = None;
    let mut nu_prev: Option<Vec<C64>> = None;
    for iter in 1..=opts.iterations {
        let den = problem.state_normalization(&chi.values);
        let g = problem.frozen_gradient(&chi.values, den);
        let nu = pr_direction(&g, g_prev.as_deref(), nu_prev.as_deref());
        let alpha0 = problem.quadratic_step(&g, &nu, den).unwrap_or(0.0);
        let base = chi.values.clone();
        let ls = brent_step(
            |a| {
                let trial: Vec<C64> = base.iter().zip(&nu).map(|(x, n)| x + n * a).collect();
                problem.cost(&trial).total
            },
            alpha0,
        );
        for (x, n) in chi.values.iter_mut().zip(&nu) {
            *x += n * ls.alpha;
        }
        let clamped = project_range(&mut chi.values, &problem.eps_b);
        let new_cost = problem.cost(&chi.values);
        history.records.push(InversionRecord {
            alpha: ls.alpha,
            line_zero: ls.value_at_zero,
            line_min: ls.value,
            clamped,
            ..record(iter, new_cost)
        });
        let change = (cost.total - new_cost.total).abs() / cost.total.max(f64::MIN_POSITIVE);
        cost = new_cost;
        g_prev = Some(g);
        nu_prev = Some(nu);
        if change < opts.rel_tol || !cost.total.is_finite() {
            break;
        }
    }
    Ok((chi, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let ls = brent_step(|a| (a - 2.0).powi(2), 0.5);
        assert!((ls.alpha - 2.0).abs() <= 1e-8, "{}", ls.alpha);
        assert!(ls.value <= ls.value_at_zero);
    }

    #[test]
    fn minimum_behind_start() {
        let ls = brent_step(|a| (a + 3.0).powi(2) + 1.0, 1.0);
        assert!((ls.alpha + 3.0).abs() <= 1e-6 * 3.0);
    }

    #[test]
    fn rational_minimum() {
        // (a^2 - 2a + 2) / (a^2 + 1) has its minimum at the golden ratio.
        let ls = brent_step(|a| (a * a - 2.0 * a + 2.0) / (a * a + 1.0), 0.3);
        assert!((ls.alpha - GOLD).abs() <= 1e-6 * GOLD, "{}", ls.alpha);
    }

    #[test]
    fn flat_function_keeps_zero_step() {
        let ls = brent_step(|_| 1.0, 1.0);
        assert_eq!(ls.value, 1.0);
    }

    #[test]
    fn pr_examples() {
        let g = vec![C64::new(1.0, 2.0), C64::new(-1.0, 0.5)];
        assert_eq!(pr_direction(&g, None, None), g);
        let nu = vec![C64::new(3.0, 0.0), C64::new(0.0, 1.0)];
        assert_eq!(pr_direction(&g, Some(&g), Some(&nu)), g);
    }

    #[test]
    fn range_projection() {
        let vac = vec![C64::new(1.0, 0.0); 3];
        let mut chi = vec![C64::new(-0.5, 0.2), C64::new(0.3, -0.1), C64::new(0.0, 0.0)];
        assert_eq!(project_range(&mut chi, &vac), 2);
        assert_eq!(chi[0], C64::new(0.0, 0.0));
        assert_eq!(chi[1], C64::new(0.3, -0.1));
        let soil = vec![C64::new(3.0, -0.1); 1];
        let mut chi = vec![C64::new(-2.5, 0.5)];
        project_range(&mut chi, &soil);
        assert_eq!(chi[0], C64::new(-2.0, 0.1));
        let before = chi.clone();
        assert_eq!(project_range(&mut chi, &soil), 0);
        assert_eq!(chi, before);
    }

    #[test]
    fn isotropic_mean() {
        let chi = ContrastVector {
            values: vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0), C64::new(3.0, 3.0)],
        };
        assert_eq!(chi.isotropic(), vec![C64::new(2.0, 1.0)]);
    }
}

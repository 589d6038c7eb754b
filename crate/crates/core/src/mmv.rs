//! Group-sparse estimation of the contrast sources.
//!
//! Solves the sum-of-norms basis pursuit denoising problem
//!
//! ```text
//! minimize  sum_k ||J_k||_F   subject to  ||F - Phi J||_F <= sigma
//! ```
//!
//! where `J_k` is the block of rows of group `k` across all sources. The
//! solver walks the Pareto curve: each stage solves a Lasso subproblem
//! (residual minimized over the ball `sum_k ||J_k|| <= tau`) by spectral
//! projected gradient, then moves `tau` by a Newton step toward the target
//! residual. With cross-validation, the target is a decreasing schedule and
//! the returned iterate is the one with the smallest held-out residual.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{CsiError, Result};
use crate::scattering::CvSplit;

/// Field components per cell; the default group size.
pub const COMPONENTS: usize = 3;

/// Complex `3N x P` matrix of contrast sources, one column per source.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastSourceMatrix {
    pub data: Array2<Complex64>,
    group_size: usize,
}

impl ContrastSourceMatrix {
    /// Groups of three consecutive rows (one cell).
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        Self::with_group_size(data, COMPONENTS)
    }

    pub fn with_group_size(data: Array2<Complex64>, group_size: usize) -> Result<Self> {
        if group_size == 0 || data.nrows() % group_size != 0 {
            return Err(CsiError::DimensionMismatch(format!(
                "{} rows do not split into groups of {group_size}",
                data.nrows()
            )));
        }
        Ok(ContrastSourceMatrix { data, group_size })
    }

    pub fn zeros(rows: usize, sources: usize, group_size: usize) -> Result<Self> {
        Self::with_group_size(Array2::zeros((rows, sources)), group_size)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.data.nrows() / self.group_size
    }

    pub fn num_sources(&self) -> usize {
        self.data.ncols()
    }

    /// Frobenius norm of each group block.
    pub fn block_norms(&self) -> Vec<f64> {
        block_norms(&self.data, self.group_size)
    }

    /// Column `p` as a vector.
    pub fn column(&self, p: usize) -> Vec<Complex64> {
        self.data.column(p).to_vec()
    }
}

fn block_norms(m: &Array2<Complex64>, group: usize) -> Vec<f64> {
    let ng = m.nrows() / group;
    let mut out = vec![0.0; ng];
    for (i, row) in m.rows().into_iter().enumerate() {
        out[i / group] += row.iter().map(|v| v.norm_sqr()).sum::<f64>();
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Sum over groups of the block Frobenius norms.
pub fn group_norm(j: &ContrastSourceMatrix) -> f64 {
    j.block_norms().iter().sum()
}

/// Dual of the group norm: the largest block norm.
pub fn group_dual_norm(m: &Array2<Complex64>, group: usize) -> f64 {
    block_norms(m, group).into_iter().fold(0.0, f64::max)
}

fn frob(m: &Array2<Complex64>) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Real part of the Frobenius inner product `<a, b>`.
fn inner_re(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x.conj() * y).re)
}

/// Residual matrix `F - Phi J`.
pub fn residual_matrix(j: &ContrastSourceMatrix, phi: &Array2<Complex64>, f: &Array2<Complex64>) -> Array2<Complex64> {
    f - &phi.dot(&j.data)
}

/// `(sum_p ||f_p - Phi j_p||^2)^(1/2)` over the reconstruction block.
pub fn residual(j: &ContrastSourceMatrix, phi_r: &Array2<Complex64>, f_r: &Array2<Complex64>) -> f64 {
    frob(&residual_matrix(j, phi_r, f_r))
}

/// Same as [`residual`] over the cross-validation block.
pub fn cv_residual(j: &ContrastSourceMatrix, phi_cv: &Array2<Complex64>, f_cv: &Array2<Complex64>) -> f64 {
    residual(j, phi_cv, f_cv)
}

/// Soft threshold `theta` for which shrinking the block norms removes
/// exactly the excess over `tau`.
fn projection_threshold(norms: &[f64], tau: f64) -> f64 {
    let mut sorted: Vec<f64> = norms.iter().copied().filter(|&b| b > 0.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &b) in sorted.iter().enumerate() {
        cumsum += b;
        let t = (cumsum - tau) / (k + 1) as f64;
        if t < b {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Euclidean projection onto `{J : group_norm(J) <= tau}`.
pub fn project_group_l1(j: &ContrastSourceMatrix, tau: f64) -> ContrastSourceMatrix {
    let group = j.group_size;
    let norms = j.block_norms();
    if norms.iter().sum::<f64>() <= tau {
        return j.clone();
    }
    let mut out = j.clone();
    if tau <= 0.0 {
        out.data.fill(Complex64::new(0.0, 0.0));
        return out;
    }
    let theta = projection_threshold(&norms, tau);
    for (i, mut row) in out.data.rows_mut().into_iter().enumerate() {
        let b = norms[i / group];
        let scale = if b > theta { 1.0 - theta / b } else { 0.0 };
        row.mapv_inplace(|v| v * scale);
    }
    out
}

/// Solver constants. Defaults follow the design notes in the README.
#[derive(Clone, Debug, PartialEq)]
pub struct MmvOptions {
    pub max_iter: usize,
    /// Iterations without a new CV minimum before stopping.
    pub patience: usize,
    /// Inner Lasso tolerance on the relative change of the residual and on
    /// the duality gap.
    pub inner_tol: f64,
    /// Relative tolerance for reaching the residual target.
    pub root_tol: f64,
    /// Factor applied to the residual target when a stage reaches it.
    pub sigma_decay: f64,
    pub ls_memory: usize,
    pub ls_armijo: f64,
    pub max_backtracks: usize,
    pub step_min: f64,
    pub step_max: f64,
}

impl Default for MmvOptions {
    fn default() -> Self {
        MmvOptions {
            max_iter: 1000,
            patience: 20,
            inner_tol: 1e-4,
            root_tol: 1e-2,
            sigma_decay: 0.5,
            ls_memory: 3,
            ls_armijo: 1e-4,
            max_backtracks: 10,
            step_min: 1e-10,
            step_max: 1e10,
        }
    }
}

/// Dense operator with its conjugate transpose precomputed.
#[derive(Clone, Debug)]
struct DenseOp {
    a: Array2<Complex64>,
    ah: Array2<Complex64>,
}

impl DenseOp {
    fn new(a: &Array2<Complex64>) -> Self {
        DenseOp {
            ah: a.t().mapv(|v| v.conj()),
            a: a.clone(),
        }
    }
}

/// State carried between spectral projected-gradient steps.
#[derive(Clone, Debug)]
pub struct SpgState {
    /// Barzilai-Borwein step length.
    pub step: f64,
    /// Residual `F - Phi J` at the current iterate.
    pub r: Array2<Complex64>,
    /// Gradient `-Phi^H r` of the half squared residual.
    pub grad: Array2<Complex64>,
    history: VecDeque<f64>,
    /// Number of steps that exhausted the backtracking budget.
    pub fallbacks: usize,
}

impl SpgState {
    /// Initializes at `j` with a Cauchy step along the gradient.
    pub fn new(j: &ContrastSourceMatrix, phi: &Array2<Complex64>, f: &Array2<Complex64>, opts: &MmvOptions) -> Self {
        Self::with_op(j, &DenseOp::new(phi), f, opts)
    }

    fn with_op(j: &ContrastSourceMatrix, op: &DenseOp, f: &Array2<Complex64>, opts: &MmvOptions) -> Self {
        let r = f - &op.a.dot(&j.data);
        let grad = -op.ah.dot(&r);
        let gg = frob(&grad).powi(2);
        let ag = frob(&op.a.dot(&grad)).powi(2);
        let step = if gg > 0.0 && ag > 0.0 { gg / ag } else { 1.0 };
        let fval = 0.5 * frob(&r).powi(2);
        SpgState {
            step: step.clamp(opts.step_min, opts.step_max),
            r,
            grad,
            history: VecDeque::from([fval]),
            fallbacks: 0,
        }
    }

    fn objective(&self) -> f64 {
        0.5 * frob(&self.r).powi(2)
    }
}

/// One spectral projected-gradient step on the Lasso with radius `tau`.
/// Returns the new iterate and its residual norm.
pub fn spg_lasso_step(
    j: &ContrastSourceMatrix,
    phi_r: &Array2<Complex64>,
    f_r: &Array2<Complex64>,
    tau: f64,
    state: &mut SpgState,
    opts: &MmvOptions,
) -> (ContrastSourceMatrix, f64) {
    spg_step(j, &DenseOp::new(phi_r), f_r, tau, state, opts)
}

fn spg_step(
    j: &ContrastSourceMatrix,
    op: &DenseOp,
    f: &Array2<Complex64>,
    tau: f64,
    state: &mut SpgState,
    opts: &MmvOptions,
) -> (ContrastSourceMatrix, f64) {
    let f_cur = state.objective();
    let f_ref = state.history.iter().copied().fold(f_cur, f64::max);
    let mut lambda = state.step;
    let mut accepted = None;
    let mut last = None;
    for _ in 0..=opts.max_backtracks {
        let trial_data = &j.data - &(&state.grad * Complex64::new(lambda, 0.0));
        let trial = project_group_l1(
            &ContrastSourceMatrix {
                data: trial_data,
                group_size: j.group_size,
            },
            tau,
        );
        let d = &trial.data - &j.data;
        let gtd = inner_re(&state.grad, &d);
        let r = f - &op.a.dot(&trial.data);
        let fval = 0.5 * frob(&r).powi(2);
        if fval <= f_ref + opts.ls_armijo * gtd {
            accepted = Some((trial, r));
            break;
        }
        last = Some((trial, r, fval));
        lambda *= 0.5;
    }
    let was_accepted = accepted.is_some();
    let (next, r) = match accepted {
        Some(x) => x,
        None => {
            state.fallbacks += 1;
            match last {
                Some((trial, r, fval)) if fval <= f_cur => (trial, r),
                _ => (j.clone(), state.r.clone()),
            }
        }
    };
    let grad = -op.ah.dot(&r);
    let s = &next.data - &j.data;
    let y = &grad - &state.grad;
    let sts = frob(&s).powi(2);
    let sty = inner_re(&s, &y);
    if sts > 0.0 {
        state.step = if sty <= 0.0 {
            opts.step_max
        } else {
            (sts / sty).clamp(opts.step_min, opts.step_max)
        };
    } else if !was_accepted {
        state.step = (state.step * 0.5f64.powi(opts.max_backtracks as i32 + 1)).max(opts.step_min);
    }
    state.r = r;
    state.grad = grad;
    let fval = state.objective();
    state.history.push_back(fval);
    while state.history.len() > opts.ls_memory.max(1) {
        state.history.pop_front();
    }
    let gamma = (2.0 * fval).sqrt();
    (next, gamma)
}

/// Newton step on the Pareto curve toward residual `sigma`:
/// `tau' = tau + (gamma - sigma) gamma / dual_norm`, where `dual_norm` is
/// the group dual norm of `Phi^H r` for the unnormalized residual `r`.
pub fn pareto_update(tau: f64, gamma_r: f64, sigma: f64, dual_norm: f64) -> Result<f64> {
    if gamma_r == sigma {
        return Ok(tau);
    }
    if dual_norm <= 0.0 {
        if gamma_r > sigma {
            return Err(CsiError::Unreachable { residual: gamma_r });
        }
        return Ok(tau);
    }
    Ok((tau + (gamma_r - sigma) * gamma_r / dual_norm).max(0.0))
}

/// Duality gap of the Lasso at a feasible iterate.
fn duality_gap(j: &ContrastSourceMatrix, grad: &Array2<Complex64>, tau: f64) -> f64 {
    tau * group_dual_norm(grad, j.group_size) + inner_re(grad, &j.data)
}

/// Reconstruction and cross-validation blocks of the joint problem.
#[derive(Clone, Debug)]
pub struct MmvProblem {
    pub phi_r: Array2<Complex64>,
    pub phi_cv: Array2<Complex64>,
    pub f_r: Array2<Complex64>,
    pub f_cv: Array2<Complex64>,
    /// Fixed residual target; `None` runs the decreasing schedule.
    pub sigma: Option<f64>,
    pub group_size: usize,
}

impl MmvProblem {
    pub fn new(
        phi_r: Array2<Complex64>,
        phi_cv: Array2<Complex64>,
        f_r: Array2<Complex64>,
        f_cv: Array2<Complex64>,
    ) -> Result<Self> {
        let p = MmvProblem {
            phi_r,
            phi_cv,
            f_r,
            f_cv,
            sigma: None,
            group_size: COMPONENTS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_split(split: &CvSplit) -> Result<Self> {
        Self::new(
            split.phi_r.clone(),
            split.phi_cv.clone(),
            split.f_r.clone(),
            split.f_cv.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phi_r.ncols();
        let ok = self.phi_cv.ncols() == n
            && self.f_r.nrows() == self.phi_r.nrows()
            && self.f_cv.nrows() == self.phi_cv.nrows()
            && self.f_r.ncols() == self.f_cv.ncols()
            && self.group_size > 0
            && n % self.group_size == 0;
        if !ok {
            return Err(CsiError::DimensionMismatch("inconsistent MMV blocks".into()));
        }
        Ok(())
    }

    pub fn num_unknowns(&self) -> usize {
        self.phi_r.ncols()
    }

    pub fn num_sources(&self) -> usize {
        self.f_r.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub tau: f64,
    pub gamma_r: f64,
    pub gamma_cv: f64,
    pub group_norm: f64,
    /// Index of the Pareto stage (count of tau updates so far).
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmvTrace {
    pub records: Vec<TraceRecord>,
    /// Index into `records` of the smallest CV residual.
    pub best_index: usize,
    pub snapshot: ContrastSourceMatrix,
    /// Why the iteration ended.
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIter,
    Patience,
    /// Residual at the floor, nothing left to fit.
    Exhausted,
    TargetReached,
}

impl MmvTrace {
    pub fn best(&self) -> &TraceRecord {
        &self.records[self.best_index]
    }

    /// Residual at the last iterate of each Pareto stage.
    pub fn stage_residuals(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut current = None;
        for rec in &self.records {
            if current != Some(rec.stage) {
                current = Some(rec.stage);
                out.push(rec.gamma_r);
            } else if let Some(last) = out.last_mut() {
                *last = rec.gamma_r;
            }
        }
        out
    }

    /// Writes `iter,tau,gamma_r,gamma_cv` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.iter.to_string(),
                    format!("{:e}", r.tau),
                    format!("{:e}", r.gamma_r),
                    format!("{:e}", r.gamma_cv),
                ]
            })
            .collect();
        crate::io::write_csv(path, &["iter", "tau", "gamma_r", "gamma_cv"], &rows)
    }
}

/// Runs the tau-staged iteration, tracking the CV residual, and returns
/// the iterate with the smallest CV residual.
pub fn solve_mmv_cv(problem: &MmvProblem, opts: &MmvOptions) -> Result<(ContrastSourceMatrix, MmvTrace)> {
    problem.validate()?;
    if problem.phi_cv.nrows() == 0 {
        return Err(CsiError::EmptyPartition("cross-validation block".into()));
    }
    let op = DenseOp::new(&problem.phi_r);
    let op_cv = DenseOp::new(&problem.phi_cv);
    let cv_res = |j: &ContrastSourceMatrix| frob(&(&problem.f_cv - &op_cv.a.dot(&j.data)));
    let mut j = ContrastSourceMatrix::zeros(problem.num_unknowns(), problem.num_sources(), problem.group_size)?;
    let mut state = SpgState::with_op(&j, &op, &problem.f_r, opts);
    let f_norm = frob(&problem.f_r);
    let mut gamma = f_norm;
    let mut tau = 0.0;
    let mut stage = 0;
    let schedule = problem.sigma.is_none();
    let mut sigma = problem.sigma.unwrap_or(0.5 * f_norm);

    let mut records = vec![TraceRecord {
        iter: 0,
        tau,
        gamma_r: gamma,
        gamma_cv: cv_res(&j),
        group_norm: 0.0,
        stage,
    }];
    let mut best_index = 0;
    let mut snapshot = j.clone();
    let mut stall = 0;
    let mut stop = StopReason::MaxIter;
    let floor = 1e-12 * f_norm;
    let mut stage_fresh = true;

    if f_norm == 0.0 && opts.max_iter > 0 {
        stop = StopReason::Exhausted;
    } else {
        for iter in 1..=opts.max_iter {
            let gamma_prev = gamma;
            let (next, g) = spg_step(&j, &op, &problem.f_r, tau, &mut state, opts);
            j = next;
            gamma = g;
            let gamma_cv = cv_res(&j);
            records.push(TraceRecord {
                iter,
                tau,
                gamma_r: gamma,
                gamma_cv,
                group_norm: group_norm(&j),
                stage,
            });
            if gamma_cv < records[best_index].gamma_cv {
                best_index = records.len() - 1;
                snapshot = j.clone();
                stall = 0;
            } else {
                stall += 1;
                if stall >= opts.patience {
                    stop = StopReason::Patience;
                    break;
                }
            }
            if gamma <= floor {
                stop = StopReason::Exhausted;
                break;
            }

            let gap = duality_gap(&j, &state.grad, tau);
            let rel_change = (gamma_prev - gamma).abs() / gamma.max(f64::MIN_POSITIVE);
            let inner_done = gap <= opts.inner_tol * f_norm * gamma || (!stage_fresh && rel_change < opts.inner_tol);
            stage_fresh = false;
            if !inner_done {
                continue;
            }
            if gamma <= sigma * (1.0 + opts.root_tol) {
                if !schedule {
                    stop = StopReason::TargetReached;
                    break;
                }
                while gamma <= sigma * (1.0 + opts.root_tol) {
                    sigma *= opts.sigma_decay;
                }
            }
            let dual = group_dual_norm(&state.grad, problem.group_size);
            match pareto_update(tau, gamma, sigma, dual) {
                Ok(t) => tau = t,
                Err(CsiError::Unreachable { .. }) => {
                    stop = StopReason::Exhausted;
                    break;
                }
                Err(e) => return Err(e),
            }
            stage += 1;
            stage_fresh = true;
        }
    }
    Ok((
        snapshot.clone(),
        MmvTrace {
            records,
            best_index,
            snapshot,
            stop,
        },
    ))
}

/// Outcome of a fixed-target solve.
#[derive(Clone, Debug, PartialEq)]
pub struct BpdnSolution {
    pub j: ContrastSourceMatrix,
    pub tau: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves the sum-of-norms problem for a known residual target `sigma`.
pub fn solve_bpdn(
    phi: &Array2<Complex64>,
    f: &Array2<Complex64>,
    sigma: f64,
    group_size: usize,
    opts: &MmvOptions,
) -> Result<BpdnSolution> {
    if phi.nrows() != f.nrows() {
        return Err(CsiError::DimensionMismatch("data rows differ from operator rows".into()));
    }
    let op = DenseOp::new(phi);
    let mut j = ContrastSourceMatrix::zeros(phi.ncols(), f.ncols(), group_size)?;
    let mut state = SpgState::with_op(&j, &op, f, opts);
    let f_norm = frob(f);
    let mut gamma = f_norm;
    let mut tau = 0.0;
    let mut stage_fresh = true;
    for iter in 1..=opts.max_iter {
        if gamma <= sigma * (1.0 + opts.root_tol) && gamma >= sigma * (1.0 - opts.root_tol) && !stage_fresh {
            return Ok(BpdnSolution {
                j,
                tau,
                residual: gamma,
                iterations: iter - 1,
            });
        }
        let gamma_prev = gamma;
        let (next, g) = spg_step(&j, &op, f, tau, &mut state, opts);
        j = next;
        gamma = g;
        let gap = duality_gap(&j, &state.grad, tau);
        let rel_change = (gamma_prev - gamma).abs() / gamma.max(f64::MIN_POSITIVE);
        let inner_done = gap <= opts.inner_tol * f_norm * gamma || (!stage_fresh && rel_change < opts.inner_tol);
        stage_fresh = false;
        if inner_done && (gamma - sigma).abs() > opts.root_tol * sigma {
            let dual = group_dual_norm(&state.grad, group_size);
            tau = pareto_update(tau, gamma, sigma, dual)?;
            stage_fresh = true;
        } else if inner_done {
            return Ok(BpdnSolution {
                j,
                tau,
                residual: gamma,
                iterations: iter,
            });
        }
    }
    Err(CsiError::NotConverged {
        iterations: opts.max_iter,
        residual: gamma,
        best: crate::error::BestIterate(j.data.iter().copied().collect()),
    })
}
